"""Software rasterizer for capsule-link robots.

Each link is a capsule (cylinder with spherical caps) around the segment
between consecutive joints.  Rendering is per-pixel ray casting in the
camera frame with an unnormalized direction ((col-cx)/fx, (row-cy)/fy, 1),
so the ray parameter of a hit equals its z depth and near-plane clipping
is a plain threshold on t.  A z-buffer with a winner-take-all owner array
yields exact, mutually disjoint instance masks.
"""

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .kinematics import forward_kinematics

# Near clipping plane; surfaces closer than this are invisible.
Z_NEAR = 0.05

# World-fixed directional light (pointing toward the light) and the
# ambient fraction of the flat Lambertian shading model.
LIGHT_WORLD = np.array([0.3, -0.2, 0.9]) / math.sqrt(0.3**2 + 0.2**2 + 0.9**2)
AMBIENT = 0.35

_EPS = 1e-12


def palette(n_color: int) -> np.ndarray:
    """Deterministic color palette, (n_color, 3) float in [0.2, 1.0].

    Derived only from the palette size so every run of the generator sees
    the same colors.
    """
    rng = np.random.default_rng(np.random.SeedSequence((0xC0108, n_color)))
    return rng.uniform(0.2, 1.0, size=(n_color, 3))


@dataclass
class Rasterization:
    """Result of rendering the robots of one scene.

    ``owner`` holds the robot slot index winning each pixel (-1 for
    background), ``depth`` the z of the winning surface (+inf on
    background), ``shaded`` the lit color of robot pixels in [0, 1].
    """

    owner: np.ndarray   # (H, W) int16
    depth: np.ndarray   # (H, W) float32
    shaded: np.ndarray  # (H, W, 3) float32


def _capsule_candidates(d, a_pt, b_pt, radius, z_near):
    """First surface hit of each ray with one capsule, +inf if none.

    d is (N, 3) unnormalized directions from the origin; a_pt/b_pt are the
    camera-frame segment endpoints.  Both quadratic roots of every surface
    are considered so rays starting inside the capsule still find their
    exit, and each candidate is kept only when its axial coordinate lies
    on the matching part (cylinder body between the caps, sphere caps
    beyond the segment ends).
    """
    n = d.shape[0]
    best = np.full(n, np.inf)
    axis = b_pt - a_pt
    length = float(np.linalg.norm(axis))

    def consider(t, ok):
        ok = ok & (t > z_near)
        np.minimum(best, np.where(ok, t, np.inf), out=best)

    def sphere(center, side):
        dd = np.einsum("ij,ij->i", d, d)
        dc = d @ center
        c = float(center @ center) - radius * radius
        disc = dc * dc - dd * c
        has = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        for t in ((dc - sq) / dd, (dc + sq) / dd):
            ok = has.copy()
            if length > _EPS and side is not None:
                y = (t[:, None] * d - a_pt) @ u_hat
                ok &= (y <= 0.0) if side == "a" else (y >= length)
            consider(t, ok)

    if length > _EPS:
        u_hat = axis / length
        oa = -a_pt
        w_perp = oa - (oa @ u_hat) * u_hat
        v_perp = d - np.outer(d @ u_hat, u_hat)
        a = np.einsum("ij,ij->i", v_perp, v_perp)
        b = 2.0 * (v_perp @ w_perp)
        c = float(w_perp @ w_perp) - radius * radius
        disc = b * b - 4.0 * a * c
        has = (disc >= 0) & (a > _EPS)
        sq = np.sqrt(np.maximum(disc, 0.0))
        denom = np.where(a > _EPS, 2.0 * a, 1.0)
        y0 = oa @ u_hat
        dy = d @ u_hat
        for t in ((-b - sq) / denom, (-b + sq) / denom):
            y = y0 + t * dy
            consider(t, has & (y >= 0.0) & (y <= length))
        sphere(a_pt, "a")
        sphere(b_pt, "b")
    else:
        u_hat = np.zeros(3)
        sphere(a_pt, None)
    return best


def _screen_box(points, radius, intr):
    """Conservative pixel-rect covering the capsule, or None if clipped out.

    Falls back to the full image whenever an endpoint is too close to the
    camera for a safe bound.
    """
    full = (0, intr.height, 0, intr.width)
    r0 = c0 = np.inf
    r1 = c1 = -np.inf
    f = max(intr.fx, intr.fy)
    for p in points:
        z = p[2]
        if z - radius <= Z_NEAR:
            return full
        pr = intr.fy * p[1] / z + intr.cy
        pc = intr.fx * p[0] / z + intr.cx
        margin = 1.5 * radius * f / (z - radius) + 3.0
        r0 = min(r0, pr - margin)
        r1 = max(r1, pr + margin)
        c0 = min(c0, pc - margin)
        c1 = max(c1, pc + margin)
    box = (
        int(max(0, math.floor(r0))), int(min(intr.height, math.ceil(r1) + 1)),
        int(max(0, math.floor(c0))), int(min(intr.width, math.ceil(c1) + 1)),
    )
    if box[0] >= box[1] or box[2] >= box[3]:
        return None
    return box


def rasterize_scene(cfg, spec) -> Rasterization:
    """Render the visible robots of a scene spec.

    Pixel ownership is decided purely by the z-buffer, so the returned
    per-robot masks (owner == slot) are disjoint by construction.
    """
    intr = cfg.intrinsics()
    height, width = intr.height, intr.width
    colors = palette(cfg.n_color)

    depth = np.full((height, width), np.inf, dtype=np.float64)
    owner = np.full((height, width), -1, dtype=np.int16)
    shaded = np.zeros((height, width, 3), dtype=np.float32)

    cols = (np.arange(width) - intr.cx) / intr.fx
    rows = (np.arange(height) - intr.cy) / intr.fy
    dir_x = np.broadcast_to(cols[None, :], (height, width))
    dir_y = np.broadcast_to(rows[:, None], (height, width))

    light_cam = spec.camera.rotation() @ LIGHT_WORLD

    for slot, robot in enumerate(spec.robots):
        if not robot.visible:
            continue
        base = cfg.robot.base_position(slot, cfg.max_robots)
        joints = forward_kinematics(cfg.robot, robot.angles, base)
        cam = spec.camera.world_to_camera(joints)
        for link in range(cfg.robot.joint_count - 1):
            a_pt, b_pt = cam[link], cam[link + 1]
            if max(a_pt[2], b_pt[2]) + cfg.robot.link_radius <= Z_NEAR:
                continue
            box = _screen_box((a_pt, b_pt), cfg.robot.link_radius, intr)
            if box is None:
                continue
            rr0, rr1, cc0, cc1 = box
            d = np.stack(
                [
                    dir_x[rr0:rr1, cc0:cc1].ravel(),
                    dir_y[rr0:rr1, cc0:cc1].ravel(),
                    np.ones((rr1 - rr0) * (cc1 - cc0)),
                ],
                axis=1,
            )
            t = _capsule_candidates(d, a_pt, b_pt, cfg.robot.link_radius, Z_NEAR)
            t = t.reshape(rr1 - rr0, cc1 - cc0)
            zview = depth[rr0:rr1, cc0:cc1]
            closer = t < zview
            if not closer.any():
                continue
            zview[closer] = t[closer]
            owner[rr0:rr1, cc0:cc1][closer] = slot

            hit_d = d.reshape(rr1 - rr0, cc1 - cc0, 3)[closer]
            points = t[closer][:, None] * hit_d
            axis = b_pt - a_pt
            length = float(np.linalg.norm(axis))
            if length > _EPS:
                u_hat = axis / length
                y = np.clip((points - a_pt) @ u_hat, 0.0, length)
                nearest = a_pt + np.outer(y, u_hat)
            else:
                nearest = np.broadcast_to(a_pt, points.shape)
            normals = (points - nearest) / cfg.robot.link_radius
            lambert = np.maximum(normals @ light_cam, 0.0)
            intensity = AMBIENT + (1.0 - AMBIENT) * lambert
            if cfg.colorize_mode == "per-joint":
                base_color = colors[robot.color_indices[link]]
            else:
                base_color = colors[robot.color_indices[0]]
            shaded[rr0:rr1, cc0:cc1][closer] = (
                intensity[:, None] * base_color
            ).astype(np.float32)

    return Rasterization(
        owner=owner, depth=depth.astype(np.float32), shaded=np.clip(shaded, 0.0, 1.0)
    )


def _procedural_image(theme_seed: int, index: int, size) -> np.ndarray:
    """Smooth sinusoidal RGB texture, deterministic in (theme, index)."""
    rng = np.random.default_rng(np.random.SeedSequence((theme_seed, index)))
    height, width = size
    yy = np.linspace(0.0, 1.0, height)[:, None]
    xx = np.linspace(0.0, 1.0, width)[None, :]
    img = np.empty((height, width, 3))
    for ch in range(3):
        v = np.full((height, width), rng.uniform(0.2, 0.8))
        for _ in range(3):
            f_row = rng.uniform(0.5, 4.0)
            f_col = rng.uniform(0.5, 4.0)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            amp = rng.uniform(0.05, 0.25)
            v += amp * np.sin(2.0 * math.pi * (f_row * yy + f_col * xx) + phase)
        img[..., ch] = v
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


class BackgroundPool:
    """Fixed collection of backdrop images.

    Either loaded from a directory of image files (sorted by name) or
    procedurally generated from a theme string, so disjoint train/test
    pools are just two theme names.
    """

    def __init__(self, images):
        if not images:
            raise ValueError("background pool must not be empty")
        self._images = [np.asarray(im, dtype=np.uint8) for im in images]
        for im in self._images:
            if im.ndim != 3 or im.shape[2] != 3:
                raise ValueError("backgrounds must be RGB arrays")

    @classmethod
    def procedural(cls, theme: str = "train", count: int = 32, size=(240, 320)):
        seed = zlib.crc32(theme.encode("utf-8"))
        return cls([_procedural_image(seed, i, size) for i in range(count)])

    @classmethod
    def from_directory(cls, path):
        exts = {".png", ".jpg", ".jpeg", ".bmp"}
        files = sorted(
            p for p in Path(path).iterdir() if p.suffix.lower() in exts
        )
        if not files:
            raise ValueError(f"no images found in {path}")
        return cls([np.asarray(Image.open(p).convert("RGB")) for p in files])

    def __len__(self):
        return len(self._images)

    def get(self, u: float) -> np.ndarray:
        """Image for a unit-interval selector (u in [0, 1))."""
        index = min(int(u * len(self._images)), len(self._images) - 1)
        return self._images[index]


def crop_background(image: np.ndarray, out_shape, scale_rel: float, anchor) -> np.ndarray:
    """Scale-and-crop a backdrop to the output shape.

    The image is resized by scale_rel times the minimal covering scale and
    a window of the output size is cut at the fractional anchor within the
    remaining slack.
    """
    out_h, out_w = out_shape
    src_h, src_w = image.shape[:2]
    cover = max(out_h / src_h, out_w / src_w)
    s = cover * scale_rel
    new_h = max(out_h, math.ceil(src_h * s))
    new_w = max(out_w, math.ceil(src_w * s))
    resized = np.asarray(
        Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR)
    )
    top = int(round(anchor[0] * (new_h - out_h)))
    left = int(round(anchor[1] * (new_w - out_w)))
    return resized[top : top + out_h, left : left + out_w]


def composite(cfg, spec, rasterization: Rasterization, pool: BackgroundPool,
              rng: np.random.Generator) -> np.ndarray:
    """Compose the final uint8 image: backdrop, robots, additive noise."""
    bg = pool.get(spec.background_u)
    canvas = crop_background(
        bg, (cfg.height, cfg.width), spec.background_scale, spec.background_anchor
    ).astype(np.float64)
    robot = rasterization.owner >= 0
    canvas[robot] = rasterization.shaded[robot] * 255.0
    amp = spec.noise_amplitude
    canvas += rng.uniform(-amp, amp, size=canvas.shape)
    return np.clip(np.rint(canvas), 0.0, 255.0).astype(np.uint8)

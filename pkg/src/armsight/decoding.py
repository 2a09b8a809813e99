"""From dense network outputs to per-robot joint positions.

Peaks in each masked belief channel become 2D joint estimates (with
sub-pixel refinement), the sparse inverse-depth map provides their metric
depth, and backprojection through the camera lifts them to 3D.  Peak
finding comes in two flavors: plain non-maximum suppression on the raw
channel, and blob detection on a scale-normalized Laplacian-of-Gaussian
response.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_laplace, maximum_filter

from .geometry import backproject

DEFAULT_PEAK_THRESHOLD = 0.3
DEFAULT_WINDOW = 5


def mask_beliefs(beliefs: np.ndarray, mask: np.ndarray,
                 mask_threshold: float = 0.5) -> np.ndarray:
    """Restrict belief maps to one instance.

    The mask is binarized at mask_threshold and multiplied into every
    channel, so peak scores inside the instance are preserved exactly.
    """
    binary = (np.asarray(mask) > mask_threshold).astype(beliefs.dtype)
    if beliefs.ndim == 2:
        return beliefs * binary
    return beliefs * binary[None]


def local_maxima(channel: np.ndarray, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Boolean map of pixels that attain the maximum of their in-image window.

    Out-of-image neighbors never participate (the filter pads with -inf),
    and plateau pixels all count as maxima.
    """
    filt = maximum_filter(channel, size=window, mode="constant", cval=-np.inf)
    return channel >= filt


def find_peaks_nms(channel: np.ndarray, threshold: float = DEFAULT_PEAK_THRESHOLD,
                   window: int = DEFAULT_WINDOW) -> list:
    """Local maxima at or above the score threshold.

    Returns (row, col, score) tuples sorted by (-score, row, col) so the
    strongest peak is first and ties break deterministically.
    """
    channel = np.asarray(channel)
    mask = local_maxima(channel, window) & (channel >= threshold)
    rows, cols = np.nonzero(mask)
    peaks = [(int(r), int(c), float(channel[r, c])) for r, c in zip(rows, cols)]
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    return peaks


def log_response(channel: np.ndarray, sigma_log: float) -> np.ndarray:
    """Scale-normalized Laplacian-of-Gaussian blob response.

    Sign-flipped so bright blobs give positive response; for a Gaussian
    bump of amplitude A and matching width the center response is A / 2.
    """
    channel = np.asarray(channel, dtype=np.float64)
    return -(sigma_log ** 2) * gaussian_laplace(
        channel, sigma_log, mode="constant", cval=0.0
    )


def find_peaks_log(channel: np.ndarray, threshold: float = DEFAULT_PEAK_THRESHOLD,
                   sigma_log: float = 3.0, window: int = DEFAULT_WINDOW,
                   response_threshold: float = None) -> list:
    """Blob peaks of the LoG response; scores come from the raw channel.

    The response threshold defaults to half the score threshold, matching
    the amplitude halving of a width-matched Gaussian bump.
    """
    if response_threshold is None:
        response_threshold = 0.5 * threshold
    channel = np.asarray(channel)
    resp = log_response(channel, sigma_log)
    mask = local_maxima(resp, window) & (resp >= response_threshold)
    rows, cols = np.nonzero(mask)
    peaks = [(int(r), int(c), float(channel[r, c])) for r, c in zip(rows, cols)]
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    return peaks


def refine_subpixel(channel: np.ndarray, row: int, col: int) -> tuple:
    """Quadratic sub-pixel refinement, one axis at a time.

    Fits a parabola through the three samples around the peak on each
    axis; the offset is clipped to half a pixel and skipped entirely on
    image borders or degenerate (flat) neighborhoods.
    """
    channel = np.asarray(channel)
    height, width = channel.shape

    def axis_offset(minus, center, plus):
        denom = minus - 2.0 * center + plus
        if denom == 0.0:
            return 0.0
        return float(np.clip(0.5 * (minus - plus) / denom, -0.5, 0.5))

    r, c = float(row), float(col)
    if 0 < row < height - 1:
        r += axis_offset(channel[row - 1, col], channel[row, col],
                         channel[row + 1, col])
    if 0 < col < width - 1:
        c += axis_offset(channel[row, col - 1], channel[row, col],
                         channel[row, col + 1])
    return r, c


def read_disc_depth(depth_map: np.ndarray, row: int, col: int) -> tuple:
    """Unit depth of the disc under a peak.

    The value at the peak pixel wins when the peak sits inside a disc;
    adjacent discs of neighboring joints can touch the peak's 3x3 patch,
    and averaging across them would corrupt the readout.  When the peak
    pixel itself carries no disc (an imperfectly placed predicted peak),
    the median positive value of the 3x3 patch fills in.  Returns
    (unit_depth, True) or (nan, False) when the patch holds no positive
    entries.
    """
    height, width = depth_map.shape
    if depth_map[row, col] > 0:
        return float(depth_map[row, col]), True
    r0, r1 = max(0, row - 1), min(height, row + 2)
    c0, c1 = max(0, col - 1), min(width, col + 2)
    patch = depth_map[r0:r1, c0:c1]
    positive = patch[patch > 0]
    if positive.size == 0:
        return float("nan"), False
    return float(np.median(positive)), True


@dataclass
class JointEstimate:
    """Decoded joint of one instance; found=False means no peak passed."""

    joint: int
    row: float = float("nan")
    col: float = float("nan")
    score: float = 0.0
    found: bool = False
    ambiguous: bool = False
    unit_depth: float = float("nan")
    z: float = float("nan")
    point: tuple = None
    has_depth: bool = False


@dataclass
class RobotEstimate:
    joints: list
    confidence: float
    mask: np.ndarray = None


def decode_instance_joints(beliefs: np.ndarray, depth_map: np.ndarray,
                           intrinsics, transform,
                           threshold: float = DEFAULT_PEAK_THRESHOLD,
                           window: int = DEFAULT_WINDOW,
                           method: str = "nms",
                           sigma_log: float = 3.0) -> list:
    """One joint estimate per belief channel (already instance-masked).

    The strongest peak of each channel wins; extra peaks above threshold
    only set the ambiguity flag.  Depth is read from the disc map at the
    integer peak; 3D points use the refined sub-pixel position.
    """
    estimates = []
    for j in range(beliefs.shape[0]):
        channel = beliefs[j]
        if method == "nms":
            peaks = find_peaks_nms(channel, threshold, window)
        elif method == "log":
            peaks = find_peaks_log(channel, threshold, sigma_log, window)
        else:
            raise ValueError(f"unknown peak method {method!r}")
        if not peaks:
            estimates.append(JointEstimate(joint=j))
            continue
        row, col, score = peaks[0]
        rr, cc = refine_subpixel(channel, row, col)
        est = JointEstimate(
            joint=j, row=rr, col=cc, score=score, found=True,
            ambiguous=len(peaks) > 1,
        )
        unit, ok = read_disc_depth(depth_map, row, col)
        if ok:
            est.unit_depth = unit
            est.z = float(transform.to_depth(unit))
            est.point = tuple(backproject((rr, cc), est.z, intrinsics))
            est.has_depth = True
        estimates.append(est)
    return estimates


def decode_scene(beliefs: np.ndarray, depth_map: np.ndarray, instance_masks,
                 confidences, intrinsics, transform,
                 threshold: float = DEFAULT_PEAK_THRESHOLD,
                 window: int = DEFAULT_WINDOW, method: str = "nms",
                 sigma_log: float = 3.0,
                 mask_threshold: float = 0.5) -> list:
    """Decode every instance of a scene into joint estimates.

    beliefs (J, H, W) and depth_map (H, W) are shared; each instance mask
    carves out its own region before peak decoding.
    """
    robots = []
    for k in range(len(instance_masks)):
        masked = mask_beliefs(beliefs, instance_masks[k], mask_threshold)
        joints = decode_instance_joints(
            masked, depth_map, intrinsics, transform,
            threshold=threshold, window=window, method=method,
            sigma_log=sigma_log,
        )
        robots.append(
            RobotEstimate(
                joints=joints,
                confidence=float(confidences[k]),
                mask=np.asarray(instance_masks[k]),
            )
        )
    return robots

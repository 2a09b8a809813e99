"""Staged joint localization network.

A small stride-8 backbone feeds a cascade of refinement stages.  Every
stage emits, at the coarse resolution, one belief map per joint type plus
one sparse inverse-depth channel, all squashed to [0, 1]; later stages see
the previous stage's maps next to the shared features, so localization
errors can be corrected with growing effective receptive field.  A final
learned upsampling head lifts the last stage's maps back to input
resolution.
"""

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import DivergenceError
from ..scenegen import UNIT_DEPTH_FLOOR, Z_NEAR, targets_at_stride

STRIDE = 8

# Target maps are mostly zero, so the pre-sigmoid output layers start with
# their bias at the logit of a small base rate.  Starting at sigmoid(0)=0.5
# instead wastes early epochs unlearning a 50% prior, and the push toward
# zero saturates the peaks along with the background.
OUTPUT_PRIOR = 0.05


def _init_output_conv(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.constant_(conv.bias, float(np.log(OUTPUT_PRIOR / (1 - OUTPUT_PRIOR))))
    return conv


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Feature extractor with total stride 8.

    Besides the stride-8 output it returns the intermediate maps at
    strides 4, 2 and 1, which the upsampling head uses as skip inputs;
    without them, peak positions would be quantized to the coarse grid.
    """

    SKIP_CHANNELS = (64, 48, 32)

    def __init__(self, features: int = 64):
        super().__init__()
        self.stem = nn.Sequential(_conv_block(3, 32), _conv_block(32, 32))
        self.pool = nn.MaxPool2d(2)
        self.down2 = _conv_block(32, 48)
        self.down4 = _conv_block(48, 64)
        self.down8 = _conv_block(64, features)

    def forward(self, x: torch.Tensor):
        p1 = self.stem(x - 0.5)
        p2 = self.down2(self.pool(p1))
        p4 = self.down4(self.pool(p2))
        p8 = self.down8(self.pool(p4))
        return p8, (p4, p2, p1)


class Stage(nn.Module):
    """One refinement stage, sigmoid maps at the coarse resolution."""

    def __init__(self, in_channels: int, out_channels: int, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            _conv_block(in_channels, width),
            _conv_block(width, width),
            _conv_block(width, width),
            _init_output_conv(nn.Conv2d(width, out_channels, 1)),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class UpsampleHead(nn.Module):
    """Learned x8 upsampling from coarse sigmoid maps to full resolution.

    The head reads the last stage's maps next to the backbone features,
    and each doubling concatenates the backbone map of the target
    resolution, so it can restore the sub-block peak positions that
    pooling removed from the coarse maps.
    """

    def __init__(self, channels: int, width: int = 32, features: int = 64,
                 skip_channels=Backbone.SKIP_CHANNELS):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        blocks = []
        in_ch = channels + features
        for skip in skip_channels:
            blocks.append(_conv_block(in_ch + skip, width))
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Sequential(
            _init_output_conv(nn.Conv2d(width, channels, 1)), nn.Sigmoid()
        )

    def forward(self, x: torch.Tensor, features: torch.Tensor, skips) -> torch.Tensor:
        x = torch.cat([x, features], dim=1)
        for block, skip in zip(self.blocks, skips):
            x = block(torch.cat([self.upsample(x), skip], dim=1))
        return self.out(x)


@dataclass
class LocalizationOutput:
    """stages: coarse (N, J+1, H/8, W/8) maps, one entry per stage;
    full: (N, J+1, H, W) upsampled output; features: backbone maps."""

    stages: list
    full: torch.Tensor
    features: torch.Tensor

    def beliefs(self) -> torch.Tensor:
        return self.full[:, :-1]

    def depth(self) -> torch.Tensor:
        return self.full[:, -1]


class LocalizationNet(nn.Module):
    """Belief-map and inverse-depth regressor for J joint types."""

    def __init__(self, n_joints: int = 6, features: int = 64, n_stages: int = 5,
                 stage_width: int = 64, head_width: int = 32):
        super().__init__()
        if n_stages < 1:
            raise ValueError("need at least one stage")
        self.n_joints = n_joints
        self.features = features
        self.n_stages = n_stages
        self.stage_width = stage_width
        self.head_width = head_width
        out_ch = n_joints + 1
        self.backbone = Backbone(features)
        stages = [Stage(features, out_ch, stage_width)]
        for _ in range(n_stages - 1):
            stages.append(Stage(features + out_ch, out_ch, stage_width))
        self.stages = nn.ModuleList(stages)
        self.head = UpsampleHead(out_ch, head_width, features)

    def hyperparams(self) -> dict:
        return {
            "n_joints": self.n_joints,
            "features": self.features,
            "n_stages": self.n_stages,
            "stage_width": self.stage_width,
            "head_width": self.head_width,
        }

    def forward(self, images: torch.Tensor) -> LocalizationOutput:
        """images: (N, 3, H, W) float in [0, 1], H and W divisible by 8."""
        if images.shape[-2] % STRIDE or images.shape[-1] % STRIDE:
            raise ValueError(f"image sides must be divisible by {STRIDE}")
        feat, skips = self.backbone(images)
        outputs = []
        x = feat
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = torch.cat([outputs[-1], feat], dim=1)
            outputs.append(stage(x))
        full = self.head(outputs[-1], feat, skips)
        return LocalizationOutput(stages=outputs, full=full, features=feat)


def stage_loss(pred: torch.Tensor, beliefs: torch.Tensor, depth: torch.Tensor,
               weight: torch.Tensor) -> torch.Tensor:
    """Squared-error loss of one output against its targets.

    pred is (N, J+1, h, w); channel J is the depth map.  Belief error is
    summed over all channels and pixels; depth error is summed over pixels
    weighted by the supervision mask (1 on the target discs, 0 elsewhere).
    Only the batch dimension is averaged.
    """
    if pred.shape[1] != beliefs.shape[1] + 1:
        raise ValueError("prediction must carry one extra depth channel")
    b_err = ((beliefs - pred[:, :-1]) ** 2).sum(dim=(1, 2, 3))
    d_err = (weight * (depth - pred[:, -1]) ** 2).sum(dim=(1, 2))
    return (b_err + d_err).mean()


def total_loss(output: LocalizationOutput, targets: dict) -> torch.Tensor:
    """Sum of the per-stage coarse losses plus the full-resolution loss."""
    loss = output.full.new_zeros(())
    for stage_out in output.stages:
        loss = loss + stage_loss(
            stage_out, targets["beliefs_low"], targets["depth_low"],
            targets["weight_low"],
        )
    loss = loss + stage_loss(
        output.full, targets["beliefs"], targets["depth"], targets["weight"]
    )
    return loss


def build_targets(cfg, samples) -> dict:
    """Stack full- and coarse-resolution training targets for a sample list.

    Full-resolution targets come straight from the stored ground truth;
    coarse targets are re-derived from the joint geometry on the stride-8
    grid.  Depth supervision weights are exactly the support of the target
    depth maps.
    """
    transform = cfg.depth_transform()
    beliefs = np.stack([s.beliefs for s in samples])
    depth = np.stack([s.depth for s in samples])
    lows_b, lows_d = [], []
    for s in samples:
        z = s.joints_3d[..., 2]
        front = z > Z_NEAR
        unit = np.maximum(transform.to_unit(z), UNIT_DEPTH_FLOOR)
        lb, ld = targets_at_stride(
            s.joints_2d, front, unit, (cfg.height, cfg.width),
            cfg.sigma, cfg.phi, STRIDE,
        )
        lows_b.append(lb)
        lows_d.append(ld)
    beliefs_low = np.stack(lows_b)
    depth_low = np.stack(lows_d)
    return {
        "beliefs": torch.from_numpy(beliefs),
        "depth": torch.from_numpy(depth),
        "weight": torch.from_numpy((depth > 0).astype(np.float32)),
        "beliefs_low": torch.from_numpy(beliefs_low),
        "depth_low": torch.from_numpy(depth_low),
        "weight_low": torch.from_numpy((depth_low > 0).astype(np.float32)),
    }


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 to (N, 3, H, W) float32 in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(
        np.ascontiguousarray(np.moveaxis(arr, -1, 1), dtype=np.float32) / 255.0
    )


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    schedule: str = "cosine"
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"


def make_scheduler(opt: torch.optim.Optimizer, cfg: TrainConfig):
    """Per-epoch learning-rate schedule; None means constant."""
    if cfg.schedule == "constant":
        return None
    if cfg.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=max(cfg.epochs, 1), eta_min=cfg.lr * 0.05
        )
    raise ValueError(f"unknown lr schedule {cfg.schedule!r}")


def apply_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def train_localizer(net: LocalizationNet, images: torch.Tensor, targets: dict,
                    cfg: TrainConfig, log=None) -> dict:
    """Optimize the network in place; returns the training history.

    Aborts with DivergenceError when the loss stops being finite.
    """
    apply_determinism(cfg)
    device = torch.device(cfg.device)
    net.to(device)
    images = images.to(device)
    targets = {k: v.to(device) for k, v in targets.items()}
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = make_scheduler(opt, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = images.shape[0]
    history = {"epoch_loss": []}
    start = time.perf_counter()
    net.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        batches = 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            opt.zero_grad()
            out = net(images[idx])
            batch_targets = {k: v[idx] for k, v in targets.items()}
            loss = total_loss(out, batch_targets)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"training loss became non-finite at epoch {epoch}"
                )
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            batches += 1
        if sched is not None:
            sched.step()
        history["epoch_loss"].append(epoch_loss / max(batches, 1))
        if log is not None:
            log.info("epoch %d / %d: loss %.4f", epoch + 1, cfg.epochs,
                     history["epoch_loss"][-1])
    history["time_sec"] = time.perf_counter() - start
    net.eval()
    return history


def predict_maps(net: LocalizationNet, images: torch.Tensor,
                 batch_size: int = 8):
    """Full-resolution beliefs and depth for a batch, without gradients.

    Returns (beliefs (N, J, H, W), depth (N, H, W)) as numpy arrays.
    """
    net.eval()
    outs_b, outs_d = [], []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out = net(images[i : i + batch_size])
            outs_b.append(out.beliefs().cpu().numpy())
            outs_d.append(out.depth().cpu().numpy())
    return np.concatenate(outs_b), np.concatenate(outs_d)


def save_localizer(net: LocalizationNet, path) -> None:
    torch.save({"kind": "localizer", "hyperparams": net.hyperparams(),
                "state": net.state_dict()}, path)


def load_localizer(path) -> LocalizationNet:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "localizer":
        raise ValueError(f"{path} does not hold a localization checkpoint")
    net = LocalizationNet(**payload["hyperparams"])
    net.load_state_dict(payload["state"])
    net.eval()
    return net

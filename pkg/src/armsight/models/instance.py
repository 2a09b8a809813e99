"""Recurrent instance segmentation over localization maps.

The network reads a fixed per-scene input (predicted joint beliefs and
inverse depth next to backbone features, all at the coarse resolution) and
emits one full-resolution robot mask per recurrent step.  A convolutional
GRU provides the memory that lets consecutive steps pick different robots;
training matches the step outputs to ground-truth instances with a
minimum-cost soft-IoU assignment and drives the final extra step toward
the all-zero end-of-sequence mask.
"""

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import DivergenceError
from ..matching import instance_sequence_loss
from .localization import (STRIDE, TrainConfig, apply_determinism, _conv_block,
                           _init_output_conv, make_scheduler)


class ContextModule(nn.Module):
    """Scene summary used as the initial recurrent state.

    Three pooled conv blocks widen the receptive field to (most of) the
    frame; the result is upsampled back to the working resolution so the
    first step already knows the global scene layout.
    """

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.down = nn.Sequential(
            _conv_block(in_channels, hidden), nn.MaxPool2d(2),
            _conv_block(hidden, hidden), nn.MaxPool2d(2),
            _conv_block(hidden, hidden), nn.MaxPool2d(2),
        )
        self.mix = nn.Conv2d(hidden, hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        y = self.down(x)
        y = nn.functional.interpolate(y, size=(h, w), mode="nearest")
        return torch.tanh(self.mix(y))


class ConvGRUCell(nn.Module):
    """Convolutional GRU with the update gate acting on the candidate.

    h' = (1 - z) * h + z * h~, so a closed gate (z = 0) leaves the state
    untouched.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.gates = nn.Conv2d(in_channels + hidden, 2 * hidden, kernel, padding=pad)
        self.candidate = nn.Conv2d(in_channels + hidden, hidden, kernel, padding=pad)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        zr = self.gates(torch.cat([x, h], dim=1))
        z, r = torch.chunk(torch.sigmoid(zr), 2, dim=1)
        cand = torch.tanh(self.candidate(torch.cat([x, r * h], dim=1)))
        return (1.0 - z) * h + z * cand


class MaskHead(nn.Module):
    """Hidden state to one full-resolution sigmoid mask."""

    def __init__(self, hidden: int, width: int = 32):
        super().__init__()
        layers = []
        in_ch = hidden
        for _ in range(3):
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(_conv_block(in_ch, width))
            in_ch = width
        layers.append(_init_output_conv(nn.Conv2d(width, 1, 1)))
        layers.append(nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


class InstanceNet(nn.Module):
    """One-robot-per-step mask generator."""

    def __init__(self, in_channels: int = 71, hidden: int = 64,
                 head_width: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.head_width = head_width
        self.context = ContextModule(in_channels, hidden)
        self.cell = ConvGRUCell(in_channels, hidden)
        self.head = MaskHead(hidden, head_width)

    def hyperparams(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "hidden": self.hidden,
            "head_width": self.head_width,
        }

    def forward(self, x: torch.Tensor, steps: int) -> torch.Tensor:
        """Unroll a fixed number of steps; returns (N, steps, H, W)."""
        h = self.context(x)
        masks = []
        for _ in range(steps):
            h = self.cell(x, h)
            masks.append(self.head(h))
        return torch.cat(masks, dim=1)


def make_instance_inputs(loc_net, images: torch.Tensor,
                         coarse_maps: torch.Tensor = None) -> torch.Tensor:
    """Assemble the per-scene input: coarse maps next to backbone features.

    By default the localizer's own final-stage output is used (after its
    sigmoid).  Passing coarse_maps substitutes other maps of the same shape,
    e.g. ground-truth targets for teacher-forced training.  The result is
    detached: instance training never updates the localizer.
    """
    loc_net.eval()
    with torch.no_grad():
        out = loc_net(images)
        maps = out.stages[-1] if coarse_maps is None else coarse_maps
        return torch.cat([maps, out.features], dim=1).detach()


@dataclass
class InstancePrediction:
    masks: np.ndarray        # (K, H, W) float32 activations
    confidences: np.ndarray  # (K,) mean activation per emitted mask
    steps_run: int


def predict_instances(net: InstanceNet, x: torch.Tensor, max_steps: int,
                      stop_fraction: float = 0.05,
                      threshold: float = 0.5) -> list:
    """Emit masks for each scene until the stop rule fires.

    A step whose mask activates fewer than stop_fraction of the pixels
    (above the binarization threshold) is the stop signal: it is dropped
    and iteration ends.  Per-mask confidence is the mean activation.
    Returns one InstancePrediction per scene.
    """
    net.eval()
    results = []
    with torch.no_grad():
        for i in range(x.shape[0]):
            h = net.context(x[i : i + 1])
            masks, confs = [], []
            steps = 0
            for _ in range(max_steps):
                h = net.cell(x[i : i + 1], h)
                m = net.head(h)[0, 0]
                steps += 1
                frac = float((m > threshold).float().mean())
                if frac < stop_fraction:
                    break
                masks.append(m.cpu().numpy().astype(np.float32))
                confs.append(float(m.mean()))
            full_shape = (x.shape[-2] * STRIDE, x.shape[-1] * STRIDE)
            results.append(
                InstancePrediction(
                    masks=np.stack(masks) if masks
                    else np.zeros((0,) + full_shape, dtype=np.float32),
                    confidences=np.asarray(confs, dtype=np.float64),
                    steps_run=steps,
                )
            )
    return results


def train_instance(net: InstanceNet, inputs: torch.Tensor, gt_masks: list,
                   cfg: TrainConfig, log=None) -> dict:
    """Optimize the instance net; gt_masks is one (R_i, H, W) array per scene.

    Each scene is unrolled for R_i + 1 steps and scored with the matched
    soft-IoU loss; scenes in a batch contribute the mean of their losses.
    """
    apply_determinism(cfg)
    device = torch.device(cfg.device)
    net.to(device)
    inputs = inputs.to(device)
    targets = [
        torch.as_tensor(np.asarray(m), dtype=torch.float32, device=device)
        for m in gt_masks
    ]
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = make_scheduler(opt, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = inputs.shape[0]
    history = {"epoch_loss": []}
    start = time.perf_counter()
    net.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        batches = 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size].tolist()
            opt.zero_grad()
            losses = []
            for j in idx:
                steps = targets[j].shape[0] + 1
                seq = net(inputs[j : j + 1], steps)[0]
                loss_j, _ = instance_sequence_loss(seq, targets[j])
                losses.append(loss_j)
            loss = torch.stack(losses).mean()
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


def save_instance(net: InstanceNet, path) -> None:
    torch.save({"kind": "instance", "hyperparams": net.hyperparams(),
                "state": net.state_dict()}, path)


def load_instance(path) -> InstanceNet:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "instance":
        raise ValueError(f"{path} does not hold an instance checkpoint")
    net = InstanceNet(**payload["hyperparams"])
    net.load_state_dict(payload["state"])
    net.eval()
    return net

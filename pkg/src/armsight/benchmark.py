"""Wall-clock micro-benchmarks of the pipeline's hot paths.

Each task runs a fixed workload for a configurable number of repetitions
(after one warm-up call) and reports mean / std / min milliseconds
together with a hardware description, so numbers from different machines
are comparable in context.
"""

import os
import platform
import time

import numpy as np
import torch

from . import decoding
from .models.localization import LocalizationNet, images_to_tensor
from .raster import rasterize_scene
from .scenegen import ScenegenConfig, render_ground_truth, sample_scene, scene_rng

MIN_REPEATS = 20


def _time_task(fn, repeats: int) -> dict:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    arr = np.asarray(times) * 1000.0
    return {
        "repeats": repeats,
        "mean_ms": float(arr.mean()),
        "std_ms": float(arr.std()),
        "min_ms": float(arr.min()),
    }


def hardware_info() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "cpu_count": os.cpu_count(),
        "torch_threads": torch.get_num_threads(),
    }


def run_benchmark(cfg: ScenegenConfig = None, repeats: int = MIN_REPEATS,
                  seed: int = 0) -> dict:
    """Benchmark rasterization, localization forward pass, and both peak
    decoders on one representative scene."""
    if cfg is None:
        cfg = ScenegenConfig()
    repeats = max(repeats, MIN_REPEATS)
    rng = scene_rng(seed, 0)
    spec = sample_scene(cfg, rng)
    while spec.camera.radius <= 0.05 or not any(r.visible for r in spec.robots):
        spec = sample_scene(cfg, rng)
    gt, _ = render_ground_truth(cfg, spec)

    torch.manual_seed(seed)
    net = LocalizationNet(n_joints=cfg.robot.joint_count, n_stages=3)
    net.eval()
    image = np.zeros((cfg.height, cfg.width, 3), dtype=np.uint8)
    batch = images_to_tensor(image)

    def run_raster():
        rasterize_scene(cfg, spec)

    def run_forward():
        with torch.no_grad():
            net(batch)

    def run_nms():
        for j in range(gt.beliefs.shape[0]):
            decoding.find_peaks_nms(gt.beliefs[j])

    def run_log():
        for j in range(gt.beliefs.shape[0]):
            decoding.find_peaks_log(gt.beliefs[j], sigma_log=cfg.sigma)

    tasks = {
        "rasterize_scene": _time_task(run_raster, repeats),
        "localizer_forward": _time_task(run_forward, repeats),
        "nms_decode": _time_task(run_nms, repeats),
        "log_decode": _time_task(run_log, repeats),
    }
    return {
        "hardware": hardware_info(),
        "image_size": [cfg.height, cfg.width],
        "tasks": tasks,
        "nms_faster_than_log": tasks["nms_decode"]["mean_ms"]
        < tasks["log_decode"]["mean_ms"],
    }

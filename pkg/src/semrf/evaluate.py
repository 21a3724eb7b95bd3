"""Full-frame evaluation of a trained model over a dataset split."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .dataset import Dataset, DatasetError, Pair
from .metrics import DepthAccumulator, confusion_matrix, report_json, semantic_metrics
from .model import RenderedView, render_view
from .train import Checkpoint, TrainConfig


@dataclass
class EvalResult:
    report: dict
    views: list[tuple[Pair, RenderedView]]


def predict_pair(params: dict, cfg: TrainConfig, dataset: Dataset, pair: Pair, camera=None, threads: int = 1) -> RenderedView:
    """Render ``camera`` (default: the pair's target camera) from the pair's sources."""
    n_use = min(cfg.n_sources, len(pair.sources))
    images = [dataset.load_view(pair.scene, j, "rgb") for j in pair.sources[:n_use]]
    cam = dataset.cameras[pair.scene][pair.target] if camera is None else camera
    return render_view(params, cfg.render_config(), images, pair.source_cameras[:n_use], cam, threads=threads)


def evaluate_run(
    ckpt: Checkpoint | None,
    dataset: Dataset,
    split: str,
    out_dir=None,
    threads: int = 1,
    oracle: bool = False,
) -> EvalResult:
    """Aggregate metrics over every (sources, target) pair in ``split``.

    With ``oracle=True`` the ground-truth rasters stand in for predictions,
    which checks the metric harness itself.
    """
    pairs = dataset.split_pairs(split)
    registry = dataset.registry
    C = len(registry)
    cm = np.zeros((C, C), dtype=np.int64)
    depth = DepthAccumulator()
    sq_err, n_px = 0.0, 0
    views = []
    cfg = TrainConfig.from_json(ckpt.config["train"]) if ckpt is not None else None
    for pair in pairs:
        gt_lab = dataset.load_view(pair.scene, pair.target, "labels")
        gt_depth = dataset.load_view(pair.scene, pair.target, "depth")
        gt_rgb = dataset.load_view(pair.scene, pair.target, "rgb")
        if oracle:
            pred = RenderedView(gt_lab.copy(), gt_rgb.copy(), gt_depth.copy(), np.eye(C)[gt_lab])
        else:
            if ckpt is None:
                raise ValueError("evaluate_run needs a checkpoint unless oracle=True")
            pred = predict_pair(ckpt.params, cfg, dataset, pair, threads=threads)
        cm += confusion_matrix(pred.labels, gt_lab, C)
        depth.add(pred.depth, gt_depth, gt_lab, registry)
        sq_err += float(((pred.rgb - gt_rgb) ** 2).sum())
        n_px += gt_lab.size
        views.append((pair, pred))
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            stem = f"{pair.scene}_view_{pair.target}"
            io.write_label_png(out / f"{stem}.pred.labels.png", pred.labels, registry.palette)
            io.write_rgb_png(out / f"{stem}.pred.png", pred.rgb)
            io.write_pfm(out / f"{stem}.pred.pfm", pred.depth)
    if n_px == 0:
        raise DatasetError(f"split {split!r} in {dataset.root / 'manifest.json'} has no pairs to evaluate")
    metrics = {**semantic_metrics(cm, registry), **depth.result()}
    extra = {
        "split": split,
        "pairs": len(pairs),
        "rgb_mse": sq_err / (3 * n_px),
        "per_class_IoU": metrics["per_class_IoU"],
        "oracle": bool(oracle),
        "depth_residual": bool(cfg.depth_residual) if cfg is not None else None,
    }
    return EvalResult(report_json(metrics, n_px, extra), views)

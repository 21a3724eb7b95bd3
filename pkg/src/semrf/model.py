"""Parameter bookkeeping for the full model and full-frame rendering.

All learnable arrays live in one flat ``{name: array}`` dict with prefixes
``enc.``, ``coarse.`` and ``fine.``; the optimizer and checkpoint format work
on that dict in sorted-name order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .encoder import FeatureMap, encode_features, init_encoder
from .field import FieldConfig, init_field
from .geometry import Camera, generate_rays, pixel_centers
from .volren import RenderConfig, render_rays

PREFIXES = ("enc", "coarse", "fine")


def init_params(field_cfg: FieldConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x5EED])
    params = {f"enc.{k}": v for k, v in init_encoder(rng, field_cfg.feature_dim).items()}
    params.update({f"coarse.{k}": v for k, v in init_field(rng, field_cfg).items()})
    params.update({f"fine.{k}": v for k, v in init_field(rng, field_cfg).items()})
    return params


def group(params: dict, prefix: str) -> dict:
    """Sub-dict of one network with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def encode_sources(params: dict, images, cameras) -> list[FeatureMap]:
    enc = group(params, "enc")
    return [encode_features(img, enc, cam) for img, cam in zip(images, cameras)]


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


@dataclass
class RenderedView:
    labels: np.ndarray  # (H, W) int
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    probs: np.ndarray  # (H, W, |C|)


def render_view(
    params: dict,
    cfg: RenderConfig,
    source_images,
    source_cameras,
    camera: Camera,
    chunk: int = 1024,
    threads: int = 1,
) -> RenderedView:
    """Render a full frame from the fine pass with deterministic sample depths.

    Only source images and cameras are consulted; nothing about the rendered
    view other than its camera is read.
    """
    fmaps = encode_sources(params, source_images, source_cameras)
    coarse, fine = group(params, "coarse"), group(params, "fine")
    o, d = generate_rays(camera, pixel_centers(camera.width, camera.height))

    def work(bounds):
        a, b = bounds
        res = render_rays(o[a:b], d[a:b], fmaps, coarse, fine, cfg, None)
        out = res.fine if res.fine is not None else res.coarse
        return out.S_hat.value, out.C_hat.value, out.D_hat.value

    spans = chunk_bounds(len(o), chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]
    H, W = camera.height, camera.width
    probs = np.concatenate([p[0] for p in parts]).reshape(H, W, -1)
    rgb = np.concatenate([p[1] for p in parts]).reshape(H, W, 3)
    depth = np.concatenate([p[2] for p in parts]).reshape(H, W)
    return RenderedView(np.argmax(probs, axis=-1), rgb, depth, probs)

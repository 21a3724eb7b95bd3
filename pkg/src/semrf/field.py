"""Feature-conditioned implicit field: (gamma(x), d, phi_1..phi_N) -> (c, sigma, s).

Each source view runs its own branch through a shared-weight residual trunk;
branch activations are mean-pooled over views before two heads, one for the
foreground class distribution and one for colour and density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import glorot
from .geometry import positional_encoding

TRUNK_BLOCKS = 3
HEAD_BLOCKS = 2


@dataclass(frozen=True)
class FieldConfig:
    feature_dim: int = 32
    hidden: int = 128
    num_classes: int = 8  # including background
    octaves: int = 6

    @property
    def pos_dim(self) -> int:
        return 3 * (2 * self.octaves + 1)


@dataclass
class FieldOutputs:
    """Per-point outputs: sigma (P,), rgb (P, 3), sem (P, |C|-1)."""

    sigma: ad.Tensor
    rgb: ad.Tensor
    sem: ad.Tensor


def _block_names(prefix: str, i: int) -> tuple[str, str, str, str]:
    return f"{prefix}{i}_w1", f"{prefix}{i}_b1", f"{prefix}{i}_w2", f"{prefix}{i}_b2"


def init_field(rng: np.random.Generator, cfg: FieldConfig) -> dict[str, np.ndarray]:
    W = cfg.hidden
    p = {
        "in_x": glorot(rng, cfg.pos_dim, W, (cfg.pos_dim, W)),
        "in_d": glorot(rng, 3, W, (3, W)),
        "in_phi": glorot(rng, cfg.feature_dim, W, (cfg.feature_dim, W)),
        "in_b": np.zeros(W),
    }
    for prefix, n in (("trunk", TRUNK_BLOCKS), ("sem", HEAD_BLOCKS), ("rgb", HEAD_BLOCKS)):
        for i in range(n):
            w1, b1, w2, b2 = _block_names(prefix, i)
            p[w1] = glorot(rng, W, W, (W, W))
            p[b1] = np.zeros(W)
            p[w2] = glorot(rng, W, W, (W, W))
            p[b2] = np.zeros(W)
    p["sem_out_w"] = glorot(rng, W, cfg.num_classes - 1, (W, cfg.num_classes - 1))
    p["sem_out_b"] = np.zeros(cfg.num_classes - 1)
    p["rgb_out_w"] = glorot(rng, W, 4, (W, 4))
    p["rgb_out_b"] = np.zeros(4)
    return p


def _resblock(x: ad.Tensor, params: dict, prefix: str, i: int) -> ad.Tensor:
    w1, b1, w2, b2 = (params[k] for k in _block_names(prefix, i))
    h = ad.dense(x, w1, b1, relu=True)
    return ad.dense(h, w2, b2, residual=x, relu=True)


def field_eval_batch(
    points: np.ndarray,
    dirs: np.ndarray,
    features,
    params: dict,
    use_viewdir: bool = True,
    octaves: int = 6,
) -> FieldOutputs:
    """Evaluate the field at P points given one (P, K) feature batch per view."""
    points = np.asarray(points, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    features = [ad._as_tensor(f) for f in features]
    if not features:
        raise ValueError("field_eval_batch needs at least one source view")
    if points.ndim != 2 or points.shape[1] != 3 or dirs.shape != points.shape:
        raise ad.ShapeError(f"points {points.shape} and dirs {dirs.shape} must both be (P, 3)")
    P = points.shape[0]
    for j, f in enumerate(features):
        if len(f.shape) != 2 or f.shape[0] != P:
            raise ad.ShapeError(f"feature batch {j} has shape {f.shape}, expected ({P}, K)")
    V = len(features)
    if not use_viewdir:
        dirs = np.zeros_like(dirs)

    # view-independent part computed once, then broadcast across views
    base = ad.add(
        ad.matmul(ad.constant(positional_encoding(points, octaves)), params["in_x"]),
        ad.matmul(ad.constant(dirs), params["in_d"]),
    )
    phi = features[0] if V == 1 else ad.concat(features, axis=0)
    h = ad.dense(phi, params["in_phi"], params["in_b"], residual=ad.tile_rows(base, V))
    for i in range(TRUNK_BLOCKS):
        h = _resblock(h, params, "trunk", i)
    W = h.shape[1]
    pooled = ad.mean(ad.reshape(h, (V, P, W)), axis=0)

    s = pooled
    for i in range(HEAD_BLOCKS):
        s = _resblock(s, params, "sem", i)
    sem = ad.softmax(ad.dense(s, params["sem_out_w"], params["sem_out_b"]))

    c = pooled
    for i in range(HEAD_BLOCKS):
        c = _resblock(c, params, "rgb", i)
    out4 = ad.dense(c, params["rgb_out_w"], params["rgb_out_b"])
    rgb = ad.sigmoid(ad.slice_axis(out4, 0, 3, axis=1))
    sigma = ad.reshape(ad.softplus(ad.slice_axis(out4, 3, 4, axis=1)), (P,))
    return FieldOutputs(sigma=sigma, rgb=rgb, sem=sem)


def field_eval(x, d, features, params: dict, use_viewdir: bool = True, octaves: int = 6) -> FieldOutputs:
    """Single-point evaluation; ``features`` is a list of K-vectors."""
    if len(features) == 0:
        raise ValueError("field_eval needs at least one feature vector")
    feats = [ad._as_tensor(f) for f in features]
    feats = [ad.reshape(f, (1, f.shape[-1])) for f in feats]
    return field_eval_batch(
        np.asarray(x, dtype=np.float64).reshape(1, 3),
        np.asarray(d, dtype=np.float64).reshape(1, 3),
        feats,
        params,
        use_viewdir,
        octaves,
    )

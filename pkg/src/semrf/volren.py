"""Volumetric rendering along rays: sampling, quadrature and compositing.

Rays are processed in (R, S) blocks: R rays with S ascending samples each.
Sample depths are treated as constants (no gradient flows into sample
placement), so rendering is differentiable with respect to field parameters
and feature maps only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import FeatureMap, sample_features
from .field import FieldOutputs, field_eval_batch

PDF_FLOOR = 1e-5
TIE_JITTER = 1e-9


@dataclass
class RaySamples:
    """Sample depths ``ts`` (R, S), strictly ascending per row, and spacings."""

    ts: np.ndarray
    t_near: float
    t_far: float

    @property
    def deltas(self) -> np.ndarray:
        nxt = np.concatenate([self.ts[:, 1:], np.full((self.ts.shape[0], 1), self.t_far)], axis=1)
        return nxt - self.ts

    @property
    def n_rays(self) -> int:
        return self.ts.shape[0]

    @property
    def n_samples(self) -> int:
        return self.ts.shape[1]


@dataclass
class RenderedRays:
    S_hat: ad.Tensor  # (R, |C|), column 0 = background
    C_hat: ad.Tensor  # (R, 3)
    D_hat: ad.Tensor  # (R,)
    weights: ad.Tensor  # (R, S)
    residual: ad.Tensor  # (R,)


@dataclass(frozen=True)
class RenderConfig:
    t_near: float = 0.1
    t_far: float = 20.0
    n_coarse: int = 64
    n_fine: int = 128
    use_viewdir: bool = True
    depth_residual: bool = True
    octaves: int = 6

    def __post_init__(self):
        if not 0 < self.t_near < self.t_far:
            raise ValueError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("n_coarse must be >= 1 and n_fine >= 0")


def stratified_samples(t_near: float, t_far: float, n: int, rng: np.random.Generator, n_rays: int = 1) -> RaySamples:
    """One uniform draw inside each of ``n`` equal-width bins of [t_near, t_far]."""
    if not 0 < t_near < t_far:
        raise ValueError(f"need 0 < t_near < t_far, got {t_near}, {t_far}")
    if n < 1:
        raise ValueError("n must be >= 1")
    width = (t_far - t_near) / n
    lo = t_near + width * np.arange(n)
    ts = lo + width * rng.random((n_rays, n))
    return RaySamples(ts, t_near, t_far)


def quadrature_weights(sigmas, deltas) -> tuple[ad.Tensor, ad.Tensor]:
    """w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j).

    ``deltas`` is an array of spacings or a ``RaySamples``.  Works on (S,) or
    (R, S).  Returns (weights, residual transmittance).
    """
    sigmas = ad._as_tensor(sigmas)
    if isinstance(deltas, RaySamples):
        deltas = deltas.deltas
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.shape != deltas.shape:
        raise ad.ShapeError(f"sigmas {sigmas.shape} vs deltas {deltas.shape}")
    tau = ad.mul(sigmas, ad.constant(deltas))
    trans = ad.exp(ad.scale(ad.cumsum(tau, exclusive=True), -1.0))
    alpha = 1.0 - ad.exp(ad.scale(tau, -1.0))
    weights = ad.mul(trans, alpha)
    residual = ad.exp(ad.scale(ad.sum(tau, axis=-1), -1.0))
    return weights, residual


def _weighted(weights: ad.Tensor, values: ad.Tensor) -> ad.Tensor:
    """Per ray sum_i w_i v_i for weights (R, S) and values (R*S, D) -> (R, D)."""
    R, S = weights.shape
    D = values.shape[1]
    out = ad.matmul(ad.reshape(weights, (R, 1, S)), ad.reshape(values, (R, S, D)))
    return ad.reshape(out, (R, D))


def composite(
    weights: ad.Tensor,
    residual: ad.Tensor,
    outputs: FieldOutputs,
    samples: RaySamples,
    depth_residual: bool = True,
) -> RenderedRays:
    """Accumulate per-sample outputs; leftover transmittance goes to background
    class 0 and (optionally) to depth ``t_far``."""
    R, S = weights.shape
    if outputs.sem.shape[0] != R * S or samples.ts.shape != (R, S):
        raise ad.ShapeError("composite: weights, outputs and samples disagree in extent")
    fg = _weighted(weights, outputs.sem)
    S_hat = ad.concat([ad.reshape(residual, (R, 1)), fg], axis=1)
    C_hat = _weighted(weights, outputs.rgb)
    D_hat = ad.sum(ad.mul(weights, ad.constant(samples.ts)), axis=-1)
    if depth_residual:
        D_hat = ad.add(D_hat, ad.scale(residual, samples.t_far))
    return RenderedRays(S_hat, C_hat, D_hat, weights, residual)


def importance_samples(
    coarse: RaySamples, coarse_weights: np.ndarray, n_fine: int, rng: np.random.Generator | None
) -> RaySamples:
    """Inverse-transform draws from the piecewise-constant PDF over the coarse
    strata, merged with the coarse depths.

    With ``rng`` the fine draws are stratified in CDF space (one uniform per
    1/n_fine slice); with ``rng=None`` the slice midpoints are used.
    """
    if n_fine < 1:
        raise ValueError("n_fine must be >= 1")
    w = np.asarray(coarse_weights, dtype=np.float64).reshape(coarse.ts.shape) + PDF_FLOOR
    R, S = w.shape
    edges = np.linspace(coarse.t_near, coarse.t_far, S + 1)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    offs = 0.5 if rng is None else rng.random((R, n_fine))
    u = (np.arange(n_fine) + offs) / n_fine
    u = np.broadcast_to(u, (R, n_fine))
    fine = np.empty((R, n_fine))
    for r in range(R):
        k = np.searchsorted(cdf[r], u[r], side="right") - 1
        k = np.clip(k, 0, S - 1)
        mass = cdf[r, k + 1] - cdf[r, k]
        frac = (u[r] - cdf[r, k]) / mass
        fine[r] = edges[k] + np.clip(frac, 0.0, 1.0) * (edges[k + 1] - edges[k])
    merged = np.sort(np.concatenate([coarse.ts, fine], axis=1), axis=1)
    merged = _separate_ties(merged)
    return RaySamples(merged, coarse.t_near, coarse.t_far)


def _separate_ties(ts: np.ndarray) -> np.ndarray:
    ts = ts.copy()
    for i in range(1, ts.shape[1]):
        prev = ts[:, i - 1]
        bad = ts[:, i] <= prev
        ts[bad, i] = prev[bad] + TIE_JITTER
    return ts


@dataclass
class RenderResult:
    coarse: RenderedRays
    fine: RenderedRays | None
    coarse_samples: RaySamples
    fine_samples: RaySamples | None


def _pass(origins, dirs, samples: RaySamples, fmaps, params, cfg: RenderConfig) -> RenderedRays:
    R, S = samples.ts.shape
    pts = (origins[:, None, :] + dirs[:, None, :] * samples.ts[:, :, None]).reshape(R * S, 3)
    pdirs = np.repeat(dirs, S, axis=0)
    feats = [sample_features(m, pts) for m in fmaps]
    out = field_eval_batch(pts, pdirs, feats, params, cfg.use_viewdir, cfg.octaves)
    sig = ad.reshape(out.sigma, (R, S))
    w, resid = quadrature_weights(sig, samples.deltas)
    return composite(w, resid, out, samples, cfg.depth_residual)


def render_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    fmaps: list[FeatureMap],
    coarse_params: dict,
    fine_params: dict | None,
    cfg: RenderConfig,
    rng: np.random.Generator | None,
    samples: tuple[RaySamples, RaySamples | None] | None = None,
) -> RenderResult:
    """Coarse pass on stratified depths, then a fine pass on the union of coarse
    and importance-sampled depths.

    ``samples`` replays previously drawn (coarse, fine) depths; this is how
    gradient checks hold sample placement fixed while parameters move.  With
    ``rng=None`` coarse depths sit at stratum midpoints.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(origins)
    if samples is None:
        if rng is None:
            width = (cfg.t_far - cfg.t_near) / cfg.n_coarse
            ts = cfg.t_near + width * (np.arange(cfg.n_coarse) + 0.5)
            cs = RaySamples(np.tile(ts, (R, 1)), cfg.t_near, cfg.t_far)
        else:
            cs = stratified_samples(cfg.t_near, cfg.t_far, cfg.n_coarse, rng, R)
        fs = None
    else:
        cs, fs = samples
    coarse = _pass(origins, dirs, cs, fmaps, coarse_params, cfg)
    fine = None
    if fine_params is not None and cfg.n_fine > 0:
        if fs is None:
            fs = importance_samples(cs, coarse.weights.value, cfg.n_fine, rng)
        fine = _pass(origins, dirs, fs, fmaps, fine_params, cfg)
    return RenderResult(coarse, fine, cs, fs)

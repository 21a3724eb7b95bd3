"""Compact convolutional feature encoder and pixel-aligned feature sampling.

The encoder maps an (H, W, 3) image to an (H, W, K) feature map with the
fixed topology

    conv3x3 3->16 / relu -> conv3x3 16->32 stride 2 / relu
    -> conv3x3 32->32 / relu -> nearest upsample x2 -> conv1x1 32->K

Convolutions are expressed as sparse tap-selection matrices followed by a
dense matmul, so every step is an autodiff primitive and the encoder trains
jointly with the field.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse

from . import autodiff as ad
from .geometry import Camera, project_points

WIDTHS = (16, 32, 32)


@dataclass
class FeatureMap:
    """Features stored row-major as an (H*W, K) tensor."""

    values: ad.Tensor
    height: int
    width: int
    camera: Camera

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def array(self) -> np.ndarray:
        return self.values.value.reshape(self.height, self.width, -1)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_encoder(rng: np.random.Generator, feature_dim: int) -> dict[str, np.ndarray]:
    c1, c2, c3 = WIDTHS
    p = {}
    for name, cin, cout, k in (("conv1", 3, c1, 3), ("conv2", c1, c2, 3), ("conv3", c2, c3, 3), ("conv4", c3, feature_dim, 1)):
        taps = k * k
        p[f"{name}_w"] = glorot(rng, cin * taps, cout * taps, (taps * cin, cout))
        p[f"{name}_b"] = np.zeros(cout)
    return p


@lru_cache(maxsize=64)
def _conv_taps(h: int, w: int, stride: int, ksize: int):
    """Selection matrices for each kernel tap; zero rows implement padding."""
    ho, wo = -(-h // stride), -(-w // stride)
    oi, oj = np.mgrid[0:ho, 0:wo]
    oi, oj = oi.ravel(), oj.ravel()
    half = ksize // 2
    mats = []
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            ii, jj = oi * stride + dy, oj * stride + dx
            ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            rows = np.flatnonzero(ok)
            cols = ii[ok] * w + jj[ok]
            mats.append(
                scipy.sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(ho * wo, h * w))
            )
    return mats, ho, wo


@lru_cache(maxsize=64)
def _upsample(h_lo: int, w_lo: int, h: int, w: int):
    i, j = np.mgrid[0:h, 0:w]
    cols = (i // 2).ravel() * w_lo + (j // 2).ravel()
    return scipy.sparse.csr_matrix((np.ones(h * w), (np.arange(h * w), cols)), shape=(h * w, h_lo * w_lo))


def _conv(x: ad.Tensor, h: int, w: int, weight, bias, stride: int, ksize: int, relu: bool = False):
    mats, ho, wo = _conv_taps(h, w, stride, ksize)
    if ksize == 1 and stride == 1:
        cols = x
    else:
        cols = ad.concat([ad.spmm(m, x) for m in mats], axis=1)
    return ad.dense(cols, weight, bias, relu=relu), ho, wo


def encode_features(image: np.ndarray, params: dict, camera: Camera) -> FeatureMap:
    """``params`` values may be taped tensors (training) or plain arrays."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    x = ad.constant(image.reshape(h * w, 3))
    x, h1, w1 = _conv(x, h, w, params["conv1_w"], params["conv1_b"], 1, 3, relu=True)
    x, h2, w2 = _conv(x, h1, w1, params["conv2_w"], params["conv2_b"], 2, 3, relu=True)
    x, h3, w3 = _conv(x, h2, w2, params["conv3_w"], params["conv3_b"], 1, 3, relu=True)
    x = ad.spmm(_upsample(h3, w3, h, w), x)
    x, _, _ = _conv(x, h, w, params["conv4_w"], params["conv4_b"], 1, 1)
    return FeatureMap(x, h, w, camera)


def bilinear_matrix(fmap_h: int, fmap_w: int, camera: Camera, points: np.ndarray) -> scipy.sparse.csr_matrix:
    """Sparse (P, H*W) matrix of bilinear taps for the projections of ``points``.

    Rows are empty for points behind the camera or projecting outside the
    image.  Inside the image, taps beyond the outermost pixel centres clamp
    to the border pixel, so every non-empty row sums to one.
    """
    uvz = project_points(camera, np.asarray(points, dtype=np.float64).reshape(-1, 3))
    u, v, z = uvz[:, 0], uvz[:, 1], uvz[:, 2]
    with np.errstate(invalid="ignore"):
        ok = (z > 0) & (u >= 0) & (u <= fmap_w) & (v >= 0) & (v <= fmap_h)
    rows = np.flatnonzero(ok)
    fu = u[ok] - 0.5
    fv = v[ok] - 0.5
    j0 = np.floor(fu)
    i0 = np.floor(fv)
    a = fu - j0
    b = fv - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)
    r_all, c_all, w_all = [], [], []
    for di, dj, wt in ((0, 0, (1 - a) * (1 - b)), (0, 1, a * (1 - b)), (1, 0, (1 - a) * b), (1, 1, a * b)):
        ii = np.clip(i0 + di, 0, fmap_h - 1)
        jj = np.clip(j0 + dj, 0, fmap_w - 1)
        r_all.append(rows)
        c_all.append(ii * fmap_w + jj)
        w_all.append(wt)
    P = len(uvz)
    # duplicate (row, col) entries from border clamping are summed by csr
    return scipy.sparse.csr_matrix(
        (np.concatenate(w_all), (np.concatenate(r_all), np.concatenate(c_all))),
        shape=(P, fmap_h * fmap_w),
    )


def sample_features(fmap: FeatureMap, points: np.ndarray) -> ad.Tensor:
    """(P, K) pixel-aligned features for world points."""
    A = bilinear_matrix(fmap.height, fmap.width, fmap.camera, points)
    return ad.spmm(A, fmap.values)


def sample_feature(fmap: FeatureMap, x) -> np.ndarray:
    """K-vector feature at a single world point (zeros when not visible)."""
    return sample_features(fmap, np.asarray(x, dtype=np.float64).reshape(1, 3)).value[0]

"""Losses, Adam, the chunked training loop, checkpoints and the loss trace.

One step picks a (sources, target) pair, encodes the sources on an encoder
tape, and renders rays from the target and every source view.  Rays are
split into fixed-size chunks; each chunk gets its own tape in which the
feature maps enter as leaves.  Chunk gradients are reduced in chunk order and
the summed feature-map adjoints are pushed back through the encoder tape, so
results do not depend on how many worker threads ran the chunks.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import io
from .dataset import Dataset, DatasetError, Pair
from .encoder import FeatureMap
from .field import FieldConfig
from .geometry import generate_rays, pixel_centers
from .model import chunk_bounds, encode_sources, group, init_params
from .volren import RenderConfig, RenderedRays, render_rays

PROB_FLOOR = 1e-8
TRACE_COLUMNS = ("step", "loss_total", "loss_p_t", "loss_p_s", "loss_s_t", "loss_s_s")
MAGIC = b"NSRF"
FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(OSError):
    """Unreadable or malformed checkpoint file."""


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    lambda_sem: float = 0.04
    rays_per_image: int = 1024
    n_coarse: int = 64
    n_fine: int = 128
    t_near: float = 0.1
    t_far: float = 20.0
    n_sources: int = 4
    steps: int = 2000
    seed: int = 0
    photometric_loss: bool = True
    semantic_loss: bool = True
    source_view_loss: bool = True
    use_viewdir: bool = True
    depth_residual: bool = True
    feature_dim: int = 32
    hidden: int = 128
    octaves: int = 6
    chunk: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train config: lr must be > 0, got {self.lr}")
        if not self.lambda_sem >= 0:
            raise ConfigError(f"train config: lambda_sem must be >= 0, got {self.lambda_sem}")
        if not (self.photometric_loss or self.semantic_loss):
            raise ConfigError("train config: at least one of photometric_loss and semantic_loss must be enabled")
        for name in ("rays_per_image", "n_coarse", "n_sources", "feature_dim", "hidden", "chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train config: {name} must be >= 1")
        if self.n_fine < 0 or self.steps < 0 or self.octaves < 0 or self.checkpoint_every < 0:
            raise ConfigError("train config: n_fine, steps, octaves and checkpoint_every must be >= 0")
        if not 0 < self.t_near < self.t_far:
            raise ConfigError("train config: need 0 < t_near < t_far")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"train config: unknown keys {unknown}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"train config: {exc}") from exc

    def to_json(self) -> dict:
        return asdict(self)

    def field_config(self, num_classes: int) -> FieldConfig:
        return FieldConfig(self.feature_dim, self.hidden, num_classes, self.octaves)

    def render_config(self) -> RenderConfig:
        return RenderConfig(
            self.t_near, self.t_far, self.n_coarse, self.n_fine, self.use_viewdir, self.depth_residual, self.octaves
        )


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def semantic_loss(S_hat: ad.Tensor, labels) -> ad.Tensor:
    """Mean over rays of -log(clamp(S_hat[true class], 1e-8, 1))."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= S_hat.shape[1]):
        raise ValueError(f"class ids must lie in [0, {S_hat.shape[1]})")
    p = ad.clamp(ad.pick(S_hat, labels), PROB_FLOOR, 1.0)
    return ad.scale(ad.mean(ad.log(p)), -1.0)


def photometric_loss(C_hat: ad.Tensor, rgb) -> ad.Tensor:
    """Mean over rays of the squared L2 colour error."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if C_hat.shape != rgb.shape:
        raise ad.ShapeError(f"photometric_loss: {C_hat.shape} vs {rgb.shape}")
    err = ad.sub(C_hat, ad.constant(rgb))
    return ad.scale(ad.sum(ad.mul(err, err)), 1.0 / rgb.shape[0])


@dataclass(frozen=True)
class LossToggles:
    photometric_loss: bool = True
    semantic_loss: bool = True
    source_view_loss: bool = True


@dataclass
class RayGroup:
    """Rendered passes (coarse, fine) for a set of rays plus their ground truth.

    ``weight`` rescales the group's per-ray means; a chunk holding n of a
    group's N rays uses n/N so that chunk contributions add up to the mean.
    """

    passes: list[RenderedRays]
    rgb: np.ndarray
    labels: np.ndarray
    weight: float = 1.0


TERMS = ("p_t", "p_s", "s_t", "s_s")


def total_loss(
    target: RayGroup | None,
    source: RayGroup | None,
    toggles: LossToggles,
    lambda_sem: float,
) -> tuple[ad.Tensor, dict[str, float]]:
    """L = P_t + P_s + lambda (S_t + S_s), each term summed over render passes.

    Disabled terms are omitted and reported as 0 in the breakdown.
    """
    if not (toggles.photometric_loss or toggles.semantic_loss):
        raise ConfigError("total_loss: every loss term is disabled")
    terms: dict[str, ad.Tensor] = {}
    for tag, grp, on in (("t", target, True), ("s", source, toggles.source_view_loss)):
        if grp is None or not on:
            continue
        if toggles.photometric_loss:
            terms["p_" + tag] = _over_passes(grp, lambda r: photometric_loss(r.C_hat, grp.rgb))
        if toggles.semantic_loss:
            terms["s_" + tag] = _over_passes(grp, lambda r: semantic_loss(r.S_hat, grp.labels))
    if not terms:
        raise ConfigError("total_loss: no rays for any enabled term")
    total = None
    for name in TERMS:
        if name not in terms:
            continue
        t = terms[name] if name.startswith("p") else ad.scale(terms[name], lambda_sem)
        total = t if total is None else ad.add(total, t)
    breakdown = {name: float(terms[name].value) if name in terms else 0.0 for name in TERMS}
    return total, breakdown


def _over_passes(grp: RayGroup, fn: Callable[[RenderedRays], ad.Tensor]) -> ad.Tensor:
    acc = None
    for r in grp.passes:
        v = fn(r)
        acc = v if acc is None else ad.add(acc, v)
    return ad.scale(acc, grp.weight) if grp.weight != 1.0 else acc


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(
    params: dict,
    grads: dict,
    moments: AdamMoments,
    lr: float,
    step: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamMoments]:
    """Bias-corrected Adam.  Returns new dicts; inputs are not modified."""
    if step < 1:
        raise ValueError("adam_step: step counts from 1")
    for name in sorted(params):
        g = grads.get(name)
        if g is None or np.shape(g) != np.shape(params[name]):
            raise ad.ShapeError(f"adam_step: gradient for {name!r} missing or misshapen")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name in sorted(params):
        g = np.asarray(grads[name], dtype=np.float64)
        m = beta1 * moments.m[name] + (1.0 - beta1) * g
        v = beta2 * moments.v[name] + (1.0 - beta2) * g * g
        new_p[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamMoments(new_m, new_v)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: AdamMoments
    step: int
    config: dict  # echo: {"train": ..., "num_classes": ..., ...}


def _blob(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps({"step": ckpt.step, "config": ckpt.config}, sort_keys=True).encode("utf-8")
    blobs = []
    for name in sorted(ckpt.params):
        blobs.append(_blob("param/" + name, ckpt.params[name]))
        blobs.append(_blob("adam_m/" + name, ckpt.moments.m[name]))
        blobs.append(_blob("adam_v/" + name, ckpt.moments.v[name]))
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta)) + meta
    payload += struct.pack("<I", len(blobs)) + b"".join(blobs)
    io.atomic_write_bytes(path, payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        return _parse_checkpoint(path, Path(path).read_bytes())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(path, data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off : off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated blob {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        kind, _, pname = name.partition("/")
        if kind not in tables:
            raise CheckpointError(f"{path}: unknown blob kind {kind!r}")
        tables[kind][pname] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last blob")
    p = tables["param"]
    if set(p) != set(tables["adam_m"]) or set(p) != set(tables["adam_v"]):
        raise CheckpointError(f"{path}: parameter and moment names disagree")
    for k in p:
        if tables["adam_m"][k].shape != p[k].shape or tables["adam_v"][k].shape != p[k].shape:
            raise CheckpointError(f"{path}: moment shape mismatch for {k}")
    return Checkpoint(p, AdamMoments(tables["adam_m"], tables["adam_v"]), int(meta["step"]), meta["config"])


# ----------------------------------------------------------------------
# one optimization step
# ----------------------------------------------------------------------


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    rgb: np.ndarray
    labels: np.ndarray
    n_target: int  # rays [0, n_target) come from the target view, the rest from sources


def _pick_pixels(rng: np.random.Generator, w: int, h: int, n: int) -> np.ndarray:
    return rng.choice(w * h, size=min(n, w * h), replace=False)


def build_batch(dataset: Dataset, pair: Pair, cfg: TrainConfig, rng: np.random.Generator) -> RayBatch:
    views = [(dataset.cameras[pair.scene][pair.target], pair.target)]
    if cfg.source_view_loss:
        # only the sources the model is conditioned on contribute rays
        n_use = min(cfg.n_sources, len(pair.sources))
        views += [(cam, j) for cam, j in zip(pair.source_cameras[:n_use], pair.sources[:n_use])]
    o_all, d_all, c_all, l_all = [], [], [], []
    n_target = 0
    for i, (cam, k) in enumerate(views):
        idx = _pick_pixels(rng, cam.width, cam.height, cfg.rays_per_image)
        o, d = generate_rays(cam, pixel_centers(cam.width, cam.height)[idx])
        rgb = dataset.load_view(pair.scene, k, "rgb").reshape(-1, 3)[idx]
        lab = dataset.load_view(pair.scene, k, "labels").reshape(-1)[idx]
        o_all.append(o)
        d_all.append(d)
        c_all.append(rgb)
        l_all.append(lab)
        if i == 0:
            n_target = len(idx)
    return RayBatch(
        np.concatenate(o_all), np.concatenate(d_all), np.concatenate(c_all), np.concatenate(l_all), n_target
    )


@dataclass
class StepResult:
    loss: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]


def _chunk_pass(params, fmap_values, fmaps, batch: RayBatch, a: int, b: int, cfg: TrainConfig, rng):
    tape = ad.Tape()
    leaves = [tape.leaf(v, f"fmap{j}") for j, v in enumerate(fmap_values)]
    maps = [FeatureMap(leaf, m.height, m.width, m.camera) for leaf, m in zip(leaves, fmaps)]
    taped = {k: tape.param(v, k) for k, v in params.items() if not k.startswith("enc.")}
    coarse, fine = group(taped, "coarse"), group(taped, "fine")
    res = render_rays(batch.origins[a:b], batch.dirs[a:b], maps, coarse, fine, cfg.render_config(), rng)
    passes = [res.coarse] + ([res.fine] if res.fine is not None else [])

    n_t = batch.n_target
    n_s = len(batch.origins) - n_t

    def make_group(lo, hi, total):
        if hi <= lo:
            return None
        sl = [
            RenderedRays(
                ad.slice_axis(p.S_hat, lo - a, hi - a, 0),
                ad.slice_axis(p.C_hat, lo - a, hi - a, 0),
                ad.slice_axis(p.D_hat, lo - a, hi - a, 0),
                p.weights,
                p.residual,
            )
            for p in passes
        ]
        return RayGroup(sl, batch.rgb[lo:hi], batch.labels[lo:hi], (hi - lo) / total)

    tgt = make_group(a, min(b, n_t), n_t)
    src = make_group(max(a, n_t), b, n_s) if n_s else None
    toggles = LossToggles(cfg.photometric_loss, cfg.semantic_loss, cfg.source_view_loss)
    try:
        loss, terms = total_loss(tgt, src, toggles, cfg.lambda_sem)
    except ConfigError:
        # chunk holds only rays whose terms are disabled
        return None
    g = ad.backprop(tape, loss)
    field_grads = {tape.params[n]: g[n] for n in g if not tape.params[n].startswith("fmap")}
    fmap_grads = [g[leaf.node] for leaf in leaves]
    return float(loss.value), terms, field_grads, fmap_grads


def compute_step(
    params: dict, dataset: Dataset, pair: Pair, batch: RayBatch, cfg: TrainConfig, step: int, threads: int = 1
) -> StepResult:
    enc_tape = ad.Tape()
    enc_taped = {k: enc_tape.param(v, k) for k, v in params.items() if k.startswith("enc.")}
    n_use = min(cfg.n_sources, len(pair.sources))
    images = [dataset.load_view(pair.scene, j, "rgb") for j in pair.sources[:n_use]]
    fmaps = encode_sources(enc_taped, images, pair.source_cameras[:n_use])
    fmap_values = [m.values.value for m in fmaps]

    spans = chunk_bounds(len(batch.origins), cfg.chunk)

    def work(ci):
        a, b = spans[ci]
        rng = np.random.default_rng([cfg.seed, step, 1, ci])
        return _chunk_pass(params, fmap_values, fmaps, batch, a, b, cfg, rng)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(work, range(len(spans))))
    else:
        outs = [work(ci) for ci in range(len(spans))]

    loss = 0.0
    terms = dict.fromkeys(TERMS, 0.0)
    grads: dict[str, np.ndarray] = {}
    fmap_acc = [np.zeros_like(v) for v in fmap_values]
    for out in outs:
        if out is None:
            continue
        c_loss, c_terms, c_grads, c_fmap = out
        loss += c_loss
        for k in TERMS:
            terms[k] += c_terms[k]
        for k, v in c_grads.items():
            grads[k] = v if k not in grads else grads[k] + v
        for acc, gv in zip(fmap_acc, c_fmap):
            acc += gv
    raw = ad.vjp(enc_tape, {m.values.node: g for m, g in zip(fmaps, fmap_acc)})
    for node, name in enc_tape.params.items():
        g = raw.get(node)
        grads[name] = g if g is not None else np.zeros(enc_tape.shapes[node])
    for k, v in params.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return StepResult(loss, terms, grads)


# ----------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------


def _trace_row(step: int, res: StepResult) -> list[str]:
    vals = [res.loss] + [res.terms[k] for k in TERMS]
    return [str(step)] + [repr(float(v)) for v in vals]


def _rewrite_trace(path: Path, upto: int) -> None:
    """Keep the header and rows with step <= ``upto`` (used when resuming)."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= upto] if rows else []
    text = "".join(",".join(r) + "\n" for r in keep)
    io.atomic_write_bytes(path, text.encode())


def training_pairs(dataset: Dataset) -> list[Pair]:
    pairs = dataset.split_pairs("train")
    if not pairs:
        raise DatasetError(f"{dataset.root}: training split has no (sources, target) pairs")
    return pairs


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace_path: Path
    checkpoint_path: Path


def config_echo(cfg: TrainConfig, dataset: Dataset) -> dict:
    return {
        "train": cfg.to_json(),
        "num_classes": len(dataset.registry),
        "classes": dataset.registry.to_json(),
        "dataset_seed": dataset.manifest.get("seed"),
    }


def train_loop(
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir,
    threads: int = 1,
    resume: Checkpoint | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimization steps; writes checkpoint.nsrf and trace.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = training_pairs(dataset)
    num_classes = len(dataset.registry)
    for p in pairs:
        for k in (p.target,) + p.sources:
            path = dataset.view_path(p.scene, k, "rgb")
            if not path.is_file():
                raise DatasetError(f"missing view raster {path}")

    echo = config_echo(cfg, dataset)
    if resume is None:
        params = init_params(cfg.field_config(num_classes), cfg.seed)
        moments = AdamMoments.zeros_like(params)
        start = 0
    else:
        if resume.config.get("num_classes") != num_classes:
            raise ConfigError("checkpoint class count does not match the dataset")
        params, moments, start = resume.params, resume.moments, resume.step

    trace_path = out / "trace.csv"
    ckpt_path = out / "checkpoint.nsrf"
    if resume is None or not trace_path.exists():
        io.atomic_write_bytes(trace_path, (",".join(TRACE_COLUMNS) + "\n").encode())
    else:
        _rewrite_trace(trace_path, start)

    for step in range(start + 1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        pair = pairs[int(rng.integers(len(pairs)))]
        batch = build_batch(dataset, pair, cfg, rng)
        res = compute_step(params, dataset, pair, batch, cfg, step, threads)
        if not math.isfinite(res.loss):
            raise NonFiniteError(f"non-finite loss at step {step}")
        params, moments = adam_step(params, res.grads, moments, cfg.lr, step)
        with open(trace_path, "a") as fh:
            fh.write(",".join(_trace_row(step, res)) + "\n")
        if log is not None:
            log(f"step {step}/{cfg.steps} loss {res.loss:.6f}")
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
            save_checkpoint(ckpt_path, Checkpoint(params, moments, step, echo))
    final = Checkpoint(params, moments, max(start, cfg.steps), echo)
    save_checkpoint(ckpt_path, final)
    return TrainResult(final, trace_path, ckpt_path)


def read_trace(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)

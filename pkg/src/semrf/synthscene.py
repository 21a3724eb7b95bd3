"""Procedural labelled scenes, an analytic ray-cast oracle, and dataset emission."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .geometry import (
    Camera,
    frustum_overlap,
    generate_rays,
    look_at,
    perturb_camera,
    pinhole,
    pixel_centers,
    rotation_angle_deg,
)

BACKGROUND = 0

DEFAULT_CLASSES = [
    ("background", False, (0, 0, 0)),
    ("wall", True, (174, 199, 232)),
    ("floor", True, (152, 223, 138)),
    ("ceiling", True, (255, 187, 120)),
    ("sphere-A", False, (214, 39, 40)),
    ("sphere-B", False, (148, 103, 189)),
    ("box-A", False, (31, 119, 180)),
    ("box-B", False, (255, 127, 14)),
]
MAX_CLASSES = 37

# pair admissibility thresholds
MIN_OVERLAP = 0.10
MIN_TRANSLATION = 0.5
MIN_ROTATION_DEG = 30.0


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ClassInfo:
    name: str
    stuff: bool
    color: tuple[int, int, int]


@dataclass
class ClassRegistry:
    classes: list[ClassInfo]

    def __post_init__(self):
        if not self.classes or self.classes[0].name != "background":
            raise SceneSpecError("class id 0 must be the background class")
        if len(self.classes) > MAX_CLASSES:
            raise SceneSpecError(f"at most {MAX_CLASSES} classes supported")

    def __len__(self):
        return len(self.classes)

    @property
    def stuff_mask(self) -> np.ndarray:
        return np.array([c.stuff for c in self.classes], dtype=bool)

    @property
    def thing_mask(self) -> np.ndarray:
        m = ~self.stuff_mask
        m[BACKGROUND] = False
        return m

    @property
    def palette(self) -> list[tuple[int, int, int]]:
        return [c.color for c in self.classes]

    def to_json(self) -> list[dict]:
        return [{"name": c.name, "stuff": c.stuff, "color": list(c.color)} for c in self.classes]

    @classmethod
    def from_json(cls, items) -> "ClassRegistry":
        return cls([ClassInfo(d["name"], bool(d["stuff"]), tuple(d["color"])) for d in items])

    @classmethod
    def default(cls, num_classes: int = len(DEFAULT_CLASSES)) -> "ClassRegistry":
        if not len(DEFAULT_CLASSES) <= num_classes <= MAX_CLASSES:
            raise SceneSpecError(f"num_classes must be in [{len(DEFAULT_CLASSES)}, {MAX_CLASSES}]")
        items = [ClassInfo(n, s, c) for n, s, c in DEFAULT_CLASSES]
        rng = np.random.default_rng(1234)
        for k in range(len(DEFAULT_CLASSES), num_classes):
            color = tuple(int(x) for x in rng.integers(30, 256, size=3))
            items.append(ClassInfo(f"thing-{k}", False, color))
        return cls(items)


@dataclass(frozen=True)
class Primitive:
    """Sphere, axis-aligned box, or infinite axis-aligned slab."""

    kind: str
    lo: np.ndarray  # box/slab min corner (slab: -inf off-axis); sphere: centre
    hi: np.ndarray  # box/slab max corner; sphere: (radius, 0, 0)
    albedo: np.ndarray
    class_id: int
    stuff: bool

    @property
    def radius(self) -> float:
        return float(self.hi[0])

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest positive hit distance (inf on miss) and unit outward normal."""
        if self.kind == "sphere":
            return _hit_sphere(origins, dirs, self.lo, self.radius)
        return _hit_box(origins, dirs, self.lo, self.hi)

    def to_json(self) -> dict:
        base = {"albedo": self.albedo.tolist(), "class_id": int(self.class_id)}
        if self.kind == "sphere":
            return {"kind": "sphere", "center": self.lo.tolist(), "radius": self.radius, **base}
        if self.kind == "box":
            return {"kind": "box", "min": self.lo.tolist(), "max": self.hi.tolist(), **base}
        axis = int(np.flatnonzero(np.isfinite(self.lo))[0])
        return {"kind": "slab", "axis": axis, "lo": float(self.lo[axis]), "hi": float(self.hi[axis]), **base}


def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("ij,ij->i", d, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    near = np.where(t0 > 0, t0, t1)
    hit = ok & (near > 0)
    t[hit] = near[hit]
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = (p - center) / radius
    return t, n


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # nan arises only for 0 * inf (origin on an infinite slab boundary)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    enter_axis = tmin.argmax(axis=1)
    exit_axis = tmax.argmin(axis=1)
    hit = (t_enter <= t_exit) & (t_exit > 0)
    inside = t_enter <= 0
    t = np.where(inside, t_exit, t_enter)
    t = np.where(hit, t, np.inf)
    axis = np.where(inside, exit_axis, enter_axis)
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    sign = np.where(inside, np.sign(d[rows, axis]), -np.sign(d[rows, axis]))
    n[rows, axis] = sign
    return t, n


@dataclass
class Scene:
    primitives: list[Primitive]
    registry: ClassRegistry
    room_min: np.ndarray = field(default_factory=lambda: np.array([-4.0, 0.0, -4.0]))
    room_max: np.ndarray = field(default_factory=lambda: np.array([4.0, 3.0, 4.0]))

    def to_json(self) -> dict:
        return {
            "room": {"min": self.room_min.tolist(), "max": self.room_max.tolist()},
            "classes": self.registry.to_json(),
            "primitives": [p.to_json() for p in self.primitives],
        }


@dataclass
class GroundTruthView:
    camera: Camera
    rgb: np.ndarray
    labels: np.ndarray
    depth: np.ndarray


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_ALBEDO = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "room": {
            "type": "object",
            "additionalProperties": False,
            "required": ["min", "max"],
            "properties": {"min": _VEC3, "max": _VEC3},
        },
        "num_classes": {"type": "integer", "minimum": len(DEFAULT_CLASSES), "maximum": MAX_CLASSES},
        "primitives": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "class_id"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": ["sphere", "box", "slab"]},
                    "center": _VEC3,
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "min": _VEC3,
                    "max": _VEC3,
                    "axis": {"enum": [0, 1, 2]},
                    "lo": {"type": "number"},
                    "hi": {"type": "number"},
                    "albedo": _ALBEDO,
                    "class_id": {"type": "integer", "minimum": 1},
                },
            },
        },
        "random": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spheres": {"type": "integer", "minimum": 0},
                "boxes": {"type": "integer", "minimum": 0},
                "radius": _RANGE,
                "box_size": _RANGE,
                "spread": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
    },
}


def _validate(spec: dict, schema: dict, what: str) -> None:
    try:
        jsonschema.validate(spec, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SceneSpecError(f"{what}: invalid field {path}: {exc.message}") from None


def _primitive_from_json(d: dict, registry: ClassRegistry, where: str) -> Primitive:
    cid = d["class_id"]
    if cid >= len(registry):
        raise SceneSpecError(f"{where}: class id {cid} not in registry of {len(registry)} classes")
    albedo = np.array(d.get("albedo", [0.7, 0.7, 0.7]), dtype=np.float64)
    stuff = registry.classes[cid].stuff
    kind = d["kind"]
    try:
        if kind == "sphere":
            lo = np.array(d["center"], dtype=np.float64)
            hi = np.array([d["radius"], 0.0, 0.0])
        elif kind == "box":
            lo = np.array(d["min"], dtype=np.float64)
            hi = np.array(d["max"], dtype=np.float64)
            if np.any(hi <= lo):
                raise SceneSpecError(f"{where}: box extents must be positive")
        else:
            axis = d["axis"]
            if not d["hi"] > d["lo"]:
                raise SceneSpecError(f"{where}: slab thickness must be positive")
            lo = np.full(3, -np.inf)
            hi = np.full(3, np.inf)
            lo[axis], hi[axis] = d["lo"], d["hi"]
    except KeyError as exc:
        raise SceneSpecError(f"{where}: {kind} needs field {exc.args[0]}") from None
    return Primitive(kind, lo, hi, albedo, cid, stuff)


def _inside_room(p: Primitive, rmin, rmax) -> bool:
    if p.kind == "slab":
        return True
    if p.kind == "sphere":
        return bool(np.all(p.lo - p.radius >= rmin - 1e-12) and np.all(p.lo + p.radius <= rmax + 1e-12))
    return bool(np.all(p.lo >= rmin - 1e-12) and np.all(p.hi <= rmax + 1e-12))


def build_scene(spec: dict, rng: np.random.Generator) -> Scene:
    """Scene from a JSON spec: explicit primitives plus randomly placed ones."""
    _validate(spec, SCENE_SCHEMA, "scene spec")
    registry = ClassRegistry.default(spec.get("num_classes", len(DEFAULT_CLASSES)))
    room = spec.get("room", {"min": [-4.0, 0.0, -4.0], "max": [4.0, 3.0, 4.0]})
    rmin = np.array(room["min"], dtype=np.float64)
    rmax = np.array(room["max"], dtype=np.float64)
    if np.any(rmax <= rmin):
        raise SceneSpecError("scene spec: invalid field room: max must exceed min")
    prims = []
    for i, d in enumerate(spec.get("primitives", [])):
        p = _primitive_from_json(d, registry, f"primitives/{i}")
        if not _inside_room(p, rmin, rmax):
            raise SceneSpecError(f"primitives/{i}: lies outside the room bounds")
        prims.append(p)

    rnd = spec.get("random", {})
    r_lo, r_hi = rnd.get("radius", [0.3, 0.7])
    s_lo, s_hi = rnd.get("box_size", [0.4, 1.0])
    # random objects go in the central fraction ``spread`` of the floor area
    mid = 0.5 * (rmin + rmax)
    half = 0.5 * (rmax - rmin) * rnd.get("spread", 0.5)
    fmin, fmax = mid - half, mid + half
    thing_ids = [k for k in range(1, len(registry)) if not registry.classes[k].stuff]
    sphere_ids = [k for k in thing_ids if registry.classes[k].name.startswith("sphere")] or thing_ids
    box_ids = [k for k in thing_ids if registry.classes[k].name.startswith("box")] or thing_ids
    for _ in range(rnd.get("spheres", 0)):
        r = rng.uniform(r_lo, r_hi)
        c = np.array(
            [rng.uniform(fmin[0] + r, fmax[0] - r), rmin[1] + r, rng.uniform(fmin[2] + r, fmax[2] - r)]
        )
        prims.append(
            Primitive("sphere", c, np.array([r, 0.0, 0.0]), rng.uniform(0.2, 1.0, 3), int(rng.choice(sphere_ids)), False)
        )
    for _ in range(rnd.get("boxes", 0)):
        size = rng.uniform(s_lo, s_hi, 3)
        lo = np.array(
            [rng.uniform(fmin[0], fmax[0] - size[0]), rmin[1], rng.uniform(fmin[2], fmax[2] - size[2])]
        )
        prims.append(Primitive("box", lo, lo + size, rng.uniform(0.2, 1.0, 3), int(rng.choice(box_ids)), False))
    return Scene(prims, registry, rmin, rmax)


def ray_cast(scene: Scene, origins: np.ndarray, dirs: np.ndarray, t_far: float):
    """Per-ray (t, class id, rgb) of the nearest hit with 0 < t < t_far."""
    n = len(origins)
    best = np.full(n, np.inf)
    labels = np.zeros(n, dtype=np.int64)
    rgb = np.zeros((n, 3))
    for p in scene.primitives:
        t, normal = p.intersect(origins, dirs)
        closer = (t < best) & (t < t_far)
        if not closer.any():
            continue
        best[closer] = t[closer]
        labels[closer] = p.class_id
        shade = np.maximum(0.2, np.abs(np.einsum("ij,ij->i", normal[closer], dirs[closer])))
        rgb[closer] = p.albedo[None, :] * shade[:, None]
    depth = np.where(np.isfinite(best), best, t_far)
    return depth, labels, rgb


def oracle_render(scene: Scene, camera: Camera, t_far: float = 20.0) -> GroundTruthView:
    H, W = camera.height, camera.width
    o, d = generate_rays(camera, pixel_centers(W, H))
    depth, labels, rgb = ray_cast(scene, o, d, t_far)
    return GroundTruthView(camera, rgb.reshape(H, W, 3), labels.reshape(H, W), depth.reshape(H, W))


# ----------------------------------------------------------------------
# pair selection
# ----------------------------------------------------------------------


def _camera_of(v) -> Camera:
    return v.camera if isinstance(v, GroundTruthView) else v


def pair_admissible(target: Camera, source: Camera, near: float, far: float, grid: int = 16) -> bool:
    if np.linalg.norm(target.center - source.center) <= MIN_TRANSLATION:
        return False
    if rotation_angle_deg(target.rotation, source.rotation) < MIN_ROTATION_DEG:
        return False
    return frustum_overlap(target, source, near, far, grid) >= MIN_OVERLAP


def select_pairs(
    views,
    n_sources: int,
    near: float,
    far: float,
    grid: int = 16,
    min_sources: int | None = None,
    targets=None,
) -> tuple[list[tuple[list[int], int]], int]:
    """Group each target with up to ``n_sources`` admissible sources.

    Sources are ranked by overlap (largest first, ties by index).  Targets with
    fewer than ``min_sources`` (default 1) admissible sources are dropped.
    Returns the pairs and the number of dropped targets.
    """
    if n_sources < 1:
        raise ValueError("n_sources must be >= 1")
    need = 1 if min_sources is None else min_sources
    cams = [_camera_of(v) for v in views]
    pairs = []
    dropped = 0
    for k in range(len(cams)) if targets is None else targets:
        scored = []
        for j, src in enumerate(cams):
            if j == k:
                continue
            tgt = cams[k]
            if np.linalg.norm(tgt.center - src.center) <= MIN_TRANSLATION:
                continue
            if rotation_angle_deg(tgt.rotation, src.rotation) < MIN_ROTATION_DEG:
                continue
            ov = frustum_overlap(tgt, src, near, far, grid)
            if ov >= MIN_OVERLAP:
                scored.append((-ov, j))
        scored.sort()
        chosen = [j for _, j in scored[:n_sources]]
        if len(chosen) < need:
            dropped += 1
            continue
        pairs.append((chosen, k))
    return pairs, dropped


# ----------------------------------------------------------------------
# dataset emission
# ----------------------------------------------------------------------

DATASET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scenes": {"type": "integer", "minimum": 1},
        "val_scenes": {"type": "integer", "minimum": 0},
        "views_per_scene": {"type": "integer", "minimum": 2},
        "width": {"type": "integer", "minimum": 8},
        "height": {"type": "integer", "minimum": 8},
        "fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
        "n_sources": {"type": "integer", "minimum": 1},
        "min_sources": {"type": "integer", "minimum": 1},
        "near": {"type": "number", "exclusiveMinimum": 0},
        "far": {"type": "number", "exclusiveMinimum": 0},
        "overlap_grid": {"type": "integer", "minimum": 2},
        "noise_deg": {"type": "number", "minimum": 0},
        "scene": {"type": "object"},
        "cameras": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["eye", "target"],
                "properties": {"eye": _VEC3, "target": _VEC3},
            },
        },
        "rig": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": _RANGE,
                "height": _RANGE,
                "look_at": _VEC3,
                "look_jitter": {"type": "number", "minimum": 0},
                "arc_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 360},
            },
        },
        "targets": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}

DATASET_DEFAULTS = {
    "scenes": 4,
    "val_scenes": 1,
    "views_per_scene": 12,
    "width": 96,
    "height": 72,
    "fov_deg": 60.0,
    "n_sources": 4,
    "near": 0.1,
    "far": 20.0,
    "overlap_grid": 16,
    "noise_deg": 0.0,
    "scene": {
        "room": {"min": [-4.0, 0.0, -4.0], "max": [4.0, 3.0, 4.0]},
        "primitives": [
            {"kind": "slab", "axis": 1, "lo": -1.0, "hi": 0.0, "class_id": 2, "albedo": [0.55, 0.45, 0.35]},
            {"kind": "slab", "axis": 2, "lo": 4.0, "hi": 5.0, "class_id": 1, "albedo": [0.8, 0.8, 0.75]},
            {"kind": "slab", "axis": 0, "lo": -5.0, "hi": -4.0, "class_id": 1, "albedo": [0.7, 0.75, 0.8]},
        ],
        "random": {"spheres": 2, "boxes": 2},
    },
    "rig": {"radius": [2.5, 3.5], "height": [1.0, 2.0], "look_at": [0.0, 0.6, 0.0], "look_jitter": 0.5, "arc_deg": 360.0},
}


def dataset_config(config: dict) -> dict:
    _validate(config, DATASET_SCHEMA, "dataset config")
    cfg = {**DATASET_DEFAULTS, **config}
    if cfg["val_scenes"] >= cfg["scenes"] and cfg["scenes"] > 1:
        raise SceneSpecError("dataset config: invalid field val_scenes: must leave a training scene")
    if not cfg["near"] < cfg["far"]:
        raise SceneSpecError("dataset config: invalid field near: must be < far")
    if "cameras" in cfg and len(cfg["cameras"]) != cfg["views_per_scene"]:
        cfg["views_per_scene"] = len(cfg["cameras"])
    return cfg


def _rig_cameras(cfg: dict, rng: np.random.Generator) -> list[Camera]:
    W, H, fov = cfg["width"], cfg["height"], cfg["fov_deg"]
    cams = []
    if "cameras" in cfg:
        for c in cfg["cameras"]:
            R, t = look_at(c["eye"], c["target"])
            cams.append(pinhole(W, H, fov, R, t))
        return cams
    rig = {**DATASET_DEFAULTS["rig"], **cfg.get("rig", {})}
    n = cfg["views_per_scene"]
    arc = math.radians(rig["arc_deg"])
    # a full circle spaces n views evenly; a partial arc includes both ends
    step_div = n if rig["arc_deg"] >= 360 else max(n - 1, 1)
    base = rng.uniform(0, 2 * math.pi)
    for k in range(n):
        # spread yaws over the arc so pairs reach the rotation threshold
        yaw = base + arc * k / step_div + rng.uniform(-0.2, 0.2)
        r = rng.uniform(*rig["radius"])
        eye = np.array([r * math.cos(yaw), rng.uniform(*rig["height"]), r * math.sin(yaw)])
        target = np.asarray(rig["look_at"]) + rng.uniform(-1, 1, 3) * rig["look_jitter"]
        R, t = look_at(eye, target)
        cams.append(pinhole(W, H, fov, R, t))
    return cams


def _scene_ids(n: int) -> list[str]:
    return [f"scene_{i:03d}" for i in range(n)]


def generate_dataset(config: dict, out_dir, seed: int) -> dict:
    """Render every scene/view, select pairs, and write the dataset tree.

    Returns the manifest that was written.
    """
    cfg = dataset_config(config)
    out = Path(out_dir)
    ids = _scene_ids(cfg["scenes"])
    n_val = cfg["val_scenes"] if cfg["scenes"] > 1 else 0
    splits = {"train": ids[: len(ids) - n_val], "val": ids[len(ids) - n_val :]}
    dropped = {}
    try:
        (out / "scenes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out / 'scenes'}: {exc}") from exc

    for s_idx, sid in enumerate(ids):
        rng = np.random.default_rng([seed, s_idx])
        scene = build_scene(cfg["scene"], rng)
        cams = _rig_cameras(cfg, rng)
        sdir = out / "scenes" / sid
        sdir.mkdir(parents=True, exist_ok=True)
        for k, cam in enumerate(cams):
            view = oracle_render(scene, cam, cfg["far"])
            io.write_rgb_png(sdir / f"view_{k}.png", view.rgb)
            io.write_label_png(sdir / f"view_{k}.labels.png", view.labels)
            io.write_pfm(sdir / f"view_{k}.pfm", view.depth)
        pairs, n_drop = select_pairs(
            cams,
            cfg["n_sources"],
            cfg["near"],
            cfg["far"],
            cfg["overlap_grid"],
            cfg.get("min_sources"),
            cfg.get("targets"),
        )
        dropped[sid] = n_drop
        noise_rng = np.random.default_rng([seed, s_idx, 7])
        records = []
        for sources, target in pairs:
            rec = {"target": target, "sources": sources}
            if cfg["noise_deg"] > 0:
                noisy, angles = [], []
                for j in sources:
                    cam, ang = perturb_camera(cams[j], cfg["noise_deg"], noise_rng)
                    noisy.append(cam.to_json())
                    angles.append([float(a) for a in ang])
                rec["sources_noisy"] = noisy
                rec["noise_angles_deg"] = angles
            records.append(rec)
        io.write_json(sdir / "cameras.json", [c.to_json() for c in cams])
        io.write_json(sdir / "pairs.json", records)
        io.write_json(sdir / "scene.json", scene.to_json())

    manifest = {
        "seed": int(seed),
        "config": cfg,
        "splits": splits,
        "classes": ClassRegistry.default(cfg["scene"].get("num_classes", len(DEFAULT_CLASSES))).to_json(),
        "pairs_dropped": dropped,
        "overlap_direction": "target frustum into source frustum",
        "translation_measure": "distance between camera centres",
    }
    io.write_json(out / "manifest.json", manifest)
    return manifest


def dataset_hash(root) -> str:
    """SHA-256 over the manifest and every per-scene JSON file."""
    root = Path(root)
    h = hashlib.sha256()
    for p in [root / "manifest.json"] + sorted((root / "scenes").glob("*/*.json")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()

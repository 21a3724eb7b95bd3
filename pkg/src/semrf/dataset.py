"""Read-side access to a generated dataset tree."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geometry import Camera
from .synthscene import ClassRegistry


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Pair:
    scene: str
    target: int
    sources: tuple[int, ...]
    # cameras the model is given for the sources; noisy when the dataset was
    # generated with a rotation-noise level, otherwise the true cameras
    source_cameras: tuple[Camera, ...]


@dataclass
class Dataset:
    root: Path
    manifest: dict
    registry: ClassRegistry
    cameras: dict[str, list[Camera]]
    pairs: dict[str, list[Pair]]
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        mpath = root / "manifest.json"
        if not mpath.is_file():
            raise DatasetError(f"dataset manifest not found: {mpath}")
        manifest = io.read_json(mpath)
        registry = ClassRegistry.from_json(manifest["classes"])
        cameras, pairs = {}, {}
        for split in manifest["splits"].values():
            for sid in split:
                sdir = root / "scenes" / sid
                cams = [Camera.from_json(c) for c in io.read_json(sdir / "cameras.json")]
                cameras[sid] = cams
                plist = []
                for rec in io.read_json(sdir / "pairs.json"):
                    src = tuple(int(j) for j in rec["sources"])
                    if "sources_noisy" in rec:
                        scams = tuple(Camera.from_json(c) for c in rec["sources_noisy"])
                    else:
                        scams = tuple(cams[j] for j in src)
                    plist.append(Pair(sid, int(rec["target"]), src, scams))
                pairs[sid] = plist
        return cls(root, manifest, registry, cameras, pairs)

    def split(self, name: str) -> list[str]:
        splits = self.manifest["splits"]
        if name not in splits:
            raise DatasetError(f"split {name!r} not in {self.root / 'manifest.json'} (have {sorted(splits)})")
        return list(splits[name])

    def split_pairs(self, name: str) -> list[Pair]:
        return [p for sid in self.split(name) for p in self.pairs[sid]]

    def view_path(self, scene: str, k: int, kind: str) -> Path:
        suffix = {"rgb": ".png", "labels": ".labels.png", "depth": ".pfm"}[kind]
        return self.root / "scenes" / scene / f"view_{k}{suffix}"

    def load_view(self, scene: str, k: int, kind: str) -> np.ndarray:
        key = (scene, k, kind)
        if key not in self._cache:
            p = self.view_path(scene, k, kind)
            if kind == "rgb":
                arr = io.read_rgb_png(p)
            elif kind == "labels":
                arr = io.read_label_png(p)
            else:
                arr = io.read_pfm(p)
            self._cache[key] = arr
        return self._cache[key]

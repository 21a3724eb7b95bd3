"""Pinhole cameras and the multi-view geometry used by the renderer.

Pixel convention: ``u`` grows rightward, ``v`` downward, origin at the
top-left image corner, pixel centres at half-integers.  Camera frame: +z
along the optical axis, +x toward increasing ``u``, +y toward increasing
``v``.  ``rotation``/``translation`` map world points into the camera frame,
``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.abs(R.T @ R - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def axis(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.rotation[2].copy()

    def to_json(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        missing = {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"} - set(obj)
        if missing:
            raise ValueError(f"camera JSON missing fields {sorted(missing)}")
        if len(obj["rotation"]) != 9 or len(obj["translation"]) != 3:
            raise ValueError("camera JSON needs 9 rotation and 3 translation entries")
        return cls(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            rotation=np.array(obj["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(obj["translation"], dtype=np.float64),
        )

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(tuple(self.rotation.ravel()) + tuple(self.translation))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float]


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear toward the top of the
    image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("look_at: viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def pinhole(width: int, height: int, fov_x_deg: float, R, t) -> Camera:
    """Camera with square pixels, centred principal point and horizontal FOV."""
    f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2.0)
    return Camera(f, f, width / 2.0, height / 2.0, width, height, R, t)


def generate_ray(camera: Camera, pixel: tuple[float, float]) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    o, d = generate_rays(camera, np.array([[u, v]]))
    return Ray(o[0], d[0], (u, v))


def generate_rays(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ray generation; ``pixels`` is (N, 2) of (u, v)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    dirs_cam = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    d = dirs_cam @ camera.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H*W, 2) array of (u, v) pixel centres in raster order."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.reshape(-1) + 0.5, v.reshape(-1) + 0.5], axis=1).astype(np.float64)


def project(camera: Camera, point) -> tuple[float, float, float]:
    """Returns (u, v, depth); depth <= 0 flags a point behind the camera."""
    uvz = project_points(camera, np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    return float(uvz[0]), float(uvz[1]), float(uvz[2])


def project_points(camera: Camera, points: np.ndarray) -> np.ndarray:
    """(N, 3) world points -> (N, 3) of (u, v, z_cam).

    ``u``/``v`` are NaN where z_cam <= 0.
    """
    pc = points @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    behind = z <= 0
    u[behind] = np.nan
    v[behind] = np.nan
    return np.stack([u, v, z], axis=1)


def positional_encoding(x, octaves: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].

    Works on the last axis: (..., n) -> (..., n * (2L + 1)).
    """
    if octaves < 0:
        raise ValueError("octaves must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for level in range(octaves):
        arg = (2.0**level) * math.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def axis_rotation(axis: int, angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def perturb_camera(
    camera: Camera, max_angle_deg: float, rng: np.random.Generator
) -> tuple[Camera, np.ndarray]:
    """Rotate the camera by uniform random angles about X, then Y, then Z.

    Returns the perturbed camera and the three drawn angles in degrees.
    The translation vector is left untouched.
    """
    if max_angle_deg < 0:
        raise ValueError("max_angle_deg must be >= 0")
    angles = rng.uniform(-max_angle_deg, max_angle_deg, size=3)
    if max_angle_deg == 0:
        return camera, np.zeros(3)
    noise = np.eye(3)
    for axis, a in enumerate(angles):
        noise = axis_rotation(axis, math.radians(a)) @ noise
    R = _reorthonormalize(noise @ camera.rotation)
    return replace(camera, rotation=R), angles


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle of Ra Rb^T, in degrees."""
    M = Ra @ Rb.T
    c = (np.trace(M) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def in_frustum(camera: Camera, points: np.ndarray, near: float, far: float) -> np.ndarray:
    uvz = project_points(camera, points)
    z = uvz[:, 2]
    with np.errstate(invalid="ignore"):
        return (
            (z >= near)
            & (z <= far)
            & (uvz[:, 0] >= 0)
            & (uvz[:, 0] <= camera.width)
            & (uvz[:, 1] >= 0)
            & (uvz[:, 1] <= camera.height)
        )


def frustum_grid(camera: Camera, near: float, far: float, grid: int) -> np.ndarray:
    """World points of a regular grid over the frustum's camera-frame bounding box,
    restricted to the frustum itself (cell-centred, ``grid`` cells per axis)."""
    xs = (np.array([0.0, camera.width]) - camera.cx) / camera.fx * far
    ys = (np.array([0.0, camera.height]) - camera.cy) / camera.fy * far
    c = (np.arange(grid) + 0.5) / grid
    gx = xs.min() + c * (xs.max() - xs.min())
    gy = ys.min() + c * (ys.max() - ys.min())
    gz = near + c * (far - near)
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    pc = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    world = (pc - camera.translation) @ camera.rotation
    return world[in_frustum(camera, world, near, far)]


def frustum_overlap(a: Camera, b: Camera, near: float, far: float, grid: int = 16) -> float:
    """Fraction of grid points in a's frustum that also fall inside b's frustum."""
    if not near < far:
        raise ValueError("near must be < far")
    if grid < 2:
        raise ValueError("grid must be >= 2")
    pts = frustum_grid(a, near, far, grid)
    if len(pts) == 0:
        return 0.0
    return float(in_frustum(b, pts, near, far).mean())

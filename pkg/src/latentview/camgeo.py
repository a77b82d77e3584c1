"""Camera geometry: quaternions, SE(3) poses, rays, and Plucker maps.

Conventions (fixed for the whole package):
  * Poses are camera-to-world: applying a pose to a camera-frame point
    yields a world-frame point.
  * Camera frame: +x right, +y down, +z forward (optical axis).
  * Pixel (u, v) covers [u, u+1) x [v, v+1); its center is (u+0.5, v+0.5).
  * Quaternions are stored (w, x, y, z) and canonicalized to w >= 0 at
    construction; q and -q encode the same rotation.
  * Camera vectors are 7-vectors [tx, ty, tz, qw, qx, qy, qz].

Everything here is a pure function of its inputs; RNGs are passed
explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class GeometryError(ValueError):
    """Invalid geometric input (non-finite values, out-of-range pixels...)."""


def _check_finite(name, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise GeometryError(f"{name}: non-finite input")


@dataclass(frozen=True)
class Quaternion:
    """Unit-length rotation quaternion, sign-canonicalized so w >= 0."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        _check_finite("Quaternion", (self.w, self.x, self.y, self.z))
        if self.w < 0:
            object.__setattr__(self, "w", -self.w)
            object.__setattr__(self, "x", -self.x)
            object.__setattr__(self, "y", -self.y)
            object.__setattr__(self, "z", -self.z)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(a) -> "Quaternion":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (4,):
            raise GeometryError(f"Quaternion.from_array: expected shape (4,), got {a.shape}")
        return Quaternion(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n <= 0.0:
            raise GeometryError("Quaternion.normalized: zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, o: "Quaternion") -> "Quaternion":
        # Hamilton product.
        return Quaternion(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )


def quat_to_rotmat(q: Quaternion) -> np.ndarray:
    """3x3 rotation matrix of a (near-)unit quaternion. R(q) == R(-q)."""
    q = q.normalized()
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def rotmat_to_quat(r: np.ndarray) -> Quaternion:
    """Quaternion of a proper rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"rotmat_to_quat: expected 3x3, got {r.shape}")
    _check_finite("rotmat_to_quat", r)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    return Quaternion(w, x, y, z).normalized()


@dataclass(frozen=True)
class Pose:
    """SE(3) camera-to-world extrinsic: rotation quaternion + translation."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_finite("Pose", t)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Quaternion.identity(), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame point(s) (..., 3) to the world frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation


def pose_from_matrix(r: np.ndarray, t: np.ndarray) -> Pose:
    return Pose(rotmat_to_quat(r), np.asarray(t, dtype=np.float64))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """a after b: (a o b)(p) = a(b(p))."""
    q = (a.rotation * b.rotation).normalized()
    t = a.rotation_matrix() @ b.translation + a.translation
    return Pose(q, t)


def pose_inverse(p: Pose) -> Pose:
    q = p.rotation.normalized().conjugate()
    t = -(quat_to_rotmat(q) @ p.translation)
    return Pose(q, t)


def pose_distance(a: Pose, b: Pose) -> float:
    """Translation distance plus rotation angle (rad); 0 iff equal poses."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dq = (pose_inverse(a).rotation * b.rotation).normalized()
    ang = 2.0 * math.acos(min(1.0, abs(dq.w)))
    return dt + ang


def normalize_views(poses: list) -> list:
    """Re-express all poses relative to the first one (which becomes identity)."""
    if not poses:
        raise GeometryError("normalize_views: empty pose list")
    ref_inv = pose_inverse(poses[0])
    out = [Pose.identity()]
    out.extend(pose_compose(ref_inv, p) for p in poses[1:])
    return out


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        _check_finite("Intrinsics", (self.fx, self.fy, self.cx, self.cy))
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"Intrinsics: focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"Intrinsics: principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    @staticmethod
    def default(resolution: int, fov_deg: float = 60.0) -> "Intrinsics":
        f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
        return Intrinsics(f, f, resolution / 2, resolution / 2, resolution, resolution)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Intrinsics":
        return Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@lru_cache(maxsize=32)
def camera_dirs(intr: Intrinsics) -> np.ndarray:
    """Unit ray directions through all pixel centers, camera frame, (H, W, 3)."""
    u = (np.arange(intr.width, dtype=np.float64) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height, dtype=np.float64) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


def world_ray_grid(intr: Intrinsics, pose: Pose):
    """(origins, dirs) for all pixels, world frame; dirs renormalized."""
    dirs = camera_dirs(intr) @ pose.rotation_matrix().T
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape)
    return origins, dirs


def pixel_ray(intr: Intrinsics, pose: Pose, u, v) -> Ray:
    """World-frame ray through the center of pixel (u, v)."""
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise GeometryError(
            f"pixel_ray: pixel ({u}, {v}) outside {intr.width}x{intr.height} image"
        )
    dc = np.array([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, 1.0])
    dc /= np.linalg.norm(dc)
    d = pose.rotation_matrix() @ dc
    d /= np.linalg.norm(d)
    return Ray(pose.translation.copy(), d)


def project(intr: Intrinsics, pose: Pose, points: np.ndarray):
    """Project world point(s) to continuous pixel coordinates.

    Returns (uv, z) where uv is (..., 2) in pixel-center coordinates (the
    projection of a point on the ray of pixel (u, v) is (u+0.5, v+0.5)) and
    z is the camera-frame depth along the optical axis. Points behind the
    camera yield z <= 0; the caller decides what to do with them.
    """
    p = np.asarray(points, dtype=np.float64)
    rel = p - pose.translation
    cam = rel @ quat_to_rotmat(pose.rotation)  # R^T applied to rows
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[..., 0] / z + intr.cx
        v = intr.fy * cam[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def plucker_map(pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Per-pixel 6-D ray embedding concat(o x d, d), shape (H, W, 6).

    The first three channels are the moment m = o x d; the map is invariant
    to sliding the ray origin along its direction.
    """
    origins, dirs = world_ray_grid(intr, pose)
    m = np.cross(origins, dirs)
    return np.concatenate([m, dirs], axis=-1)


def plucker_of_ray(ray: Ray) -> np.ndarray:
    d = ray.direction / np.linalg.norm(ray.direction)
    return np.concatenate([np.cross(ray.origin, d), d])


def pose_to_camvec(p: Pose) -> np.ndarray:
    """7-vector [t, q] with q unit and w >= 0."""
    q = p.rotation.normalized()
    return np.concatenate([p.translation, q.to_array()])


def camvec_to_pose(c) -> Pose:
    c = np.asarray(c, dtype=np.float64).reshape(7)
    _check_finite("camvec_to_pose", c)
    q = c[3:7]
    n = np.linalg.norm(q)
    if n <= 1e-12:
        raise GeometryError("camvec_to_pose: zero quaternion part")
    return Pose(Quaternion.from_array(q / n), c[:3].copy())


def add_pose_noise(p: Pose, sigma2: float, rng: np.random.Generator) -> Pose:
    """i.i.d. Gaussian(0, sigma2) on each of the 7 camera-vector components.

    The quaternion part is renormalized afterwards. sigma2 = 0 returns the
    pose unchanged (and consumes no randomness).
    """
    if sigma2 < 0:
        raise GeometryError(f"add_pose_noise: negative variance {sigma2}")
    if sigma2 == 0:
        return p
    c = pose_to_camvec(p)
    c = c + rng.normal(0.0, math.sqrt(sigma2), size=7)
    return camvec_to_pose(c)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose looking from eye toward target.

    With the +y-up world used by the scene generator, camera +y (image down)
    maps to world -y, so rendered images come out upright.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    zn = np.linalg.norm(z)
    if zn < 1e-12:
        raise GeometryError("look_at: eye and target coincide")
    z = z / zn
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-9:  # looking straight up/down: pick an arbitrary right vector
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    return pose_from_matrix(r, eye)

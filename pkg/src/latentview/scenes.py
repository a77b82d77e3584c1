"""Procedural multi-view scenes with an exact CPU ray-cast renderer.

A scene is a closed textured room with a handful of boxes and spheres, all
generated deterministically from a 64-bit seed. Cameras travel along a
smooth seeded trajectory inside the free space. Rendering is one primary
ray per pixel, nearest hit, Lambert shading with a fixed light: rendering
the same (seed, pose, intrinsics) twice is bit-identical, which makes the
renderer usable as a ground-truth oracle.

On-disk dataset layout:
    <root>/manifest.json
    <root>/scene_<id>/meta.json      intrinsics, geometry seed, per-view
                                     pose as [tx,ty,tz,qw,qx,qy,qz]
    <root>/scene_<id>/view_<k>.png   8-bit RGB
    <root>/scene_<id>/depth_<k>.bin  u32 H, u32 W, float32 row-major (LE)

Training consumes the 8-bit PNG files; the quantization is part of the
dataset contract.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import camgeo, kernels
from .camgeo import Intrinsics, Pose

LIGHT_DIR = np.array([0.3, 0.75, 0.45])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35

TEX_SOLID, TEX_CHECKER, TEX_GRADIENT = 0, 1, 2


class SceneError(ValueError):
    pass


@dataclass
class SceneGeometry:
    """Packed scene arrays consumed by the ray-cast kernels."""

    seed: int
    room_lo: np.ndarray
    room_hi: np.ndarray
    walls: np.ndarray    # (6, 8)  [ca, cb, mode, scale]
    boxes: np.ndarray    # (K, 14) [lo, hi, ca, cb, mode, scale]
    spheres: np.ndarray  # (K, 12) [center, radius, ca, cb, mode, scale]
    light: np.ndarray = field(default_factory=lambda: LIGHT_DIR.copy())
    ambient: float = AMBIENT

    @property
    def center(self):
        return 0.5 * (self.room_lo + self.room_hi)

    @property
    def half_extent(self):
        return 0.5 * (self.room_hi - self.room_lo)

    def contains(self, p, margin=0.0) -> bool:
        p = np.asarray(p)
        return bool(np.all(p > self.room_lo + margin) and np.all(p < self.room_hi - margin))

    def in_free_space(self, p, margin=0.1) -> bool:
        """Inside the room and outside every object (with margin)."""
        p = np.asarray(p, dtype=np.float64)
        if not self.contains(p, margin):
            return False
        for b in self.boxes:
            if np.all(p > b[0:3] - margin) and np.all(p < b[3:6] + margin):
                return False
        for s in self.spheres:
            if np.linalg.norm(p - s[0:3]) < s[3] + margin:
                return False
        return True


def gen_scene(seed: int) -> SceneGeometry:
    """Deterministic room with 2..8 objects. Draw order is frozen: any
    change here invalidates previously generated datasets."""
    rng = np.random.default_rng(seed)
    hx = rng.uniform(1.6, 2.2)
    hy = rng.uniform(1.2, 1.6)
    hz = rng.uniform(1.6, 2.2)
    room_lo = np.array([-hx, -hy, -hz])
    room_hi = np.array([hx, hy, hz])

    walls = np.zeros((6, 8))
    for w in range(6):
        walls[w, 0:3] = rng.uniform(0.2, 1.0, 3)
        walls[w, 3:6] = rng.uniform(0.2, 1.0, 3)
        walls[w, 6] = TEX_CHECKER if rng.random() < 0.5 else TEX_GRADIENT
        walls[w, 7] = rng.uniform(0.35, 0.8)

    k = int(rng.integers(2, 9))
    boxes = []
    spheres = []
    for _ in range(k):
        ca = rng.uniform(0.2, 1.0, 3)
        cb = rng.uniform(0.2, 1.0, 3)
        mode = TEX_SOLID if rng.random() < 0.4 else TEX_CHECKER
        scale = rng.uniform(0.15, 0.4)
        if rng.random() < 0.5:
            half = rng.uniform(0.12, 0.4, 3)
            margin = half + 0.1
            c = rng.uniform(room_lo + margin, room_hi - margin)
            boxes.append(np.concatenate([c - half, c + half, ca, cb, [mode, scale]]))
        else:
            r = rng.uniform(0.15, 0.45)
            margin = r + 0.1
            c = rng.uniform(room_lo + margin, room_hi - margin)
            spheres.append(np.concatenate([c, [r], ca, cb, [mode, scale]]))

    boxes_arr = np.array(boxes) if boxes else np.zeros((0, 14))
    spheres_arr = np.array(spheres) if spheres else np.zeros((0, 12))
    return SceneGeometry(int(seed), room_lo, room_hi, walls, boxes_arr, spheres_arr)


def raycast_render(g: SceneGeometry, pose: Pose, intr: Intrinsics):
    """Render (image, depth) from a camera strictly inside the room.

    image is (H, W, 3) float64 in [0, 1], depth (H, W) is the Euclidean
    hit distance per pixel. Deterministic, no stochastic sampling.
    """
    if not g.contains(pose.translation, margin=1e-9):
        raise SceneError(f"camera {pose.translation} outside room [{g.room_lo}, {g.room_hi}]")
    origins, dirs = camgeo.world_ray_grid(intr, pose)
    colors, depth = kernels.render(origins.reshape(-1, 3), dirs.reshape(-1, 3), g)
    image = np.clip(colors, 0.0, 1.0).reshape(intr.height, intr.width, 3)
    return image, depth.reshape(intr.height, intr.width)


# ---------------------------------------------------------------------------
# Surface sampling and view overlap


def surface_points(g: SceneGeometry, n: int, seed: int = 0) -> np.ndarray:
    """n points on the scene surfaces, allocated by area, seeded."""
    if n <= 0:
        raise SceneError("surface_points: need n > 0")
    rng = np.random.default_rng(seed)
    ext = g.room_hi - g.room_lo
    surfaces = []  # (area, sampler(count) -> (count, 3))

    def wall_sampler(axis, at, a1, a2):
        def sample(count):
            pts = np.empty((count, 3))
            pts[:, axis] = at
            pts[:, a1] = rng.uniform(g.room_lo[a1], g.room_hi[a1], count)
            pts[:, a2] = rng.uniform(g.room_lo[a2], g.room_hi[a2], count)
            return pts
        return sample

    uv = ((1, 2), (0, 2), (0, 1))
    for axis in range(3):
        a1, a2 = uv[axis]
        area = ext[a1] * ext[a2]
        surfaces.append((area, wall_sampler(axis, g.room_lo[axis], a1, a2)))
        surfaces.append((area, wall_sampler(axis, g.room_hi[axis], a1, a2)))

    def box_face_sampler(b, axis, at, a1, a2):
        def sample(count):
            pts = np.empty((count, 3))
            pts[:, axis] = at
            pts[:, a1] = rng.uniform(b[a1], b[3 + a1], count)
            pts[:, a2] = rng.uniform(b[a2], b[3 + a2], count)
            return pts
        return sample

    for b in g.boxes:
        size = b[3:6] - b[0:3]
        for axis in range(3):
            a1, a2 = uv[axis]
            area = size[a1] * size[a2]
            surfaces.append((area, box_face_sampler(b, axis, b[axis], a1, a2)))
            surfaces.append((area, box_face_sampler(b, axis, b[3 + axis], a1, a2)))

    def sphere_sampler(c, r):
        def sample(count):
            v = rng.normal(size=(count, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return c[None, :] + r * v
        return sample

    for s in g.spheres:
        surfaces.append((4 * math.pi * s[3] ** 2, sphere_sampler(s[0:3], s[3])))

    areas = np.array([a for a, _ in surfaces])
    quota = areas / areas.sum() * n
    counts = np.floor(quota).astype(int)
    # Largest remainder keeps the total exactly n, deterministically.
    rem = quota - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    parts = [surfaces[i][1](c) for i, c in enumerate(counts) if c > 0]
    return np.concatenate(parts, axis=0)


def _visible_mask(g: SceneGeometry, pose: Pose, intr: Intrinsics, pts: np.ndarray):
    cam = pose.translation
    rel = pts - cam
    dist = np.linalg.norm(rel, axis=1)
    ok = dist > 1e-9
    uv, z = camgeo.project(intr, pose, pts)
    in_frame = ok & (z > 1e-9)
    in_frame &= (uv[:, 0] >= 0) & (uv[:, 0] < intr.width)
    in_frame &= (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
    if not in_frame.any():
        return in_frame
    idx = np.nonzero(in_frame)[0]
    dirs = rel[idx] / dist[idx, None]
    t = kernels.trace_depth(np.broadcast_to(cam, dirs.shape), dirs, g)
    unocc = np.abs(t - dist[idx]) <= 1e-3 * np.maximum(1.0, dist[idx])
    mask = np.zeros(len(pts), dtype=bool)
    mask[idx[unocc]] = True
    return mask


def view_overlap(g: SceneGeometry, a: Pose, b: Pose, intr: Intrinsics,
                 n_samples: int = 4096, seed: int = 0) -> float:
    """Symmetrized fraction of co-visible surface points, in [0, 1]."""
    if g.walls.shape[0] == 0:
        raise SceneError("view_overlap: empty scene")
    pts = surface_points(g, n_samples, seed)
    va = _visible_mask(g, a, intr, pts)
    vb = _visible_mask(g, b, intr, pts)
    both = np.count_nonzero(va & vb)
    na, nb = np.count_nonzero(va), np.count_nonzero(vb)
    f_ab = both / na if na else 0.0
    f_ba = both / nb if nb else 0.0
    return 0.5 * (f_ab + f_ba)


# ---------------------------------------------------------------------------
# Camera trajectories


def _catmull_rom(points: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Uniform Catmull-Rom through the given points, u in [0, 1]."""
    p = np.concatenate([points[:1], points, points[-1:]], axis=0)
    nseg = len(points) - 1
    s = np.clip(u * nseg, 0, nseg - 1e-9)
    i = s.astype(int)
    t = (s - i)[:, None]
    p0, p1, p2, p3 = p[i], p[i + 1], p[i + 2], p[i + 3]
    return 0.5 * (
        2 * p1
        + (-p0 + p2) * t
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t**2
        + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3
    )


def _sample_free(g: SceneGeometry, rng, lo, hi, margin=0.15, tries=100):
    for _ in range(tries):
        p = rng.uniform(lo, hi)
        if g.in_free_space(p, margin):
            return p
    return rng.uniform(lo, hi)


def camera_trajectory(g: SceneGeometry, n_views: int, rng: np.random.Generator):
    """Smooth walkthrough: short random-walk spline for the eye, slowly
    drifting look targets near the room center."""
    c = g.center
    he = g.half_extent
    eye_lo, eye_hi = c - 0.55 * he, c + 0.55 * he
    tgt_lo, tgt_hi = c - 0.4 * he, c + 0.4 * he

    eyes = [_sample_free(g, rng, eye_lo, eye_hi)]
    for _ in range(3):
        step = rng.normal(size=3)
        step = step / np.linalg.norm(step) * rng.uniform(0.25, 0.6)
        nxt = np.clip(eyes[-1] + step, eye_lo, eye_hi)
        if not g.in_free_space(nxt, 0.15):
            nxt = _sample_free(g, rng, eye_lo, eye_hi)
        eyes.append(nxt)

    targets = [rng.uniform(tgt_lo, tgt_hi)]
    for _ in range(3):
        step = rng.normal(size=3)
        step = step / np.linalg.norm(step) * rng.uniform(0.15, 0.4)
        targets.append(np.clip(targets[-1] + step, tgt_lo, tgt_hi))

    u = np.linspace(0.0, 1.0, n_views)
    eye_path = _catmull_rom(np.asarray(eyes), u)
    tgt_path = _catmull_rom(np.asarray(targets), u)

    poses = []
    for e, t in zip(eye_path, tgt_path):
        e = np.clip(e, g.room_lo + 0.05, g.room_hi - 0.05)
        if np.linalg.norm(t - e) < 0.6:
            d = t - e
            n = np.linalg.norm(d)
            d = d / n if n > 1e-9 else np.array([0.0, 0.0, 1.0])
            t = e + 0.6 * d
        poses.append(camgeo.look_at(e, t))
    return poses


# ---------------------------------------------------------------------------
# Persistence


def save_png(path, image) -> None:
    """Quantize a float [0,1] image to 8-bit RGB and write a PNG."""
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def save_depth(path, depth) -> None:
    d = np.ascontiguousarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", d.shape[0], d.shape[1]))
        f.write(d.tobytes())


def load_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        h, w = struct.unpack("<II", f.read(8))
        return np.frombuffer(f.read(4 * h * w), dtype="<f4").reshape(h, w).copy()


@dataclass
class DatasetManifest:
    root: Path
    params: dict
    intrinsics: Intrinsics
    scenes: list          # [{"id": str, "views": int}]
    train: list           # scene ids
    test: list            # scene ids

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "params": self.params,
            "intrinsics": self.intrinsics.to_dict(),
            "scenes": self.scenes,
            "train": self.train,
            "test": self.test,
        }

    def save(self, path=None) -> None:
        path = Path(path) if path else Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @staticmethod
    def load(root) -> "DatasetManifest":
        root = Path(root)
        d = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        return DatasetManifest(
            root=root,
            params=d["params"],
            intrinsics=Intrinsics.from_dict(d["intrinsics"]),
            scenes=d["scenes"],
            train=d["train"],
            test=d["test"],
        )


def scene_seed_for(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def gen_dataset(n_scenes: int, views_per_scene: int, resolution: int, seed: int,
                out_path, n_test: int = 0, fov_deg: float = 60.0,
                progress=None) -> DatasetManifest:
    """Generate and persist a dataset. Deterministic end-to-end: the same
    arguments always produce bit-identical files."""
    if n_scenes < 1:
        raise SceneError("gen_dataset: need n_scenes >= 1")
    if views_per_scene < 3:
        raise SceneError("gen_dataset: need views_per_scene >= 3")
    if n_test >= n_scenes:
        raise SceneError("gen_dataset: n_test must leave at least one train scene")
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    intr = Intrinsics.default(resolution, fov_deg)

    scenes = []
    for idx in range(n_scenes):
        sid = f"{idx:06d}"
        g_seed = scene_seed_for(seed, idx)
        g = gen_scene(g_seed)
        traj_rng = np.random.default_rng(np.random.SeedSequence([seed, idx, 1]))
        poses = camera_trajectory(g, views_per_scene, traj_rng)

        sdir = root / f"scene_{sid}"
        sdir.mkdir(exist_ok=True)
        views_meta = []
        for k, pose in enumerate(poses):
            image, depth = raycast_render(g, pose, intr)
            save_png(sdir / f"view_{k}.png", image)
            save_depth(sdir / f"depth_{k}.bin", depth)
            views_meta.append({"pose": [float(x) for x in camgeo.pose_to_camvec(pose)]})
        meta = {
            "intrinsics": intr.to_dict(),
            "geometry_seed": g_seed,
            "views": views_meta,
        }
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
        scenes.append({"id": sid, "views": views_per_scene})
        if progress:
            progress(idx + 1, n_scenes)

    ids = [s["id"] for s in scenes]
    manifest = DatasetManifest(
        root=root,
        params={
            "n_scenes": n_scenes,
            "views_per_scene": views_per_scene,
            "resolution": resolution,
            "seed": seed,
            "fov_deg": fov_deg,
            "n_test": n_test,
        },
        intrinsics=intr,
        scenes=scenes,
        train=ids[: n_scenes - n_test],
        test=ids[n_scenes - n_test:],
    )
    manifest.save()
    return manifest


def subset(manifest: DatasetManifest, fraction: float = None, count: int = None,
           seed: int = 0) -> DatasetManifest:
    """Seeded sample of train scenes without replacement; never touches the
    test split. Subsets are nested: under the same seed, a smaller subset is
    a prefix of any larger one."""
    n = len(manifest.train)
    if count is None:
        if fraction is None:
            raise SceneError("subset: give fraction or count")
        if not 0 < fraction <= 1:
            raise SceneError(f"subset: fraction must be in (0, 1], got {fraction}")
        count = max(1, round(fraction * n))
    if not 0 < count <= n:
        raise SceneError(f"subset: count {count} outside 1..{n}")
    order = np.random.default_rng(seed).permutation(sorted(manifest.train))
    train = [str(s) for s in order[:count]]
    return DatasetManifest(
        root=manifest.root,
        params={**manifest.params, "subset_count": count, "subset_seed": seed},
        intrinsics=manifest.intrinsics,
        scenes=manifest.scenes,
        train=train,
        test=list(manifest.test),
    )


# ---------------------------------------------------------------------------
# Records, tasks and correspondence


@dataclass
class SceneRecord:
    """One scene as the training/eval code sees it."""

    id: str
    geometry_seed: int
    intrinsics: Intrinsics
    poses: list
    images: list   # (H, W, 3) float32 in [0, 1], decoded from the 8-bit PNGs

    @property
    def n_views(self) -> int:
        return len(self.poses)


@dataclass
class Task:
    """Input pair plus interpolation/extrapolation target split."""

    inputs: tuple         # (i, j) view indices, i < j
    interp: list
    extrap: list
    overlap: float


def choose_input_pair(g: SceneGeometry, poses, intr, overlap_range=(0.3, 0.9),
                      n_samples=4096):
    """First candidate pair (by centered-gap preference) whose overlap lands
    in range. Deterministic for a given scene."""
    v = len(poses)
    g0 = v // 2
    tried = []
    gaps = sorted(range(2, v), key=lambda x: (abs(x - g0), -x))
    for gap in gaps:
        starts = sorted(range(0, v - gap), key=lambda s: (abs(s - (v - 1 - gap) / 2), s))
        for s in starts:
            ov = view_overlap(g, poses[s], poses[s + gap], intr, n_samples)
            if overlap_range[0] <= ov <= overlap_range[1]:
                return (s, s + gap), ov
            tried.append(((s, s + gap), round(ov, 4)))
    raise SceneError(f"no input pair with overlap in {overlap_range}; tried {tried}")


def build_task(record: SceneRecord, n_inputs: int = 2,
               overlap_range=(0.3, 0.9)) -> Task:
    if n_inputs != 2:
        raise SceneError("build_task: only n_inputs=2 is supported")
    if record.n_views < n_inputs + 2:
        raise SceneError(f"build_task: need at least {n_inputs + 2} views, have {record.n_views}")
    g = gen_scene(record.geometry_seed)
    (i, j), ov = choose_input_pair(g, record.poses, record.intrinsics, overlap_range)
    interp = [k for k in range(record.n_views) if i < k < j]
    extrap = [k for k in range(record.n_views) if k < i or k > j]
    return Task(inputs=(i, j), interp=interp, extrap=extrap, overlap=ov)


def gt_correspondence(g: SceneGeometry, pose_a: Pose, pose_b: Pose,
                      intr: Intrinsics, patch: int) -> np.ndarray:
    """Ground-truth patch map A -> B via unproject/reproject with depth.

    Returns an int array of length (H/patch)*(W/patch); entry is B's patch
    index or -1 where the patch center is out of frame or occluded in B.
    """
    _, depth_a = raycast_render(g, pose_a, intr)
    _, depth_b = raycast_render(g, pose_b, intr)
    hp, wp = intr.height // patch, intr.width // patch
    out = np.full(hp * wp, -1, dtype=np.int64)
    half = patch // 2
    for pi in range(hp):
        for pj in range(wp):
            u = pj * patch + half
            v = pi * patch + half
            ray = camgeo.pixel_ray(intr, pose_a, u, v)
            p = ray.origin + depth_a[v, u] * ray.direction
            uv, z = camgeo.project(intr, pose_b, p)
            if z <= 1e-9:
                continue
            ub, vb = uv
            if not (0 <= ub < intr.width and 0 <= vb < intr.height):
                continue
            dist_b = np.linalg.norm(p - pose_b.translation)
            d_b = depth_b[int(vb), int(ub)]
            if abs(d_b - dist_b) <= 0.02 * dist_b:
                out[pi * wp + pj] = (int(vb) // patch) * wp + (int(ub) // patch)
    return out


class Dataset:
    """Loader with in-memory caches over a persisted dataset."""

    def __init__(self, root):
        self.manifest = DatasetManifest.load(root)
        self.root = Path(root)
        self.intrinsics = self.manifest.intrinsics
        self._meta = {}
        self._images = {}
        self._tasks = {}

    @property
    def train_ids(self):
        return self.manifest.train

    @property
    def test_ids(self):
        return self.manifest.test

    def _scene_meta(self, sid) -> dict:
        if sid not in self._meta:
            p = self.root / f"scene_{sid}" / "meta.json"
            if not p.exists():
                raise SceneError(f"unknown scene id {sid!r} (no {p})")
            self._meta[sid] = json.loads(p.read_text(encoding="utf-8"))
        return self._meta[sid]

    def poses(self, sid):
        meta = self._scene_meta(sid)
        return [camgeo.camvec_to_pose(v["pose"]) for v in meta["views"]]

    def image_u8(self, sid, k) -> np.ndarray:
        key = (sid, k)
        if key not in self._images:
            self._images[key] = load_png(self.root / f"scene_{sid}" / f"view_{k}.png")
        return self._images[key]

    def image(self, sid, k) -> np.ndarray:
        return self.image_u8(sid, k).astype(np.float32) / np.float32(255.0)

    def depth(self, sid, k) -> np.ndarray:
        return load_depth(self.root / f"scene_{sid}" / f"depth_{k}.bin")

    def geometry_seed(self, sid) -> int:
        return int(self._scene_meta(sid)["geometry_seed"])

    def geometry(self, sid) -> SceneGeometry:
        return gen_scene(self.geometry_seed(sid))

    def record(self, sid) -> SceneRecord:
        meta = self._scene_meta(sid)
        n = len(meta["views"])
        return SceneRecord(
            id=sid,
            geometry_seed=int(meta["geometry_seed"]),
            intrinsics=self.intrinsics,
            poses=self.poses(sid),
            images=[self.image(sid, k) for k in range(n)],
        )

    def task(self, sid) -> Task:
        if sid not in self._tasks:
            self._tasks[sid] = build_task(self.record(sid))
        return self._tasks[sid]

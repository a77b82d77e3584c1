"""Evaluation harness: per-view metrics, pose alignment, scaling and noise
sweeps, attention/latent analyses, and report files.

Report formats: comma-separated text tables with a header row, plus
key=value run summaries (UTF-8). Attention blocks export as 8-bit
grayscale PNG grids.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import camgeo, metrics, nn, scenes
from . import model as lvm
from .camgeo import Intrinsics, Pose
from .scenes import Dataset, DatasetManifest


class HarnessError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Reproducibility helpers


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() if out.returncode == 0 else ""
    except OSError:
        return ""


def write_run_summary(path, config: dict, extras: dict = None) -> None:
    lines = [f"config_hash={config_hash(config)}"]
    desc = git_describe()
    if desc:
        lines.append(f"git_describe={desc}")
    for k, v in sorted(config.items()):
        lines.append(f"config.{k}={v}")
    for k, v in (extras or {}).items():
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Training samplers and cached training runs


def relative_pose(ref: Pose, target: Pose) -> Pose:
    return camgeo.pose_compose(camgeo.pose_inverse(ref), target)


class TrainSampler:
    """Draws training batches from a manifest's train split.

    Targets are interpolation views of each scene's task. With
    noise_sigma2 > 0 every stored pose is perturbed once (deterministically
    per view) before normalization; this corrupts only the annotations the
    posed-target variant consumes, never the images.
    """

    def __init__(self, dataset: Dataset, manifest: DatasetManifest = None,
                 noise_sigma2: float = 0.0, noise_seed: int = 0):
        self.ds = dataset
        self.manifest = manifest or dataset.manifest
        self.train_ids = list(self.manifest.train)
        if not self.train_ids:
            raise HarnessError("TrainSampler: empty train split")
        self.noise_sigma2 = noise_sigma2
        self.noise_seed = noise_seed
        self._cache = {}

    def _poses(self, sid):
        poses = self.ds.poses(sid)
        if self.noise_sigma2 > 0:
            noised = []
            for k, p in enumerate(poses):
                rng = np.random.default_rng(
                    np.random.SeedSequence([self.noise_seed, int(sid), k]))
                noised.append(camgeo.add_pose_noise(p, self.noise_sigma2, rng))
            poses = noised
        return poses

    def _scene(self, sid):
        if sid not in self._cache:
            task = self.ds.task(sid)
            poses = self._poses(sid)
            i, j = task.inputs
            views = [self.ds.image(sid, i), self.ds.image(sid, j)]
            rel = {k: relative_pose(poses[i], poses[k]) for k in task.interp}
            self._cache[sid] = (task, views, rel)
        return self._cache[sid]

    def __call__(self, rng: np.random.Generator, batch_size: int) -> list:
        batch = []
        for _ in range(batch_size):
            sid = self.train_ids[int(rng.integers(0, len(self.train_ids)))]
            task, views, rel = self._scene(sid)
            k = task.interp[int(rng.integers(0, len(task.interp)))]
            batch.append({
                "views": views,
                "target": self.ds.image(sid, k),
                "target_pose": rel[k],
            })
        return batch


def dataset_fingerprint(manifest: DatasetManifest) -> dict:
    return {"params": manifest.params, "train": sorted(manifest.train),
            "test": sorted(manifest.test)}


def train_model(config: lvm.ModelConfig, dataset: Dataset, steps: int, lr: float,
                batch_size: int, seed: int, manifest: DatasetManifest = None,
                noise_sigma2: float = 0.0, noise_seed: int = 0,
                cache_dir=None, log_path=None, callback=None) -> lvm.Model:
    """Train (or load from the content-addressed cache) one model."""
    manifest = manifest or dataset.manifest
    key = config_hash({
        "config": config.to_dict(), "steps": steps, "lr": lr,
        "batch": batch_size, "seed": seed, "noise": noise_sigma2,
        "noise_seed": noise_seed, "data": dataset_fingerprint(manifest),
    })
    cache_path = Path(cache_dir) / f"run_{key}.ckpt" if cache_dir else None
    if cache_path is not None and cache_path.exists():
        return lvm.Model.load(cache_path)
    model = lvm.Model(config)
    sampler = TrainSampler(dataset, manifest, noise_sigma2, noise_seed)
    lvm.run_training(model, sampler, dataset.intrinsics, steps=steps, lr=lr,
                     batch_size=batch_size, seed=seed, log_path=log_path,
                     callback=callback)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        model.save(cache_path)
    return model


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class MetricRow:
    scene_id: str
    target_index: int
    mode: str        # interp | extrap
    bucket: str      # small | medium | large
    psnr: float
    ssim: float
    camvec: tuple = None  # predicted 7-vector (unposed variant only)

    def csv(self) -> str:
        base = f"{self.scene_id},{self.target_index},{self.mode},{self.bucket},{self.psnr:.6f},{self.ssim:.6f}"
        if self.camvec is not None:
            base += "," + ",".join(f"{x:.8f}" for x in self.camvec)
        return base


@dataclass
class EvalReport:
    rows: list
    aggregates: dict
    config: dict = field(default_factory=dict)

    def mean_psnr(self, mode="interp") -> float:
        vals = [r.psnr for r in self.rows if r.mode == mode]
        if not vals:
            raise HarnessError(f"no rows with mode {mode!r}")
        return float(np.mean(vals))

    def save(self, path) -> None:
        has_cam = any(r.camvec is not None for r in self.rows)
        header = "scene_id,target_index,mode,bucket,psnr,ssim"
        if has_cam:
            header += "," + ",".join(
                f"cam_{c}" for c in ("tx", "ty", "tz", "qw", "qx", "qy", "qz"))
        lines = [header] + [r.csv() for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def overlap_bucket(overlap: float) -> str:
    if overlap < 0.4:
        return "small"
    if overlap < 0.7:
        return "medium"
    return "large"


def _aggregate(rows: list) -> dict:
    agg = {}
    def put(prefix, subset):
        if subset:
            agg[f"{prefix}_psnr"] = float(np.mean([r.psnr for r in subset]))
            agg[f"{prefix}_ssim"] = float(np.mean([r.ssim for r in subset]))
            agg[f"{prefix}_count"] = len(subset)
    put("overall", rows)
    for mode in ("interp", "extrap"):
        put(mode, [r for r in rows if r.mode == mode])
    for bucket in ("small", "medium", "large"):
        put(f"bucket_{bucket}", [r for r in rows if r.bucket == bucket])
    return agg


def eval_run(predictor, dataset: Dataset, manifest: DatasetManifest = None,
             split: str = "test", modes=("interp", "extrap"), limit: int = None,
             align_steps: int = 0, mapper: bool = False) -> EvalReport:
    """Evaluate a model or baseline over a dataset split.

    predictor: a Model, or "copy" (copy nearest input view by trajectory
    index) or "oracle" (re-render ground truth; the harness upper bound).
    With align_steps > 0 the posed-target variant additionally optimizes
    each target pose at evaluation time. With mapper=True the unposed
    variant renders through the fitted camera mapper from the ground-truth
    pose instead of the learner.
    """
    manifest = manifest or dataset.manifest
    ids = manifest.test if split == "test" else manifest.train
    if limit is not None:
        ids = ids[:limit]
    if not ids:
        raise HarnessError(f"eval_run: empty {split} split")
    intr = dataset.intrinsics
    rows = []
    for sid in ids:
        task = dataset.task(sid)
        poses = dataset.poses(sid)
        i, j = task.inputs
        views = [dataset.image(sid, i), dataset.image(sid, j)]
        bucket = overlap_bucket(task.overlap)
        targets = []
        if "interp" in modes:
            targets += [(k, "interp") for k in task.interp]
        if "extrap" in modes:
            targets += [(k, "extrap") for k in task.extrap]
        latent = None
        if isinstance(predictor, lvm.Model) and predictor.config.variant == "up":
            latent = predictor.encode_scene(views, intr)
        for k, mode in targets:
            gt = dataset.image(sid, k)
            camvec = None
            if predictor == "copy":
                nearest = min((i, j), key=lambda idx: (abs(idx - k), idx))
                pred = dataset.image(sid, nearest).astype(np.float64)
            elif predictor == "oracle":
                img, _ = scenes.raycast_render(dataset.geometry(sid), poses[k], intr)
                pred = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
            elif predictor.config.variant == "up":
                if mapper:
                    pred = lvm.render_controlled(
                        predictor, views, relative_pose(poses[i], poses[k]), intr)
                else:
                    cam_t, pm = predictor.latent_plucker_learn(gt, latent, intr)
                    pred = predictor.decode_view(latent, pm).data.astype(np.float64)
                    c = cam_t.data.astype(np.float64).copy()
                    if c[3] < 0:
                        c[3:] = -c[3:]
                    camvec = tuple(c)
            else:
                rel = relative_pose(poses[i], poses[k])
                if align_steps > 0:
                    rel = align_target_pose(
                        lambda p: predictor.forward_ptlvsm(views, p, intr).data,
                        gt, rel, steps=align_steps)
                pred = predictor.forward_ptlvsm(views, rel, intr).data.astype(np.float64)
            rows.append(MetricRow(sid, k, mode, bucket,
                                  metrics.psnr(pred, gt), metrics.ssim(pred, gt),
                                  camvec))
    return EvalReport(rows, _aggregate(rows))


# ---------------------------------------------------------------------------
# Evaluation-time pose alignment


def align_target_pose(render_fn, gt_image, init: Pose, steps: int = 300,
                      lr: float = 0.01, eps: float = 1e-3,
                      early_stop: float = 0.0) -> Pose:
    """Optimize the 7-D camera vector so render_fn(pose) matches gt_image.

    render_fn only needs to be evaluable: gradients come from central
    differences on the camera-vector components, driven by Adam. Returns
    the best pose encountered (never worse than the initialization).
    """
    gt = np.asarray(gt_image, dtype=np.float64)

    def loss_of(c):
        img = np.asarray(render_fn(camgeo.camvec_to_pose(c)), dtype=np.float64)
        v = float(((img - gt) ** 2).mean())
        if not np.isfinite(v):
            raise HarnessError("align_target_pose: non-finite loss")
        return v

    c = camgeo.pose_to_camvec(init).copy()
    best_c = c.copy()
    best_loss = loss_of(c)
    m = np.zeros(7)
    v = np.zeros(7)
    b1, b2, aeps = 0.9, 0.999, 1e-8
    for step in range(1, steps + 1):
        g = np.zeros(7)
        for idx in range(7):
            cp = c.copy(); cp[idx] += eps
            cm = c.copy(); cm[idx] -= eps
            g[idx] = (loss_of(cp) - loss_of(cm)) / (2 * eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** step)
        vh = v / (1 - b2 ** step)
        c = c - lr * mh / (np.sqrt(vh) + aeps)
        c[3:7] /= np.linalg.norm(c[3:7])
        cur = loss_of(c)
        if cur < best_loss:
            best_loss = cur
            best_c = c.copy()
        if best_loss <= early_stop:
            break
    return camgeo.camvec_to_pose(best_c)


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepReport:
    axis: str
    points: list          # dicts, sorted along the axis
    config_hash: str

    def save(self, path) -> None:
        if not self.points:
            raise HarnessError("SweepReport: no points")
        keys = list(self.points[0])
        lines = [",".join(keys)]
        for p in self.points:
            lines.append(",".join(str(p[k]) for k in keys))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep_scaling(dataset: Dataset, counts: list, variants=("up", "pt"),
                  config_overrides: dict = None, steps: int = 2000,
                  lr: float = 4e-4, batch_size: int = 4, seed: int = 0,
                  subset_seed: int = 0, cache_dir=None, limit: int = None,
                  callback=None) -> SweepReport:
    """Train one model per (variant, train-scene count) with identical seeds
    and step budgets; evaluate every run on the shared test split."""
    counts = sorted(counts)
    subs = {c: scenes.subset(dataset.manifest, count=c, seed=subset_seed) for c in counts}
    for small, big in zip(counts[:-1], counts[1:]):
        if not set(subs[small].train) <= set(subs[big].train):
            raise HarnessError(f"subsets not nested: {small} not within {big}")
    spec = {"counts": counts, "variants": list(variants), "steps": steps,
            "lr": lr, "batch": batch_size, "seed": seed,
            "overrides": config_overrides or {},
            "data": dataset_fingerprint(dataset.manifest)}
    points = []
    for count in counts:
        point = {"train_scenes": count}
        for variant in variants:
            cfg = lvm.ModelConfig.desk(variant, seed=seed, **(config_overrides or {}))
            model = train_model(cfg, dataset, steps, lr, batch_size, seed,
                                manifest=subs[count], cache_dir=cache_dir,
                                callback=callback)
            report = eval_run(model, dataset, modes=("interp",), limit=limit)
            point[f"{variant}_psnr"] = round(report.aggregates["interp_psnr"], 4)
            point[f"{variant}_ssim"] = round(report.aggregates["interp_ssim"], 4)
            point["count"] = report.aggregates["interp_count"]
        points.append(point)
    return SweepReport("train_scenes", points, config_hash(spec))


def sweep_noise(dataset: Dataset, sigma2_list: list, manifest: DatasetManifest = None,
                config_overrides: dict = None, steps: int = 2000, lr: float = 4e-4,
                batch_size: int = 4, seed: int = 0, cache_dir=None,
                limit: int = None, callback=None) -> SweepReport:
    """Pose-noise ablation: posed-target models trained on noised poses vs
    one unposed model trained on the same images, evaluated clean.

    The unposed training never reads pose fields, so its row is computed
    once and must be identical across noise levels (asserted)."""
    manifest = manifest or dataset.manifest
    base = {"steps": steps, "lr": lr, "batch_size": batch_size, "seed": seed}
    up_cfg = lvm.ModelConfig.desk("up", seed=seed, **(config_overrides or {}))
    up_model = train_model(up_cfg, dataset, manifest=manifest, cache_dir=cache_dir,
                           callback=callback, **base)
    up_report = eval_run(up_model, dataset, modes=("interp",), limit=limit)
    up_psnr = round(up_report.aggregates["interp_psnr"], 4)
    points = []
    for sigma2 in sorted(sigma2_list):
        cfg = lvm.ModelConfig.desk("pt", seed=seed, **(config_overrides or {}))
        model = train_model(cfg, dataset, manifest=manifest, noise_sigma2=sigma2,
                            noise_seed=seed + 1, cache_dir=cache_dir,
                            callback=callback, **base)
        report = eval_run(model, dataset, modes=("interp",), limit=limit)
        points.append({
            "sigma2": sigma2,
            "pt_psnr": round(report.aggregates["interp_psnr"], 4),
            "pt_ssim": round(report.aggregates["interp_ssim"], 4),
            "up_psnr": up_psnr,
            "count": report.aggregates["interp_count"],
        })
    ups = {p["up_psnr"] for p in points}
    if len(ups) > 1:
        raise HarnessError(f"unposed rows differ across noise levels: {ups}")
    spec = {"sigma2": sorted(sigma2_list), **base,
            "overrides": config_overrides or {},
            "data": dataset_fingerprint(manifest)}
    return SweepReport("sigma2", points, config_hash(spec))


# ---------------------------------------------------------------------------
# Attention and feature analyses


@dataclass
class AttnBlock:
    """Cross-view attention block, rows renormalized to sum to 1.

    matrix[i, j] is the (renormalized) attention from patch i of the query
    view to patch j of the key view; grid is the patch-grid side length.
    """

    matrix: np.ndarray
    grid: int
    query_view: int
    key_view: int


def attn_extract(model: lvm.Model, views, intr: Intrinsics) -> list:
    """Head-averaged last-layer cross-view attention for a 2-view input.

    For the unposed variant the final encoder layer is captured; for the
    posed-target variant the final layer of the joint stack. Returns
    [view0->view1, view1->view0] blocks.
    """
    if len(views) != 2:
        raise HarnessError(f"attn_extract: exactly 2 views required, got {len(views)}")
    cap = []
    if model.config.variant == "up":
        model.encode_scene(views, intr, capture=cap)
    else:
        model.forward_ptlvsm(views, Pose.identity(), intr, capture=cap)
    att = cap[-1].mean(axis=0)  # head average, (L_total, L_total)
    n = model.config.tokens_per_view
    grid = model.config.grid
    blocks = []
    for qv, kv in ((0, 1), (1, 0)):
        block = att[qv * n:(qv + 1) * n, kv * n:(kv + 1) * n].copy()
        sums = block.sum(axis=1, keepdims=True)
        sums[sums <= 0] = 1.0
        blocks.append(AttnBlock(block / sums, grid, qv, kv))
    return blocks


def attn_corr_score(block: AttnBlock, gt_map: np.ndarray) -> float:
    """Fraction of patches whose top-1 attended patch lies within a 1-patch
    radius of the ground-truth correspondence (over defined patches)."""
    defined = np.nonzero(gt_map >= 0)[0]
    if defined.size == 0:
        raise HarnessError("attn_corr_score: no patches with defined correspondence")
    g = block.grid
    top = np.argmax(block.matrix, axis=1)
    hits = 0
    for i in defined:
        ti, gi = top[i], gt_map[i]
        if max(abs(ti // g - gi // g), abs(ti % g - gi % g)) <= 1:
            hits += 1
    return hits / defined.size


def random_baseline_score(grid: int) -> float:
    """Expected within-1-patch-radius hit rate of a uniform random guess."""
    return 9.0 / (grid * grid)


def feature_similarity(tokens_a: np.ndarray, tokens_b: np.ndarray) -> np.ndarray:
    """Min-max normalized cosine similarity matrix between token sets."""
    a = np.asarray(tokens_a, dtype=np.float64)
    b = np.asarray(tokens_b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise HarnessError(f"feature_similarity: widths differ {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise HarnessError("feature_similarity: zero-norm token")
    s = (a / na[:, None]) @ (b / nb[:, None]).T
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def patch_features(model: lvm.Model, image) -> np.ndarray:
    """Raw patch-tokenizer features of one image (no transformer layers)."""
    return nn.patchify(model.store, "tok", np.asarray(image, dtype=np.float32),
                       model.config.patch).data


def tokenizer_similarity_block(model: lvm.Model, views) -> AttnBlock:
    """Similarity of the raw patch-tokenizer features across two views (the
    pretrained-feature-style baseline for the correspondence score)."""
    sim = feature_similarity(patch_features(model, views[0]),
                             patch_features(model, views[1]))
    return AttnBlock(sim / np.maximum(sim.sum(axis=1, keepdims=True), 1e-12),
                     model.config.grid, 0, 1)


def save_attention_grid(block: AttnBlock, path) -> None:
    """8-bit grayscale grid: cell (i) shows query patch i's attention map."""
    g = block.grid
    m = block.matrix
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.full_like(m, 0.5)
    cells = norm.reshape(g, g, g, g)  # query row, query col, key row, key col
    tile = cells.transpose(0, 2, 1, 3).reshape(g * g, g * g)
    img = np.clip(np.rint(tile * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Latent pair export


@dataclass
class LatentPairTable:
    rows: list  # (scene_id, view_index, latent 7-vector, gt 7-vector)
    diagnostic: dict

    HEADER = ("scene_id,view," +
              ",".join(f"lat_{c}" for c in ("tx", "ty", "tz", "qw", "qx", "qy", "qz")) + "," +
              ",".join(f"gt_{c}" for c in ("tx", "ty", "tz", "qw", "qx", "qy", "qz")))

    def save(self, path) -> None:
        lines = [self.HEADER]
        for sid, k, lat, gt in self.rows:
            lines.append(f"{sid},{k}," +
                         ",".join(f"{x:.8f}" for x in lat) + "," +
                         ",".join(f"{x:.8f}" for x in gt))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_latent_pairs(model: lvm.Model, dataset: Dataset,
                        manifest: DatasetManifest = None, split: str = "test",
                        limit: int = None) -> LatentPairTable:
    """One row per evaluated target: the learner's camera vector paired with
    the ground-truth vector in the normalized frame, plus a least-squares
    affine-fit diagnostic from latent to real space."""
    if model.config.variant != "up":
        raise HarnessError("export_latent_pairs: needs the unposed variant")
    manifest = manifest or dataset.manifest
    ids = manifest.test if split == "test" else manifest.train
    if limit is not None:
        ids = ids[:limit]
    intr = dataset.intrinsics
    rows = []
    for sid in ids:
        task = dataset.task(sid)
        poses = dataset.poses(sid)
        i, j = task.inputs
        views = [dataset.image(sid, i), dataset.image(sid, j)]
        latent = model.encode_scene(views, intr)
        for k in task.interp + task.extrap:
            cam_t, _ = model.latent_plucker_learn(dataset.image(sid, k), latent, intr)
            lat = cam_t.data.astype(np.float64).copy()
            if lat[3] < 0:
                lat[3:] = -lat[3:]
            gt = camgeo.pose_to_camvec(relative_pose(poses[i], poses[k]))
            rows.append((sid, k, lat, gt))
    if not rows:
        raise HarnessError("export_latent_pairs: no rows")
    lat = np.array([r[2] for r in rows])
    gt = np.array([r[3] for r in rows])
    raw = float(np.linalg.norm(lat - gt, axis=1).mean())
    x = np.concatenate([lat, np.ones((len(rows), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(x, gt, rcond=None)
    fitted = x @ coef
    res = float(np.linalg.norm(fitted - gt, axis=1).mean())
    diag = {"rows": len(rows), "raw_mismatch": raw, "linear_fit_residual": res}
    return LatentPairTable(rows, diag)

"""The view-synthesis networks and their training loop.

Two variants share one code base:
  * "up": encoder over input views -> scene latent; a bottlenecked learner
    reads the ground-truth target image plus the latent and predicts a 7-D
    camera vector, which is expanded to a per-pixel Plucker map inside the
    graph; the decoder renders from (latent, Plucker queries). No pose
    annotation is ever read.
  * "pt": decoder-only; the target pose is given (relative to input view 1)
    and converted to Plucker queries directly.

The first input view is marked by adding a linearly projected Plucker map
of the identity camera to its tokens; without that mark the token sequence
would be view-permutation symmetric and the canonical frame undefined.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import camgeo, checkpoint, nn
from .autodiff import ParamStore, PrimitiveError, Tensor
from .camgeo import Intrinsics, Pose


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    resolution: int = 32
    patch: int = 4
    width: int = 128
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 6
    learner_layers: int = 2
    variant: str = "up"
    lam: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("up", "pt"):
            raise ValueError(f"variant must be 'up' or 'pt', got {self.variant!r}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if min(self.enc_layers, self.dec_layers, self.learner_layers) < 1:
            raise ValueError("all layer counts must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.resolution % self.patch:
            raise ValueError(f"resolution {self.resolution} not divisible by patch {self.patch}")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def tokens_per_view(self) -> int:
        return self.grid * self.grid

    @staticmethod
    def desk(variant: str = "up", **overrides) -> "ModelConfig":
        """Desk-scale defaults; 'pt' is a single 9-layer stack."""
        base = dict(resolution=32, patch=4, width=128, heads=4)
        if variant == "pt":
            base.update(enc_layers=1, dec_layers=9, learner_layers=1)
        else:
            base.update(enc_layers=3, dec_layers=6, learner_layers=2)
        base.update(overrides)
        return ModelConfig(variant=variant, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class SceneLatent:
    """Token matrix produced by the encoder over all input views."""

    tokens: Tensor
    n_views: int
    tokens_per_view: int


def _rotmat_nodes(q: Tensor) -> Tensor:
    """3x3 rotation matrix of a unit quaternion, built from primitives."""
    w = ad.slice_(q, 0, 0, 1)
    x = ad.slice_(q, 0, 1, 2)
    y = ad.slice_(q, 0, 2, 3)
    z = ad.slice_(q, 0, 3, 4)
    one = ad.const(np.ones(1, dtype=ad.DTYPE))

    def two(a, b):
        return ad.scale(ad.mul(a, b), 2.0)

    r00 = ad.sub(one, ad.scale(ad.add(ad.mul(y, y), ad.mul(z, z)), 2.0))
    r01 = ad.sub(two(x, y), two(w, z))
    r02 = ad.add(two(x, z), two(w, y))
    r10 = ad.add(two(x, y), two(w, z))
    r11 = ad.sub(one, ad.scale(ad.add(ad.mul(x, x), ad.mul(z, z)), 2.0))
    r12 = ad.sub(two(y, z), two(w, x))
    r20 = ad.sub(two(x, z), two(w, y))
    r21 = ad.add(two(y, z), two(w, x))
    r22 = ad.sub(one, ad.scale(ad.add(ad.mul(x, x), ad.mul(y, y)), 2.0))
    rows = ad.concat([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=0)
    return ad.reshape(rows, (3, 3))


_canon_cache: dict = {}


def canonical_plucker(intr: Intrinsics) -> np.ndarray:
    """Plucker map of the identity camera (float32, cached)."""
    if intr not in _canon_cache:
        _canon_cache[intr] = camgeo.plucker_map(Pose.identity(), intr).astype(np.float32)
    return _canon_cache[intr]


def plucker_from_camvec(camvec: Tensor, intr: Intrinsics) -> Tensor:
    """Differentiable expansion of a 7-D camera vector to an (H, W, 6)
    Plucker map; gradients flow back into all 7 components."""
    dirs_cam = camgeo.camera_dirs(intr).reshape(-1, 3).astype(np.float32)
    t = ad.slice_(camvec, 0, 0, 3)
    q = ad.l2norm(ad.slice_(camvec, 0, 3, 7))
    r = _rotmat_nodes(q)
    d = ad.l2norm(ad.matmul(ad.const(dirs_cam), ad.transpose(r)))
    tx = ad.slice_(t, 0, 0, 1)
    ty = ad.slice_(t, 0, 1, 2)
    tz = ad.slice_(t, 0, 2, 3)
    dx = ad.slice_(d, 1, 0, 1)
    dy = ad.slice_(d, 1, 1, 2)
    dz = ad.slice_(d, 1, 2, 3)
    mx = ad.sub(ad.mul(ty, dz), ad.mul(tz, dy))
    my = ad.sub(ad.mul(tz, dx), ad.mul(tx, dz))
    mz = ad.sub(ad.mul(tx, dy), ad.mul(ty, dx))
    pm = ad.concat([mx, my, mz, ad.slice_(d, 1, 0, 3)], axis=1)
    return ad.reshape(pm, (intr.height, intr.width, 6))


class Model:
    """Parameter store plus the forward passes for one config."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore()
        self._init_params()

    # -- construction -------------------------------------------------------

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, heads, patch = cfg.width, cfg.heads, cfg.patch
        n_tok = cfg.tokens_per_view
        nn.init_patchify(self.store, "tok", patch, 3, d, n_tok, rng)
        nn.init_plucker_proj(self.store, "canon", patch, d, rng)
        if cfg.variant == "up":
            nn.init_stack(self.store, "enc", cfg.enc_layers, d, heads, rng)
            nn.init_patchify(self.store, "lrn.tok", patch, 3, d, n_tok, rng)
            nn.init_stack(self.store, "lrn", cfg.learner_layers, d, heads, rng)
            # Head starts at the identity camera: zero weight, unit-w bias.
            nn.init_linear(self.store, "lrn.head", d, 7, rng, zero=True,
                           bias=np.array([0, 0, 0, 1, 0, 0, 0], dtype=np.float32))
        nn.init_plucker_proj(self.store, "dec.query", patch, d, rng)
        self.store.add("dec.qpos", nn.trunc_normal(rng, (n_tok, d)))
        nn.init_stack(self.store, "dec", cfg.dec_layers, d, heads, rng)
        nn.init_unpatchify(self.store, "dec.head", d, patch, rng)

    @property
    def has_mapper(self) -> bool:
        return "mapper.A" in self.store

    def add_mapper(self) -> None:
        if not self.has_mapper:
            self.store.add("mapper.A", np.eye(7, dtype=np.float32))
            self.store.add("mapper.b", np.zeros(7, dtype=np.float32))

    # -- forward passes -----------------------------------------------------

    def _check_image(self, image, what="image"):
        cfg = self.config
        a = np.asarray(image)
        if a.shape != (cfg.resolution, cfg.resolution, 3):
            raise PrimitiveError(
                f"{what} shape {a.shape} does not match configured resolution "
                f"{cfg.resolution}x{cfg.resolution}x3"
            )
        return a.astype(ad.DTYPE, copy=False)

    def _view_tokens(self, views, intr: Intrinsics) -> Tensor:
        """Tokenize input views; view 1 gets the canonical-Plucker mark."""
        if len(views) < 1:
            raise PrimitiveError("need at least one input view")
        toks = []
        for i, v in enumerate(views):
            t = nn.patchify(self.store, "tok", self._check_image(v, f"view {i}"), self.config.patch)
            if i == 0:
                inj = nn.plucker_tokens(self.store, "canon", canonical_plucker(intr), self.config.patch)
                t = ad.add(t, inj)
            toks.append(t)
        return ad.concat(toks, axis=0) if len(toks) > 1 else toks[0]

    def encode_scene(self, views, intr: Intrinsics, capture: list = None) -> SceneLatent:
        """Joint encoding of all input views into the scene latent."""
        if self.config.variant != "up":
            raise PrimitiveError("encode_scene: only the 'up' variant has an encoder")
        x = self._view_tokens(views, intr)
        x = nn.run_stack(self.store, "enc", self.config.enc_layers, x,
                         self.config.heads, capture_last=capture)
        return SceneLatent(x, len(views), self.config.tokens_per_view)

    def latent_plucker_learn(self, target_image, latent: SceneLatent, intr: Intrinsics):
        """Predict the 7-D camera vector for the target image and expand it
        to a Plucker map. Returns (camvec Tensor (7,), map Tensor (H, W, 6))."""
        cfg = self.config
        t = nn.patchify(self.store, "lrn.tok",
                        self._check_image(target_image, "target"), cfg.patch)
        n_t = t.shape[0]
        seq = ad.concat([t, latent.tokens], axis=0)
        seq = nn.run_stack(self.store, "lrn", cfg.learner_layers, seq, cfg.heads)
        tgt_rows = ad.slice_(seq, 0, 0, n_t)
        pool = ad.const(np.full((1, n_t), 1.0 / n_t, dtype=ad.DTYPE))
        pooled = ad.matmul(pool, tgt_rows)
        raw = ad.reshape(nn.linear(self.store, "lrn.head", pooled), (7,))
        camvec = ad.concat([ad.slice_(raw, 0, 0, 3), ad.l2norm(ad.slice_(raw, 0, 3, 7))], axis=0)
        return camvec, plucker_from_camvec(camvec, intr)

    def decode_view(self, latent: SceneLatent, target_plucker, capture: list = None) -> Tensor:
        """Render from the scene latent and a target Plucker map (array or
        graph node). Output is (H, W, 3) in (0, 1)."""
        cfg = self.config
        pm = target_plucker
        if not isinstance(pm, Tensor):
            pm = ad.const(np.asarray(pm, dtype=ad.DTYPE))
        if pm.shape != (cfg.resolution, cfg.resolution, 6):
            raise PrimitiveError(f"decode_view: Plucker map shape {pm.shape} mismatch")
        q = ad.add(nn.plucker_tokens(self.store, "dec.query", pm, cfg.patch),
                   self.store["dec.qpos"])
        n_latent = latent.tokens.shape[0]
        seq = ad.concat([latent.tokens, q], axis=0)
        seq = nn.run_stack(self.store, "dec", cfg.dec_layers, seq, cfg.heads,
                           capture_last=capture)
        out = ad.slice_(seq, 0, n_latent, n_latent + q.shape[0])
        return nn.unpatchify(self.store, "dec.head", out, cfg.patch,
                             cfg.resolution, cfg.resolution)

    def forward_uplvsm(self, views, target_image, intr: Intrinsics):
        """Full unposed pass. Returns (prediction, camera-vector) nodes."""
        latent = self.encode_scene(views, intr)
        camvec, pm = self.latent_plucker_learn(target_image, latent, intr)
        return self.decode_view(latent, pm), camvec

    def forward_ptlvsm(self, views, target_pose: Pose, intr: Intrinsics,
                       capture: list = None) -> Tensor:
        """Posed-target pass: one joint stack over input tokens and target
        Plucker queries. target_pose is relative to input view 1."""
        cfg = self.config
        x = self._view_tokens(views, intr)
        pm = camgeo.plucker_map(target_pose, intr).astype(np.float32)
        q = ad.add(nn.plucker_tokens(self.store, "dec.query", ad.const(pm), cfg.patch),
                   self.store["dec.qpos"])
        n_in = x.shape[0]
        seq = ad.concat([x, q], axis=0)
        seq = nn.run_stack(self.store, "dec", cfg.dec_layers, seq, cfg.heads,
                           capture_last=capture)
        out = ad.slice_(seq, 0, n_in, n_in + q.shape[0])
        return nn.unpatchify(self.store, "dec.head", out, cfg.patch,
                             cfg.resolution, cfg.resolution)

    def predict(self, sample: dict, intr: Intrinsics):
        """Numpy prediction for one sample; returns (image, camvec or None)."""
        if self.config.variant == "up":
            pred, camvec = self.forward_uplvsm(sample["views"], sample["target"], intr)
            c = camvec.data.astype(np.float64)
            if c[3] < 0:
                c[3:] = -c[3:]
            return np.asarray(pred.data, dtype=np.float64), c
        pred = self.forward_ptlvsm(sample["views"], sample["target_pose"], intr)
        return np.asarray(pred.data, dtype=np.float64), None

    def render_from_camvec(self, views, camvec: np.ndarray, intr: Intrinsics) -> np.ndarray:
        """Decode an image for an explicit latent camera vector."""
        latent = self.encode_scene(views, intr)
        pm = plucker_from_camvec(ad.const(np.asarray(camvec, dtype=ad.DTYPE)), intr)
        return np.asarray(self.decode_view(latent, pm).data, dtype=np.float64)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        cfg = {"model": self.config.to_dict()}
        if self.has_mapper:
            cfg["mapper"] = {
                "A": [[float(x) for x in row] for row in self.store["mapper.A"].data],
                "b": [float(x) for x in self.store["mapper.b"].data],
            }
        tensors = {k: v for k, v in self.store.state_dict().items()
                   if not k.startswith("mapper.")}
        checkpoint.save_checkpoint(path, cfg, tensors)

    @staticmethod
    def load(path) -> "Model":
        cfg, tensors = checkpoint.load_checkpoint(path)
        model = Model(ModelConfig.from_dict(cfg["model"]))
        model.store.load_state(tensors)
        if "mapper" in cfg and cfg["mapper"] is not None:
            model.add_mapper()
            model.store["mapper.A"].data = np.asarray(cfg["mapper"]["A"], dtype=np.float32)
            model.store["mapper.b"].data = np.asarray(cfg["mapper"]["b"], dtype=np.float32)
        return model


# ---------------------------------------------------------------------------
# Loss and training


def reconstruction_loss(pred: Tensor, gt, lam: float = 0.5,
                        perceptual_hook=None) -> Tensor:
    """MSE plus lam times the pluggable perceptual term (0 when no hook)."""
    if lam < 0:
        raise PrimitiveError(f"reconstruction_loss: lam must be >= 0, got {lam}")
    gt_t = gt if isinstance(gt, Tensor) else ad.const(np.asarray(gt, dtype=ad.DTYPE))
    loss = ad.mse(pred, gt_t)
    if perceptual_hook is not None:
        loss = ad.add(loss, ad.scale(perceptual_hook(pred, gt_t), lam))
    return loss


def sample_loss(model: Model, sample: dict, intr: Intrinsics,
                perceptual_hook=None) -> Tensor:
    """Variant-appropriate forward + loss for one sample.

    The "up" path reads only sample["views"] and sample["target"]; pose
    fields are never touched.
    """
    if model.config.variant == "up":
        pred, _ = model.forward_uplvsm(sample["views"], sample["target"], intr)
    else:
        pred = model.forward_ptlvsm(sample["views"], sample["target_pose"], intr)
    return reconstruction_loss(pred, sample["target"], model.config.lam, perceptual_hook)


def train_step(model: Model, batch: list, intr: Intrinsics, lr: float,
               clip: float = 1.0, perceptual_hook=None) -> float:
    """One optimization step over a batch of samples; returns the loss."""
    model.store.zero_grads()
    total = None
    for sample in batch:
        term = sample_loss(model, sample, intr, perceptual_hook)
        total = term if total is None else ad.add(total, term)
    loss = ad.scale(total, 1.0 / len(batch))
    ad.backward(loss)
    if clip and clip > 0:
        model.store.clip_global_norm(clip)
    model.store.adam_step(lr)
    return float(loss.data)


def run_training(model: Model, sampler, intr: Intrinsics, steps: int, lr: float,
                 batch_size: int, seed: int, clip: float = 1.0,
                 log_every: int = 100, log_path=None, callback=None) -> list:
    """Deterministic training loop.

    sampler(rng, batch_size) -> list of samples. Returns [(step, loss)]
    pairs at the logging cadence and writes them as CSV when log_path is
    given. A non-finite loss aborts with the failing step index.
    """
    rng = np.random.default_rng(seed)
    log = []
    t0 = time.time()
    for step in range(steps):
        batch = sampler(rng, batch_size)
        try:
            loss = train_step(model, batch, intr, lr, clip)
        except PrimitiveError as e:
            raise TrainingError(f"aborted at step {step}: {e}") from e
        if step % log_every == 0 or step == steps - 1:
            log.append((step, loss))
            if callback:
                callback(step, loss, time.time() - t0)
    if log_path is not None:
        lines = ["step,loss"] + [f"{s},{l:.8f}" for s, l in log]
        Path(log_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return log


# ---------------------------------------------------------------------------
# Camera mapper (explicit control)


def mapped_camvec(model: Model, real_camvec: np.ndarray) -> Tensor:
    """A @ c + b with the quaternion part renormalized (graph node)."""
    c = ad.const(np.asarray(real_camvec, dtype=ad.DTYPE).reshape(7, 1))
    out = ad.add(ad.matmul(model.store["mapper.A"], c),
                 ad.reshape(model.store["mapper.b"], (7, 1)))
    v = ad.reshape(out, (7,))
    return ad.concat([ad.slice_(v, 0, 0, 3), ad.l2norm(ad.slice_(v, 0, 3, 7))], axis=0)


def mapper_fit(model: Model, samples: list, intr: Intrinsics, lr: float = 1e-4,
               steps: int = 1000, batch_size: int = 4, seed: int = 0,
               joint: bool = False, log_every: int = 200, callback=None):
    """Fit the linear pose mapper on a posed subset.

    samples: dicts with views/target/target_camvec (target pose expressed
    relative to input view 1, as a 7-vector). The learner is bypassed: the
    decoder's Plucker queries come from A @ c + b. With joint=False only
    (A, b) receive updates; joint=True finetunes the whole model.
    """
    if not samples:
        raise TrainingError("mapper_fit: empty posed subset")
    if model.config.variant != "up":
        raise TrainingError("mapper_fit: requires the 'up' variant")
    model.add_mapper()
    mapper_names = {"mapper.A", "mapper.b"}
    rng = np.random.default_rng(seed)
    log = []
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=min(batch_size, len(samples)))
        model.store.zero_grads()
        total = None
        for i in idx:
            s = samples[i]
            latent = model.encode_scene(s["views"], intr)
            cam = mapped_camvec(model, s["target_camvec"])
            pred = model.decode_view(latent, plucker_from_camvec(cam, intr))
            term = reconstruction_loss(pred, s["target"], model.config.lam)
            total = term if total is None else ad.add(total, term)
        loss = ad.scale(total, 1.0 / len(idx))
        try:
            ad.backward(loss)
        except PrimitiveError as e:
            raise TrainingError(f"mapper_fit aborted at step {step}: {e}") from e
        if not joint:
            for name, t in model.store.params.items():
                if name not in mapper_names:
                    t.grad[...] = 0
        model.store.clip_global_norm(1.0)
        model.store.adam_step(lr)
        if step % log_every == 0 or step == steps - 1:
            log.append((step, float(loss.data)))
            if callback:
                callback(step, float(loss.data))
    return log


def render_controlled(model: Model, views, user_pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Render for an explicit user pose (relative to input view 1) through
    the fitted mapper."""
    if not model.has_mapper:
        raise TrainingError(
            "render_controlled: no mapper in this checkpoint; run mapper_fit "
            "(CLI: map-fit) first"
        )
    cam = mapped_camvec(model, camgeo.pose_to_camvec(user_pose))
    latent = model.encode_scene(views, intr)
    pred = model.decode_view(latent, plucker_from_camvec(cam, intr))
    return np.asarray(pred.data, dtype=np.float64)

"""Network building blocks on top of the autodiff core.

Patch tokenizer (the trained-from-scratch stand-in for a pretrained
backbone), multi-head attention with QKNorm, pre-layernorm transformer
blocks, Plucker-map tokenization and the unpatchify image head.

Weights live in a ParamStore under dotted prefixes ("enc.block0.attn.q.w").
Residual output projections are zero-initialized, so a freshly initialized
block is the identity map.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, PrimitiveError, Tensor


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    a = rng.normal(0.0, std, size=shape)
    return np.clip(a, -2 * std, 2 * std).astype(dtype)


# ---------------------------------------------------------------------------
# Linear / layernorm helpers


def init_linear(store: ParamStore, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, std=0.02, zero=False, bias=None) -> None:
    w = np.zeros((d_in, d_out), dtype=np.float32) if zero else trunc_normal(rng, (d_in, d_out), std)
    store.add(f"{name}.w", w)
    b = np.zeros(d_out, dtype=np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
    store.add(f"{name}.b", b)


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def init_layernorm(store: ParamStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d, dtype=np.float32))
    store.add(f"{name}.b", np.zeros(d, dtype=np.float32))


def apply_layernorm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.layernorm(x, store[f"{name}.g"], store[f"{name}.b"])


# ---------------------------------------------------------------------------
# Patch tokenization


def patch_grid(image, patch: int) -> Tensor:
    """Rearrange (H, W, C) into (L, C*patch*patch) non-overlapping patches."""
    img = image if isinstance(image, Tensor) else ad.const(np.asarray(image, dtype=ad.DTYPE))
    h, w, c = img.shape
    if h % patch or w % patch:
        raise PrimitiveError(f"patch_grid: {h}x{w} image not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = ad.reshape(img, (hp, patch, wp, patch, c))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (hp * wp, patch * patch * c))


def init_patchify(store: ParamStore, prefix: str, patch: int, channels: int,
                  d: int, n_tokens: int, rng, pos=True) -> None:
    init_linear(store, f"{prefix}.proj", channels * patch * patch, d, rng)
    if pos:
        store.add(f"{prefix}.pos", trunc_normal(rng, (n_tokens, d)))


def patchify(store: ParamStore, prefix: str, image, patch: int) -> Tensor:
    """Tokenize an image: flatten patches, project to width D, add the
    learned positional embedding."""
    tokens = linear(store, f"{prefix}.proj", patch_grid(image, patch))
    return ad.add(tokens, store[f"{prefix}.pos"])


def plucker_tokens(store: ParamStore, prefix: str, plucker_map, patch: int) -> Tensor:
    """Project 6-channel Plucker patches to width D (no positional term)."""
    return linear(store, f"{prefix}.proj", patch_grid(plucker_map, patch))


def init_plucker_proj(store: ParamStore, prefix: str, patch: int, d: int, rng,
                      zero=False) -> None:
    init_linear(store, f"{prefix}.proj", 6 * patch * patch, d, rng, zero=zero)


def init_unpatchify(store: ParamStore, prefix: str, d: int, patch: int, rng) -> None:
    init_linear(store, f"{prefix}.head", d, 3 * patch * patch, rng)


def unpatchify(store: ParamStore, prefix: str, tokens: Tensor, patch: int,
               height: int, width: int) -> Tensor:
    """Per-token linear head to pixel values, sigmoid, reassemble (H, W, 3)."""
    hp, wp = height // patch, width // patch
    if tokens.shape[0] != hp * wp:
        raise PrimitiveError(
            f"unpatchify: {tokens.shape[0]} tokens cannot fill a {hp}x{wp} patch grid"
        )
    x = linear(store, f"{prefix}.head", tokens)
    x = ad.reshape(x, (hp, wp, patch, patch, 3))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    x = ad.reshape(x, (height, width, 3))
    return ad.sigmoid(x)


# ---------------------------------------------------------------------------
# Attention and transformer blocks


def init_mha(store: ParamStore, prefix: str, d: int, heads: int, rng) -> None:
    if d % heads:
        raise PrimitiveError(f"init_mha: width {d} not divisible by {heads} heads")
    for name in ("q", "k", "v"):
        init_linear(store, f"{prefix}.{name}", d, d, rng)
    init_linear(store, f"{prefix}.out", d, d, rng, zero=True)
    store.add(f"{prefix}.gain", np.ones((heads, 1, 1), dtype=np.float32))


def mha_qknorm(store: ParamStore, prefix: str, x: Tensor, heads: int,
               capture: list = None) -> Tensor:
    """Multi-head self-attention with per-head L2-normalized queries/keys.

    Logits are gain * (q_hat . k_hat), so |logit| <= |gain| for any input.
    When `capture` is a list, the (heads, L, L) attention probabilities are
    appended as a plain array.
    """
    l, d = x.shape
    hd = d // heads

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (l, heads, hd)), (1, 0, 2))

    q = split_heads(linear(store, f"{prefix}.q", x))
    k = split_heads(linear(store, f"{prefix}.k", x))
    v = split_heads(linear(store, f"{prefix}.v", x))
    qn = ad.l2norm(q)
    kn = ad.l2norm(k)
    logits = ad.mul(ad.matmul(qn, ad.transpose(kn, (0, 2, 1))), store[f"{prefix}.gain"])
    att = ad.softmax(logits)
    if capture is not None:
        capture.append(att.data.copy())
    out = ad.matmul(att, v)
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (l, d))
    return linear(store, f"{prefix}.out", out)


def init_block(store: ParamStore, prefix: str, d: int, heads: int, rng) -> None:
    init_layernorm(store, f"{prefix}.ln1", d)
    init_mha(store, f"{prefix}.attn", d, heads, rng)
    init_layernorm(store, f"{prefix}.ln2", d)
    init_linear(store, f"{prefix}.mlp.fc1", d, 4 * d, rng)
    init_linear(store, f"{prefix}.mlp.fc2", 4 * d, d, rng, zero=True)


def transformer_block(store: ParamStore, prefix: str, x: Tensor, heads: int,
                      capture: list = None) -> Tensor:
    """Pre-layernorm residual block: x + MHA(LN(x)), then x + MLP(LN(x))."""
    h = ad.add(x, mha_qknorm(store, f"{prefix}.attn",
                             apply_layernorm(store, f"{prefix}.ln1", x), heads, capture))
    m = linear(store, f"{prefix}.mlp.fc1", apply_layernorm(store, f"{prefix}.ln2", h))
    m = linear(store, f"{prefix}.mlp.fc2", ad.gelu(m))
    return ad.add(h, m)


def init_stack(store: ParamStore, prefix: str, layers: int, d: int, heads: int, rng) -> None:
    for i in range(layers):
        init_block(store, f"{prefix}.block{i}", d, heads, rng)


def run_stack(store: ParamStore, prefix: str, layers: int, x: Tensor, heads: int,
              capture_last: list = None) -> Tensor:
    for i in range(layers):
        cap = capture_last if i == layers - 1 else None
        x = transformer_block(store, f"{prefix}.block{i}", x, heads, capture=cap)
    return x

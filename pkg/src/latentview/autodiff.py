"""Minimal reverse-mode autodiff over dense numpy arrays.

A fixed primitive set builds a graph of `Tensor` nodes; `backward` runs
reverse-mode accumulation; `gradcheck` is the central-difference oracle
every primitive (and every composed model) is validated against. Training
arrays are float32 by default; building the same graph from float64
tensors gives the 64-bit oracle mode.

Every primitive checks its output for NaN/Inf and raises naming itself, so
a numerical blow-up never propagates silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class PrimitiveError(RuntimeError):
    """Shape mismatch or non-finite result inside a primitive."""


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "op")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"


def const(data, dtype=None) -> Tensor:
    """Wrap an array as a graph constant (no gradient)."""
    a = np.asarray(data)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return Tensor(a, op="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(np.asarray(x, dtype=DTYPE))


def _make(op, data, parents, bwd) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise PrimitiveError(f"{op}: non-finite output")
    return Tensor(data, parents=parents, bwd=bwd, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise PrimitiveError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise PrimitiveError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * a.dtype.type(s)

    def bwd(g):
        return (g * a.dtype.type(s),)

    return _make("scale", out, (a,), bwd)


def sub(a, b) -> Tensor:
    """Convenience composition: a + (-1) * b."""
    return add(a, scale(b, -1.0))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise PrimitiveError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bwd)


def concat(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise PrimitiveError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[axis] for t in ts]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make("concat", out, tuple(ts), bwd)


def slice_(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start < stop <= a.shape[axis]):
        raise PrimitiveError(f"slice: range [{start}, {stop}) invalid for axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.data.ndim))
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("slice", out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise PrimitiveError(f"reshape: cannot view {a.shape} as {shape}")

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise PrimitiveError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make("transpose", out, (a,), bwd)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make("softmax", out, (a,), bwd)


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise PrimitiveError(
            f"layernorm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.all(np.isfinite(var)):
        raise PrimitiveError("layernorm: non-finite variance")
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    y = xc * inv
    out = y * gain.data + bias.data

    def bwd(g):
        gy = g * gain.data
        gmean = gy.mean(axis=-1, keepdims=True)
        gymean = (gy * y).mean(axis=-1, keepdims=True)
        ga = inv * (gy - gmean - y * gymean)
        axes = tuple(range(g.ndim - 1))
        return ga, (g * y).sum(axis=axes), g.sum(axis=axes)

    return _make("layernorm", out, (a, gain, bias), bwd)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    c = a.dtype.type(0.7978845608028654)  # sqrt(2/pi)
    k = a.dtype.type(0.044715)
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = c * (1.0 + 3.0 * k * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * d,)

    return _make("gelu", out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(a.dtype)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), bwd)


def l2norm(a, eps: float = 1e-12) -> Tensor:
    """Normalize to unit L2 norm along the last axis."""
    a = _as_tensor(a)
    x = a.data
    with np.errstate(over="ignore"):
        sq = (x * x).sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(sq)):
        raise PrimitiveError("l2norm: non-finite squared norm")
    n = np.maximum(np.sqrt(sq), a.dtype.type(eps))
    out = x / n

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / n,)

    return _make("l2norm", out, (a,), bwd)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean()

    def bwd(g):
        return (np.full_like(a.data, g / a.data.size),)

    return _make("mean", np.asarray(out), (a,), bwd)


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum()

    def bwd(g):
        return (np.full_like(a.data, g),)

    return _make("sum", np.asarray(out), (a,), bwd)


def mse(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise PrimitiveError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = (diff * diff).mean()

    def bwd(g):
        d = g * 2.0 / diff.size * diff
        return d.astype(a.dtype, copy=False), (-d).astype(b.dtype, copy=False)

    return _make("mse", np.asarray(out), (a, b), bwd)


PRIMITIVES = {
    "matmul", "add", "mul", "scale", "concat", "slice", "reshape", "transpose",
    "softmax", "layernorm", "gelu", "sigmoid", "l2norm", "mean", "sum", "mse",
}


# ---------------------------------------------------------------------------
# Reverse pass


def _toposort(root: Tensor):
    order, stack, seen = [], [(root, False)], set()
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of requires_grad leaves.

    Gradients add onto any existing `.grad`, so zero them between steps.
    """
    if loss.data.size != 1:
        raise PrimitiveError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise PrimitiveError("backward: non-finite loss")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = pg.astype(p.dtype, copy=False) if pg.dtype != p.dtype else pg
            else:
                acc += pg


# ---------------------------------------------------------------------------
# Parameters and Adam


class ParamStore:
    """Named trainable parameters plus their Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, array) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(array), requires_grad=True, op="param")
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0

    def grads(self) -> dict:
        return {k: t.grad for k, t in self.params.items()}

    def state_dict(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, arr in state.items():
            t = self.params[k]
            if t.data.shape != arr.shape:
                raise PrimitiveError(f"load_state: {k} shape {arr.shape} != {t.data.shape}")
            t.data = np.asarray(arr, dtype=t.dtype).copy()

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def clip_global_norm(self, max_norm: float) -> float:
        norm = self.global_grad_norm()
        if norm > max_norm > 0:
            s = np.float32(max_norm / norm)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad *= s
        return norm

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, grads: dict = None) -> None:
        """Bias-corrected Adam over all parameters; increments the counter."""
        if grads is None:
            grads = self.grads()
        for name, g in grads.items():
            if g is None:
                continue
            t = self.params[name]
            if g.shape != t.data.shape:
                raise PrimitiveError(
                    f"adam_step: grad shape {g.shape} != param {name!r} shape {t.data.shape}"
                )
        self.step += 1
        b1 = np.float32(beta1)
        b2 = np.float32(beta2)
        c1 = 1.0 - beta1 ** self.step
        c2 = 1.0 - beta2 ** self.step
        for name, g in grads.items():
            if g is None:
                continue
            t = self.params[name]
            g = g.astype(t.dtype, copy=False)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / t.dtype.type(c1)
            vh = v / t.dtype.type(c2)
            t.data = t.data - t.dtype.type(lr) * mh / (np.sqrt(vh) + t.dtype.type(eps))


def adam_step(store: ParamStore, grads: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    store.adam_step(lr, beta1, beta2, eps, grads=grads)
    return store


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradReport:
    """Max relative error per parameter, analytic vs central differences."""

    per_param: dict

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def worst(self):
        if not self.per_param:
            return None, 0.0
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def gradcheck(f, params: dict, eps: float = 1e-4, samples_per_param: int = None,
              seed: int = 0) -> GradReport:
    """Compare backward() against central differences.

    f: () -> scalar Tensor, rebuilt from `params` (dict name -> Tensor) on
    every call. With samples_per_param=None every component is checked;
    otherwise a seeded sample per parameter. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if eps <= 0:
        raise ValueError("gradcheck: eps must be positive")
    for t in params.values():
        t.grad = np.zeros_like(t.data)
    loss = f()
    if loss.data.size != 1:
        raise PrimitiveError(f"gradcheck: f must return a scalar, got {loss.shape}")
    backward(loss)
    analytic = {k: t.grad.copy() for k, t in params.items()}

    rng = np.random.default_rng(seed)
    report = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise PrimitiveError(f"gradcheck: non-finite f at {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return GradReport(report)


def gradcheck64(f, params: dict, eps: float = 1e-4, samples_per_param: int = None,
                seed: int = 0) -> GradReport:
    """gradcheck in 64-bit oracle mode for a float32 parameter set.

    float32 -> float64 casting is exact, so this checks the gradients of
    the model at its exact 32-bit weights while keeping the central
    differences above the rounding noise floor. Parameters are restored on
    exit.
    """
    originals = {k: t.data for k, t in params.items()}
    try:
        for t in params.values():
            t.data = t.data.astype(np.float64)
        return gradcheck(f, params, eps=eps, samples_per_param=samples_per_param, seed=seed)
    finally:
        for k, t in params.items():
            t.data = originals[k]

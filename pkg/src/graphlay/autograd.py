"""Reverse-mode automatic differentiation over a closed set of numpy ops.

Everything runs in float64.  The op set is exactly what the encoder-decoder
and the graph encoder need: broadcast arithmetic, 2-D matmul, concat/narrow,
softmax, fused layer norm and cross entropy, ELU/LeakyReLU/GELU, and
embedding lookup.  ``grad_check`` verifies any scalar-valued closure against
central finite differences.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backprop=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # Inference-only subgraphs are dropped so generation carries no tape.
        self._parents = parents if self.requires_grad else ()
        self._backprop = backprop if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def backprop(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))

    def backprop(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def backprop(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, parents=(a,))

    def backprop(g):
        _accumulate(a, g * s)

    out._backprop = backprop if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backprop(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out._backprop = backprop if out.requires_grad else None
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T, parents=(a,))

    def backprop(g):
        _accumulate(a, g.T)

    out._backprop = backprop if out.requires_grad else None
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def backprop(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(idx)])
            offset += size

    out._backprop = backprop if out.requires_grad else None
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx], parents=(a,))

    def backprop(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    out._backprop = backprop if out.requires_grad else None
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def backprop(g):
        _accumulate(a, g.reshape(a.data.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), parents=(a,))

    def backprop(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    out._backprop = backprop if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Nonlinearities


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, alpha * a.data), parents=(a,))

    def backprop(g):
        _accumulate(a, np.where(mask, g, alpha * g))

    out._backprop = backprop if out.requires_grad else None
    return out


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    mask = a.data > 0
    expm1 = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = Tensor(np.where(mask, a.data, expm1), parents=(a,))

    def backprop(g):
        _accumulate(a, np.where(mask, g, g * (expm1 + alpha)))

    out._backprop = backprop if out.requires_grad else None
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t), parents=(a,))

    def backprop(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    out._backprop = backprop if out.requires_grad else None
    return out


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, parents=(a,))

    def backprop(g):
        _accumulate(a, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    out._backprop = backprop if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = Tensor(gain.data * xhat + bias.data, parents=(x, gain, bias))

    def backprop(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    out._backprop = backprop if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Lookup and loss


def embedding(weight: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(weight.data[ids], parents=(weight,))

    def backprop(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        _accumulate(weight, gw)

    out._backprop = backprop if out.requires_grad else None
    return out


def cross_entropy_sum(
    logits: Tensor,
    targets: Sequence[int] | np.ndarray,
    ignore_index: int | None = None,
) -> tuple[Tensor, int]:
    """Summed token negative log-likelihood and the number of counted tokens."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ValueError("cross_entropy_sum expects (T, V) logits and (T,) targets")
    mask = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
    safe_targets = np.where(mask, targets, 0)
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    log_probs = logits.data - m - np.log(z)
    nll = -log_probs[np.arange(len(targets)), safe_targets]
    total = float((nll * mask).sum())
    count = int(mask.sum())
    out = Tensor(total, parents=(logits,))

    def backprop(g):
        probs = e / z
        grad = probs.copy()
        grad[np.arange(len(targets)), safe_targets] -= 1.0
        grad *= mask[:, None] * float(g)
        _accumulate(logits, grad)

    out._backprop = backprop if out.requires_grad else None
    return out, count


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error of reverse-mode gradients against central finite
    differences, sampled over random coordinates of each parameter."""
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        n = p.data.size
        coords = rng.choice(n, size=min(max_coords_per_param, n), replace=False)
        for i in coords:
            original = p.data.flat[i]
            p.data.flat[i] = original + eps
            f_plus = fn().item()
            p.data.flat[i] = original - eps
            f_minus = fn().item()
            p.data.flat[i] = original
            fd = (f_plus - f_minus) / (2 * eps)
            an = float(analytic[name].flat[i])
            rel = abs(fd - an) / max(1e-6, abs(fd) + abs(an))
            worst = max(worst, rel)
    return worst

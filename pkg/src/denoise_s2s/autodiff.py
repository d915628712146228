"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers how it was produced; backward()
walks the recorded graph in reverse topological order and accumulates
gradients into leaf tensors that require them. The op set is closed: exactly
what the encoder-decoder model needs, each with a hand-derived vector-Jacobian
product that is checked against central finite differences in the tests.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Result tensor; records the graph edge only when grads can flow."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf that
    requires grad. Repeated calls without zero_grad accumulate."""
    if loss.data.shape != ():
        raise ValueError("backward called on non-scalar")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports the (L, d) + (d,) bias pattern."""
    if a.data.shape == b.data.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.shape == (a.data.shape[1],):
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,))


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array (no gradient to it); shapes must broadcast to a's."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data + c
    if out.shape != a.data.shape:
        raise ValueError("add_const must not change shape")
    return _node(out, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_rows(a: Tensor, start: int, end: int) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        out[start:end] = g
        return (out,)

    return _node(a.data[start:end].copy(), (a,), vjp)


def slice_cols(a: Tensor, start: int, end: int) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        out[:, start:end] = g
        return (out,)

    return _node(a.data[:, start:end].copy(), (a,), vjp)


def concat_rows(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        grads = []
        ofs = 0
        for n in sizes:
            grads.append(g[ofs : ofs + n])
            ofs += n
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[1] for p in parts]

    def vjp(g):
        grads = []
        ofs = 0
        for n in sizes:
            grads.append(g[:, ofs : ofs + n])
            ofs += n
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"invalid axis {axis} for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU: x * Phi(x) with Phi the standard normal CDF via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a 2D input to zero mean / unit variance, then
    apply the elementwise affine (gain, bias)."""
    if x.data.ndim != 2:
        raise ValueError("layer_norm expects a 2D input")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("gain/bias must match the last dimension")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("ids must be a flat sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("token id out of range")

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _node(table.data[ids], (table,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy_smoothed(logits: Tensor, targets, loss_mask, smoothing: float) -> Tensor:
    """Label-smoothed cross entropy, averaged over positions with mask 1.

    Per masked position: -[(1-s)*log p(target) + s/(V-1) * sum_{v != target}
    log p(v)]. smoothing=0 reduces to plain cross entropy.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=np.float64)
    n, v = logits.data.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValueError("targets/loss_mask length must match logits rows")
    n_sup = mask.sum()
    if n_sup == 0:
        raise ValueError("no supervised positions")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz

    rows = np.arange(n)
    lp_target = logp[rows, targets]
    off = smoothing / (v - 1) if v > 1 else 0.0
    per_pos = -((1.0 - smoothing) * lp_target + off * (logp.sum(axis=1) - lp_target))
    loss = (per_pos * mask).sum() / n_sup

    def vjp(g):
        p = np.exp(logp)
        q = np.full((n, v), off)
        q[rows, targets] = 1.0 - smoothing
        return ((p - q) * (mask[:, None] * (float(g) / n_sup)),)

    return _node(np.asarray(loss), (logits,), vjp)

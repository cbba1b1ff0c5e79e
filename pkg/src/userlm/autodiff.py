"""Dense float64 tensors with taped reverse-mode differentiation.

Everything numeric in this package runs on these tensors. Forward ops are
plain numpy; when a Tape is active, each op appends one node (output,
parents, backward closure) so that walking the tape in reverse replays the
graph in reverse topological order, visiting every node exactly once.
Gradients accumulate into ``Tensor.grad`` and are bit-deterministic: same
inputs, same tape, same grads.

A central-difference gradient checker (`check_gradients`) is the
independent oracle for every op and for full model losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64

_SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


class Tensor:
    """A dense array plus an optional accumulated gradient.

    Data is immutable by convention after construction (ops always allocate
    new outputs); only ``grad`` mutates, via accumulation during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes through module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: object  # callable(np.ndarray grad_out) -> None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Ops append nodes in execution order, which is a topological order of
    the dataflow graph; ``backward`` walks the list reversed, so every node
    is visited exactly once in reverse topological order. Without an active
    tape, ops run forward-only (evaluation mode).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        if loss.data.ndim != 0:
            raise ValueError(f"backward requires a scalar, got shape {loss.data.shape}")
        loss.grad = np.asarray(seed, dtype=DEFAULT_DTYPE)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


_TAPE_STACK: list[Tape] = []


def _record(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _TAPE_STACK and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE_STACK[-1].nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.matmul(a.data, b.data))
    # numpy's matmul promotes 1-D operands ([k] -> [1,k] / [k,1]) and squeezes
    # the result; the backward mirrors that so vectors work on either side
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1

    def backward(g):
        a2 = a.data[None, :] if a_vec else a.data
        b2 = b.data[:, None] if b_vec else b.data
        if a_vec and b_vec:
            g2 = g.reshape(1, 1)
        elif a_vec:
            g2 = np.expand_dims(g, -2)
        elif b_vec:
            g2 = np.expand_dims(g, -1)
        else:
            g2 = g
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if a_vec:
                ga = np.squeeze(ga, axis=-2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if b_vec:
                gb = np.squeeze(gb, axis=-1)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - t * t))

    return _record(out, (x,), backward)


def gelu(x) -> Tensor:
    """Gaussian error linear unit, tanh approximation (GPT-2 convention)."""
    x = as_tensor(x)
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def backward(g):
        if x.requires_grad:
            dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * xd * xd)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
            x.accumulate_grad(g * dx)

    return _record(out, (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of `weight` by integer index array `ids`."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise IndexError(
            f"token id out of range [0, {weight.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(weight.data[ids])

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids, g)
            weight.accumulate_grad(gw)

    return _record(out, (weight,), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices of `x` along `axis` (adjoint scatters with add)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(x.data, indices, axis=axis))

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            idx = [slice(None)] * x.data.ndim
            idx[axis] = indices
            np.add.at(gx, tuple(idx), g)
            x.accumulate_grad(gx)

    return _record(out, (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _record(out, tuple(tensors), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _record(out, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(g, inverse))

    return _record(out, (x,), backward)


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries of `x` where `mask` is true by `value`."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, value, x.data))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, 0.0, g))

    return _record(out, (x,), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                x.accumulate_grad(np.broadcast_to(ge, x.data.shape).copy())

    return _record(out, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data) | np.isneginf(x.data)):
        raise ValueError("softmax_rows: input contains NaN or +inf")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad(y * (g - inner))

    return _record(out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to zero mean / unit variance,
    then apply the affine transform gamma * xhat + beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(
                _unbroadcast(g * xhat, gamma.data.shape)
            )
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad(inv / d * (d * dxhat - s1 - xhat * s2))

    return _record(out, (x, gamma, beta), backward)


def nll_rows(logits, targets) -> Tensor:
    """Per-row negative log softmax probability of the target index.

    `logits` is [n, vocab], `targets` [n] int. Stable log-sum-exp forward;
    backward is softmax minus one-hot.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.data.shape[0]
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1))
    out = Tensor(lse - z[np.arange(n), targets])

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(n), targets] -= 1.0
            logits.accumulate_grad(p * g[:, None])

    return _record(out, (logits,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(DEFAULT_DTYPE) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter comparison of taped gradients vs central differences."""

    max_rel_err: float
    per_param: dict[str, float]
    failures: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    passed: bool = True

    def __str__(self) -> str:
        lines = [f"gradcheck: max_rel_err={self.max_rel_err:.3e} passed={self.passed}"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: {err:.3e}")
        for name, idx, a, n, rel in self.failures[:20]:
            lines.append(f"  FLAG {name}[{idx}]: analytic={a:.6e} fd={n:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def check_gradients(
    f,
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar function `f()` against
    central finite differences (f(p+h) - f(p-h)) / 2h, per parameter entry.

    Entries where the two agree within `atol` absolutely count as exact;
    otherwise the relative error |a-n| / max(|a|, |n|) is flagged when it
    exceeds `tol`. `f` must close over `params` and return a scalar Tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if loss.data.ndim != 0:
            raise ValueError(f"f must return a scalar, got shape {loss.data.shape}")
        tape.backward(loss)

    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    per_param: dict[str, float] = {}
    failures: list[tuple[str, int, float, float, float]] = []
    max_rel = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            diff = abs(a - num)
            rel = 0.0 if diff <= atol else diff / max(abs(a), abs(num))
            if rel > worst:
                worst = rel
            if rel > tol:
                failures.append((name, i, float(a), float(num), float(rel)))
        per_param[name] = worst
        max_rel = max(max_rel, worst)

    return GradCheckReport(
        max_rel_err=max_rel,
        per_param=per_param,
        failures=failures,
        passed=not failures,
    )


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most `max_norm`."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm

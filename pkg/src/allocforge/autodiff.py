"""Small reverse-mode autodiff over numpy arrays.

Every op that touches a tensor requiring gradients appends a node to the
active :class:`Tape`. Outside a tape, ops only compute values, which keeps
inference rollouts cheap.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_HEADER = "allocforge-checkpoint v1"


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeStateError(RuntimeError):
    pass


_active_tapes: list["Tape"] = []


class Tape:
    """Ordered record of op applications; creation order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.pop()

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            raise TapeStateError("tape already replayed; call reset() before recording")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False


def _current_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class ParamBlock(Tensor):
    """Learnable array with its gradient buffer and Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v", "adam_t")

    def __init__(self, name: str, values: np.ndarray):
        super().__init__(np.array(values, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.adam_t = 0

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        self.grad += g

    @property
    def values(self) -> np.ndarray:
        return self.value

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"ParamBlock({self.name!r}, shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(value)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a.accumulate(g)
        b.accumulate(g)

    return _node(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a.accumulate(g)
        b.accumulate(-g)

    return _node(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * b.value)
        if b.requires_grad:
            b.accumulate(g * a.value)

    return _node(a.value * b.value, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g / b.value)
        if b.requires_grad:
            b.accumulate(-g * a.value / b.value**2)

    return _node(a.value / b.value, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[-1] != b.value.shape[-2 if b.value.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.value.shape} and {b.value.shape} do not chain")

    def bw(g):
        # promote vectors to matrices so one rule covers every case
        av = a.value[None, :] if a.value.ndim == 1 else a.value
        bv = b.value[:, None] if b.value.ndim == 1 else b.value
        if b.value.ndim == 1:
            g = g[..., None]
        if a.value.ndim == 1:
            g = np.expand_dims(g, -2)
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
            a.accumulate(ga.reshape(ga.shape[:-2] + (-1,)) if a.value.ndim == 1 else ga)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                # fold leading axes into one GEMM instead of a batched product plus a sum
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            b.accumulate(gb[..., 0] if b.value.ndim == 1 else gb)

    return _node(a.value @ b.value, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0

    def bw(g):
        x.accumulate(g * pos)

    return _node(x.value * pos, (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)

    def bw(g):
        x.accumulate(g * (1.0 - y * y))

    return _node(y, (x,), bw)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.value)

    def bw(g):
        x.accumulate(g / (1.0 + np.exp(-x.value)))

    return _node(y, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)

    def bw(g):
        x.accumulate(g * y)

    return _node(y, (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x.accumulate(g / x.value)

    return _node(np.log(x.value), (x,), bw)


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.value)

    def bw(g):
        x.accumulate(g * s)

    return _node(np.abs(x.value), (x,), bw)


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x.accumulate(2.0 * g * x.value)

    return _node(x.value * x.value, (x,), bw)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.value.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, shape))

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.value.shape[axis]
    return sum_(x, axis=axis) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.value.shape

    def bw(g):
        x.accumulate(g.reshape(old))

    return _node(x.value.reshape(shape), (x,), bw)


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x.accumulate(np.swapaxes(g, a1, a2))

    return _node(np.swapaxes(x.value, a1, a2), (x,), bw)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            x.accumulate(part)

    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), bw)


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        x.accumulate(full)

    return _node(x.value[idx], (x,), bw)


def masked_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked-out entries get probability exactly 0."""
    x = as_tensor(x)
    s = _softmax_np(x.value, mask, axis)

    def bw(g):
        x.accumulate(s * (g - np.sum(s * g, axis=axis, keepdims=True)))

    return _node(s, (x,), bw)


def masked_log_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Log-softmax along ``axis``; masked-out entries are reported as 0."""
    x = as_tensor(x)
    s = _softmax_np(x.value, mask, axis)
    z = x.value
    if mask is not None:
        # copy: backward runs later and callers may reuse the mask array in between
        m = np.broadcast_to(np.array(mask, dtype=bool), z.shape)
        z = np.where(m, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
        out = z - lse
    if mask is not None:
        out = np.where(m, out, 0.0)
        gmask = m
    else:
        gmask = None

    def bw(g):
        if gmask is not None:
            g = np.where(gmask, g, 0.0)
        x.accumulate(g - s * np.sum(g, axis=axis, keepdims=True))

    return _node(out, (x,), bw)


def _softmax_np(z: np.ndarray, mask, axis: int) -> np.ndarray:
    if np.any(np.isnan(z)):
        raise NumericError("NaN in softmax input")
    if mask is not None:
        m = np.broadcast_to(mask, z.shape)
        z = np.where(m, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    total = np.sum(e, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(total > 0, e / total, 0.0)
    return s


# ---------------------------------------------------------------------------
# composite primitives used by the networks


def scaled_dot_scores(queries, keys) -> Tensor:
    """out[..., i, j] = q_i . k_j / sqrt(d)."""
    q, k = as_tensor(queries), as_tensor(keys)
    if q.value.shape[-1] != k.value.shape[-1]:
        raise DimensionError(f"inner dimensions differ: {q.value.shape[-1]} vs {k.value.shape[-1]}")
    d = q.value.shape[-1]
    if d < 1:
        raise DimensionError("inner dimension must be >= 1")
    return matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))


def softmax_rows(scores, mask=None) -> Tensor:
    return masked_softmax(scores, mask, axis=-1)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "none": lambda x: x, None: lambda x: x}


def mlp_forward(x, layers: Sequence[tuple[ParamBlock, ParamBlock]], activation: str = "relu",
                activate_output: bool = False) -> Tensor:
    """Affine layers with ``activation`` between them; the last layer is linear unless asked."""
    act = ACTIVATIONS[activation]
    h = as_tensor(x)
    for i, (w, b) in enumerate(layers):
        if h.value.shape[-1] != w.value.shape[-2]:
            raise DimensionError(f"layer {w.name}: input width {h.value.shape[-1]} != {w.value.shape[-2]}")
        h = matmul(h, w) + b
        if i < len(layers) - 1 or activate_output:
            h = act(h)
    return h


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MLP:
    """Stack of affine layers. ``stack`` > 0 gives independent weights per leading slot."""

    def __init__(self, name: str, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", stack: int = 0):
        self.name = name
        self.sizes = list(sizes)
        self.activation = activation
        self.layers: list[tuple[ParamBlock, ParamBlock]] = []
        lead = (stack,) if stack else ()
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = ParamBlock(f"{name}.{i}.w", init_uniform(rng, fan_in, lead + (fan_in, fan_out)))
            b_shape = lead + ((1, fan_out) if stack else (fan_out,))
            b = ParamBlock(f"{name}.{i}.b", init_uniform(rng, fan_in, b_shape))
            self.layers.append((w, b))

    def __call__(self, x, activate_output: bool = False) -> Tensor:
        return mlp_forward(x, self.layers, self.activation, activate_output)

    @property
    def blocks(self) -> list[ParamBlock]:
        return [p for layer in self.layers for p in layer]


# ---------------------------------------------------------------------------
# gradients and optimisation


def backward(tape: Tape, loss: Tensor, loss_gradient: float = 1.0) -> None:
    """Replay ``tape`` in reverse, accumulating d(loss)/d(param) into every reachable block."""
    if tape.consumed:
        raise TapeStateError("tape replayed twice without reset")
    tape.consumed = True
    if not loss.requires_grad:
        return
    loss.grad = np.full_like(loss.value, loss_gradient)
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node.grad)
    for node in tape.nodes:
        node.grad = None
        node.backward_fn = None
        node.parents = ()


@contextlib.contextmanager
def frozen(blocks: Iterable[ParamBlock]):
    """Treat ``blocks`` as constants inside the block: no nodes, no gradients."""
    blocks = list(blocks)
    for b in blocks:
        b.requires_grad = False
    try:
        yield
    finally:
        for b in blocks:
            b.requires_grad = True


def zero_grad(blocks: Iterable[ParamBlock]) -> None:
    for b in blocks:
        b.zero_grad()


def clip_grad_norm(blocks: Sequence[ParamBlock], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(b.grad * b.grad)) for b in blocks))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for b in blocks:
            b.grad *= scale
    return total


def adam_step(blocks: Iterable[ParamBlock], learning_rate: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    for b in blocks:
        g = b.grad
        b.adam_t += 1
        b.adam_m *= beta1
        b.adam_m += (1.0 - beta1) * g
        b.adam_v *= beta2
        b.adam_v += (1.0 - beta2) * g * g
        m_hat = b.adam_m / (1.0 - beta1**b.adam_t)
        v_hat = b.adam_v / (1.0 - beta2**b.adam_t)
        b.value -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        b.grad.fill(0.0)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_block: str
    n_checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(fn: Callable[[], Tensor], params: Sequence[ParamBlock], step: float = 1e-5,
               max_per_block: int | None = None, rng: np.random.Generator | None = None,
               atol: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn()`` with central finite differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, atol). With
    ``max_per_block`` only that many random coordinates per block are probed.
    """
    rng = rng or np.random.default_rng(0)
    saved = [p.grad.copy() for p in params]
    zero_grad(params)
    with Tape() as tape:
        out = fn()
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function under test is not finite")
    backward(tape, out)
    analytic = [p.grad.copy() for p in params]
    worst, worst_name, count = 0.0, "", 0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_block is not None and flat.size > max_per_block:
            coords = rng.choice(flat.size, size=max_per_block, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(np.sum(fn().value))
            flat[c] = orig - step
            f_minus = float(np.sum(fn().value))
            flat[c] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"non-finite output probing {p.name}")
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(ga.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            count += 1
            if err > worst:
                worst, worst_name = err, p.name
    for p, g in zip(params, saved):
        p.grad[...] = g
    return GradCheckReport(worst, worst_name, count)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, blocks: Iterable[ParamBlock]) -> None:
    lines = [CHECKPOINT_HEADER]
    for b in blocks:
        shape = ",".join(str(s) for s in b.value.shape)
        lines.append(f"block {b.name} {shape}")
        lines.append(" ".join(float(v).hex() for v in b.value.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not an allocforge checkpoint")
    out: dict[str, np.ndarray] = {}
    it = iter(text[1:])
    for header in it:
        if not header.strip():
            continue
        tag, name, shape_s = header.split(" ")
        if tag != "block":
            raise ValueError(f"{path}: malformed block header {header!r}")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        data = next(it).split()
        out[name] = np.array([float.fromhex(v) for v in data], dtype=np.float64).reshape(shape)
    return out


def load_checkpoint(path: str | Path, blocks: Iterable[ParamBlock]) -> None:
    stored = read_checkpoint(path)
    for b in blocks:
        if b.name not in stored:
            raise KeyError(f"checkpoint lacks block {b.name}")
        if stored[b.name].shape != b.value.shape:
            raise DimensionError(f"block {b.name}: checkpoint shape {stored[b.name].shape} != {b.value.shape}")
        b.value[...] = stored[b.name]

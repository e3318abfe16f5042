"""Minimal reverse-mode tensor engine.

Operations record themselves on a tape (``Graph``) when any input requires a
gradient; ``backward`` replays the tape in reverse.  Values are dense numpy
arrays, 32-bit by default.  Every forward result is checked for NaN/Inf and a
``NumericFault`` is raised immediately rather than letting it propagate.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "ContractViolation",
    "Graph",
    "NumericFault",
    "Tensor",
    "backward",
    "clip_grad_norm",
    "finite_difference_check",
    "no_grad",
    "precision",
]


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericFault(FloatingPointError):
    """An operation produced a non-finite value."""


class _State(threading.local):
    def __init__(self) -> None:
        self.graphs: list[Graph] = []
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for checks)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def current_dtype():
    return _state.dtype


class Graph:
    """Ordered tape of executed operations.

    Use as a context manager to isolate a computation; otherwise a per-thread
    default graph collects operations.
    """

    def __init__(self) -> None:
        self.tape: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Graph":
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.graphs.pop()

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: Callable) -> None:
        self.tape.append((out, inputs, fn))

    def clear(self) -> None:
        self.tape.clear()

    def __len__(self) -> int:
        return len(self.tape)


_default_graphs = threading.local()


def current_graph() -> Graph:
    if _state.graphs:
        return _state.graphs[-1]
    g = getattr(_default_graphs, "graph", None)
    if g is None:
        g = _default_graphs.graph = Graph()
    return g


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_graph", "_leaf")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=_state.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._graph: Graph | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, values: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    # a NaN or Inf anywhere makes the sum non-finite
    if not np.isfinite(np.add.reduce(values, axis=None)):
        norms = ", ".join(f"{float(np.linalg.norm(t.values)):.4g}" for t in inputs)
        raise NumericFault(f"{kind}: non-finite output (input norms: {norms})")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._leaf = False
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        g = current_graph()
        out._graph = g
        g.record(out, inputs, fn)
    else:
        out._graph = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        v = a.values + b.values
    except ValueError as e:
        raise ContractViolation(f"add: shapes {a.shape} and {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _make("add", v, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        v = a.values - b.values
    except ValueError as e:
        raise ContractViolation(f"sub: shapes {a.shape} and {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _make("sub", v, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        v = a.values * b.values
    except ValueError as e:
        raise ContractViolation(f"mul: shapes {a.shape} and {b.shape}") from e
    av, bv = a.values, b.values

    def fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make("mul", v, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.values, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    return _make("scale", a.values * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make("relu", np.where(mask, a.values, 0).astype(a.values.dtype), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _make("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    half = a.values.dtype.type(0.5)
    y = half * (1 + np.tanh(half * a.values))
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.values)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise NumericFault("log: non-positive input")
    av = a.values
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def cos(a: Tensor) -> Tensor:
    av = a.values
    return _make("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def sin(a: Tensor) -> Tensor:
    av = a.values
    return _make("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def softplus(a: Tensor) -> Tensor:
    x = a.values
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    half = x.dtype.type(0.5)
    sig = half * (1 + np.tanh(half * x))
    return _make("softplus", y.astype(x.dtype), (a,), lambda g: (g * sig,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"minimum: shapes {a.shape} and {b.shape}")
    take_a = a.values <= b.values
    v = np.where(take_a, a.values, b.values)
    return _make("minimum", v, (a, b), lambda g: (g * take_a, g * ~take_a))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.values >= lo) & (a.values <= hi)
    v = np.clip(a.values, lo, hi).astype(a.values.dtype)
    return _make("clip", v, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim not in (1, 2) or b.values.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def fn(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), fn)


def _sig(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def gru_cell(gx: Tensor, h: Tensor, w_h: Tensor, b_h: Tensor) -> Tensor:
    """Fused GRU update from a precomputed input projection ``gx`` (N, 3H), gates ordered r, z, n.

    h' = n + z * (h - n), with n = tanh(gx_n + r * (h @ W_hn + b_hn)).
    """
    H = h.shape[-1]
    if gx.shape[-1] != 3 * H or w_h.shape != (H, 3 * H) or b_h.shape != (3 * H,) or gx.shape[0] != h.shape[0]:
        raise ContractViolation(f"gru_cell: gx {gx.shape}, h {h.shape}, w_h {w_h.shape}, b_h {b_h.shape}")
    hv, gxv, whv = h.values, gx.values, w_h.values
    gh = hv @ whv + b_h.values
    rz = _sig(gxv[:, : 2 * H] + gh[:, : 2 * H])
    r, z = rz[:, :H], rz[:, H:]
    hn = gh[:, 2 * H :]
    n = np.tanh(gxv[:, 2 * H :] + r * hn)
    out = n + z * (hv - n)

    def fn(g):
        da_n = g * (1 - z) * (1 - n * n)
        d_rz = np.concatenate([da_n * hn, g * (hv - n)], axis=1) * rz * (1 - rz)
        dgx = np.concatenate([d_rz, da_n], axis=1)
        dgh = np.concatenate([d_rz, da_n * r], axis=1)
        return dgx, g * z + dgh @ whv.T, hv.T @ dgh, dgh.sum(axis=0)

    return _make("gru_cell", out, (gx, h, w_h, b_h), fn)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Fused LSTM update, gates ordered i, f, g, o.  Returns [h', c'] concatenated on the last axis."""
    H = h.shape[-1]
    if (w_x.shape != (x.shape[-1], 4 * H) or w_h.shape != (H, 4 * H) or b.shape != (4 * H,)
            or c.shape != h.shape or x.shape[0] != h.shape[0]):
        raise ContractViolation(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, w_x {w_x.shape}")
    xv, hv, cv, wxv, whv = x.values, h.values, c.values, w_x.values, w_h.values
    pre = xv @ wxv + hv @ whv + b.values
    i, f = _sig(pre[:, :H]), _sig(pre[:, H : 2 * H])
    gg, o = np.tanh(pre[:, 2 * H : 3 * H]), _sig(pre[:, 3 * H :])
    c_new = f * cv + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def fn(g):
        dh, dc = g[:, :H], g[:, H:]
        dc = dc + dh * o * (1 - tc * tc)
        dpre = np.concatenate(
            [dc * gg * i * (1 - i), dc * cv * f * (1 - f), dc * i * (1 - gg * gg), dh * tc * o * (1 - o)], axis=1)
        return (dpre @ wxv.T, dpre @ whv.T, dc * f, xv.T @ dpre, hv.T @ dpre, dpre.sum(axis=0))

    return _make("lstm_cell", np.concatenate([h_new, c_new], axis=1), (x, h, c, w_x, w_h, b), fn)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int | tuple[int, int] = 1) -> Tensor:
    """Valid cross-correlation.  x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,)."""
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if x.values.ndim != 4 or w.values.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d: input {x.shape} weight {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if kh > h or kw > wd:
        raise ContractViolation(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    xv, wv = x.values, w.values
    # patches: (N, Ho, Wo, Cin, kh, kw)
    s = xv.strides
    patches = np.lib.stride_tricks.as_strided(
        xv, (n, ho, wo, cin, kh, kw), (s[0], s[2] * sh, s[3] * sw, s[1], s[2], s[3]), writeable=False
    )
    cols = patches.reshape(n * ho * wo, cin * kh * kw)
    wmat = wv.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.values
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gm.T @ cols).reshape(wv.shape)
        gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gx = np.zeros_like(xv)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if b is not None else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, fn)


def affine_channel(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """(1 + gamma) * x + beta with (N, C) coefficients broadcast over (H, W) of (N, C, H, W)."""
    if x.values.ndim != 4 or gamma.shape != x.shape[:2] or beta.shape != x.shape[:2]:
        raise ContractViolation(f"affine_channel: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xv = x.values
    scale_ = (1 + gamma.values)[:, :, None, None]
    # x - (0 - beta) equals x + beta, but keeps -0.0 intact when beta is +0.0,
    # so zero coefficients reproduce x bit for bit
    v = xv * scale_ - (0 - beta.values)[:, :, None, None]

    def fn(g):
        return g * scale_, (g * xv).sum(axis=(2, 3)), g.sum(axis=(2, 3))

    return _make("affine-channel-broadcast", v, (x, gamma, beta), fn)


# ---------------------------------------------------------------- reductions / normalisation


def softmax(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (a,), fn)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        v = np.asarray(a.values.sum(), dtype=a.values.dtype)
        return _make("sum", v, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)
    v = a.values.sum(axis=ax)
    return _make("sum", v, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def mean_pool_spatial(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if a.values.ndim != 4:
        raise ContractViolation(f"mean_pool_spatial: expected 4-d input, got {a.shape}")
    shape = a.shape
    hw = shape[2] * shape[3]
    v = a.values.mean(axis=(2, 3))
    return _make("mean-pool-spatial", v, (a,), lambda g: (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),))


def upsample_nearest(a: Tensor, fh: int, fw: int) -> Tensor:
    """(N, C, H, W) -> (N, C, H*fh, W*fw) by repetition."""
    n, c, h, w = a.shape
    v = np.repeat(np.repeat(a.values, fh, axis=2), fw, axis=3)
    return _make("upsample", v, (a,), lambda g: (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- shape


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        v = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"concat: shapes {[t.shape for t in tensors]}") from e
    ax = axis % v.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make("concat", v, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    try:
        v = a.values.reshape(shape)
    except ValueError as e:
        raise ContractViolation(f"reshape: {orig} -> {shape}") from e
    return _make("reshape", v, (a,), lambda g: (g.reshape(orig),))


def slice_(a: Tensor, index) -> Tensor:
    v = a.values[index]
    shape, dtype = a.shape, a.values.dtype

    return _make("slice", np.ascontiguousarray(v), (a,), lambda g: (_SliceGrad(index, g, shape, dtype),))


class _SliceGrad:
    """Gradient of a slice, scattered lazily so many slices of one tensor accumulate in place."""

    __slots__ = ("index", "g", "shape", "dtype")

    def __init__(self, index, g, shape, dtype):
        self.index, self.g, self.shape, self.dtype = index, g, shape, dtype

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape, dtype=self.dtype)
        full[self.index] += self.g
        return full


def split_rows(a: Tensor, n_chunks: int) -> list[Tensor]:
    """Split axis 0 into equal chunks with a single recorded op per chunk."""
    rows = a.shape[0] // n_chunks
    if rows * n_chunks != a.shape[0]:
        raise ContractViolation(f"split_rows: {a.shape[0]} rows into {n_chunks} chunks")
    return [slice_(a, slice(i * rows, (i + 1) * rows)) for i in range(n_chunks)]


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``; clears the tape."""
    if loss.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    # keys whose buffer was allocated here and may be updated in place
    owned: set[int] = set()
    for out, inputs, fn in reversed(graph.tape):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                if isinstance(gi, _SliceGrad):
                    gi = gi.dense()
                t.grad = gi.astype(t.values.dtype, copy=True) if t.grad is None else t.grad + gi
                continue
            key = id(t)
            prev = grads.get(key)
            if isinstance(gi, _SliceGrad):
                if prev is None or key not in owned:
                    base = np.zeros(gi.shape, dtype=gi.dtype) if prev is None else prev.copy()
                    grads[key] = prev = base
                    owned.add(key)
                prev[gi.index] += gi.g
            elif prev is None:
                grads[key] = gi
            elif key in owned:
                prev += gi
            else:
                grads[key] = prev + gi
                owned.add(key)
    graph.clear()


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if total > max_norm:
        coef = max_norm / (total + 1e-6)
        for p in params:
            p.grad = (p.grad * coef).astype(p.values.dtype)
    return total


# ---------------------------------------------------------------- verification


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument closure over ``params`` returning a scalar tensor.
    At most ``max_coords`` coordinates (sampled) are perturbed.
    """
    if h <= 0:
        raise ContractViolation("finite_difference_check: h must be positive")
    params = [params] if isinstance(params, Tensor) else list(params)
    with no_grad():
        a, b = f().item(), f().item()
    if a != b:
        raise ContractViolation("finite_difference_check: f is not deterministic")

    for p in params:
        p.grad = None
    with Graph():
        loss = f()
        backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].values.reshape(-1)
            orig = flat[j].copy()
            flat[j] = orig + h
            up = float(flat[j])
            fp = f().item()
            flat[j] = orig - h
            down = float(flat[j])
            fm = f().item()
            flat[j] = orig
            fd = (fp - fm) / (up - down)
            err = abs(float(analytic[i].reshape(-1)[j]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam with a linearly decaying learning rate.

    The schedule index ``update`` is advanced by :meth:`decay` (once per PPO
    update), independently of the per-step bias-correction counter.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 2.5e-4,
        eps: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        total_updates: int = 1,
    ):
        self.params = list(params)
        self.base_lr = lr
        self.eps = eps
        self.beta1, self.beta2 = betas
        self.total_updates = max(1, int(total_updates))
        self.update = 0
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    @property
    def lr(self) -> float:
        return self.base_lr * max(0.0, 1.0 - self.update / self.total_updates)

    def decay(self) -> None:
        self.update += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for k, p in enumerate(self.params):
            if p.grad is None:
                raise ContractViolation(f"adam_step: missing grad for parameter {p.name or k}")
        self.t += 1
        lr = self.lr
        if lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.values -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.values.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{k}"] = m
            out[f"adam.v.{k}"] = v
        return out

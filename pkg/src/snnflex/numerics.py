"""Dense numerical core.

Arrays are plain ``numpy.ndarray`` (float64). Differentiable computation is
recorded on a :class:`Tape`; every function below accepts either arrays or
:class:`Var` handles and returns the same kind it was given.
"""

from __future__ import annotations

import math
import warnings
import weakref
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Var",
    "Tape",
    "HeavisideGrad",
    "RankDeficientError",
    "NonFiniteError",
    "rng_stream",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "flatten",
    "reshape",
    "add",
    "mul",
    "sum_all",
    "stack",
    "heaviside",
    "multispike",
    "batch_norm",
    "cross_entropy",
    "time_mix",
    "custom_op",
    "sgd_step",
    "cosine_lr",
    "least_squares_fit",
]

# (v, v_th) -> d heaviside(v - v_th) / dv, elementwise
HeavisideGrad = Callable[[np.ndarray, float], np.ndarray]


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent, platform-stable random stream for ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


class NonFiniteError(ValueError, ArithmeticError):
    """A value that must be finite became NaN or infinite."""


class Var:
    """Handle to an array recorded on a tape (or a constant when ``tape`` is None)."""

    __slots__ = ("data", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Tape | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        # weak, so a dropped tape is freed by refcounting instead of waiting for the cycle collector
        self._tape = None if tape is None else weakref.ref(tape)
        self.name = name

    @property
    def tape(self) -> Tape | None:
        return None if self._tape is None else self._tape()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index: int):
        return _index0(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


class Tape:
    """Records primitive ops for one forward pass and replays them backward.

    ``heaviside_grad`` is the default derivative used for every spike node
    recorded on this tape; individual nodes may override it.
    """

    def __init__(self, heaviside_grad: HeavisideGrad | None = None):
        self.heaviside_grad = heaviside_grad
        self._nodes: list[tuple[Var, tuple, Callable]] = []
        self._leaves: dict[str, Var] = {}
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value, name: str | None = None) -> Var:
        """Register a leaf whose gradient should be reported."""
        var = Var(value, self, name)
        if name is not None:
            if name in self._leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self._leaves[name] = var
        return var

    def record(self, data: np.ndarray, inputs: tuple, vjp: Callable) -> Var:
        out = Var(data, self)
        self._nodes.append((out, inputs, vjp))
        return out

    def backward(self, output: Var, grad=None) -> dict[str, np.ndarray]:
        """Propagate ``grad`` (default 1) from ``output``; returns gradients of named leaves."""
        if not self._nodes:
            raise RuntimeError("backward called before any forward op was recorded")
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        seed = np.ones_like(output.data) if grad is None else np.broadcast_to(
            np.asarray(grad, dtype=np.float64), output.shape
        ).copy()
        grads: dict[int, np.ndarray] = {id(output): seed}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not isinstance(inp, Var) or inp.tape is not self:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._grads = grads
        return {
            name: grads.get(id(var), np.zeros_like(var.data)) for name, var in self._leaves.items()
        }

    def grad(self, var: Var) -> np.ndarray:
        """Gradient of a leaf from the most recent :meth:`backward`."""
        return self._grads.get(id(var), np.zeros_like(var.data))


# ---------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _wrap(result: np.ndarray, inputs: tuple, vjp: Callable, as_var: bool):
    tape = _tape_of(*inputs)
    if tape is not None:
        return tape.record(result, inputs, vjp)
    return Var(result) if as_var else result


def custom_op(result: np.ndarray, inputs: tuple, vjp: Callable):
    """Record an op with a hand-written vector-Jacobian product."""
    return _wrap(result, inputs, vjp, _any_var(*inputs))


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    ad, bd = _data(a), _data(b)
    out = ad + bd
    return _wrap(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)), _any_var(a, b))


def mul(a, b):
    ad, bd = _data(a), _data(b)
    out = ad * bd
    return _wrap(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        _any_var(a, b),
    )


def reshape(x, shape: Sequence[int]):
    xd = _data(x)
    out = xd.reshape(shape)
    return _wrap(out, (x,), lambda g: (g.reshape(xd.shape),), _any_var(x))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    xd = _data(x)
    return reshape(x, (xd.shape[0], -1))


def sum_all(x):
    xd = _data(x)
    return _wrap(np.asarray(xd.sum()), (x,), lambda g: (np.broadcast_to(g, xd.shape).copy(),), _any_var(x))


def stack(xs: Sequence) -> Var | np.ndarray:
    """Stack along a new leading axis."""
    xs = list(xs)
    out = np.stack([_data(x) for x in xs])
    return _wrap(out, tuple(xs), lambda g: tuple(g[i] for i in range(len(xs))), _any_var(*xs))


def _index0(x: Var, index: int):
    xd = x.data

    def vjp(g):
        full = np.zeros_like(xd)
        full[index] = g
        return (full,)

    return _wrap(xd[index], (x,), vjp, True)


def time_mix(x, mix: np.ndarray):
    """Linear map over the leading (time) axis: ``out[j] = sum_i mix[j, i] * x[i]``."""
    xd = _data(x)
    out = np.tensordot(mix, xd, axes=(1, 0))
    return _wrap(out, (x,), lambda g: (np.tensordot(mix.T, g, axes=(1, 0)),), _any_var(x))


# ---------------------------------------------------------------------------
# layer kernels


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    return _wrap(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), _any_var(a, b))


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, w, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (F, C, kh, kw), zero padded."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, wid = xd.shape
    f, cw, kh, kw = wd.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise ValueError("conv2d kernel larger than padded input")
    xp = _pad(xd, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g):
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=(1, 0)).transpose(0, 3, 1, 2)
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        dx = dxp[:, :, padding : padding + h, padding : padding + wid] if padding else dxp
        return dx, dw

    return _wrap(np.ascontiguousarray(out), (x, w), vjp, _any_var(x, w))


def avg_pool2d(x, k: int, stride: int | None = None):
    """Mean over ``k x k`` windows of the trailing two axes of a 4-d input."""
    stride = k if stride is None else stride
    xd = _data(x)
    if xd.ndim != 4:
        raise ValueError("avg_pool2d expects a 4-d input")
    h, w = xd.shape[2:]
    if k > h or k > w:
        raise ValueError(f"pool window {k} exceeds input {h}x{w}")
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = win.mean(axis=(4, 5))

    def vjp(g):
        dx = np.zeros_like(xd)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        return (dx,)

    return _wrap(out, (x,), vjp, _any_var(x))


def heaviside(v, v_th: float, grad_fn: HeavisideGrad | None = None):
    """Spike nonlinearity ``1[v >= v_th]`` with a surrogate derivative.

    The derivative is ``grad_fn`` when given, else the tape's default hook.
    """
    vd = _data(v)
    out = (vd >= v_th).astype(np.float64)
    tape = _tape_of(v)
    hook = grad_fn or (tape.heaviside_grad if tape is not None else None)
    if tape is not None and hook is None:
        raise RuntimeError("no heaviside derivative installed on the tape")
    return _wrap(out, (v,), lambda g: (g * hook(vd, v_th),), _any_var(v))


def multispike(v, v_th: float, grad_fn: HeavisideGrad | None = None):
    """Spike count ``max(0, floor(v / v_th))``.

    The backward evaluates the surrogate relative to the last threshold
    crossed, so each unit interval ``[k v_th, (k+1) v_th)`` sees the same
    shape as the single-spike case.
    """
    vd = _data(v)
    out = np.maximum(np.floor(vd / v_th), 0.0)
    tape = _tape_of(v)
    hook = grad_fn or (tape.heaviside_grad if tape is not None else None)
    if tape is not None and hook is None:
        raise RuntimeError("no heaviside derivative installed on the tape")
    shifted = vd - np.maximum(out - 1.0, 0.0) * v_th
    return _wrap(out, (v,), lambda g: (g * hook(shifted, v_th),), _any_var(v))


def batch_norm(x, gamma, beta, eps: float = 1e-5, mean: np.ndarray | None = None, var: np.ndarray | None = None):
    """Per-channel normalisation over every axis except axis 1.

    With ``mean``/``var`` given the op is affine in ``x``; otherwise batch
    statistics are used and differentiated through. Returns
    ``(out, batch_mean, batch_var)``; the statistics are None in the first case.
    """
    xd, gd, bd = _data(x), _data(gamma), _data(beta)
    axes = tuple(i for i in range(xd.ndim) if i != 1)
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    g_b, b_b = gd.reshape(bshape), bd.reshape(bshape)

    if mean is not None:
        inv = 1.0 / np.sqrt(np.asarray(var).reshape(bshape) + eps)
        xhat = (xd - np.asarray(mean).reshape(bshape)) * inv
        out = g_b * xhat + b_b

        def vjp(g):
            return g * g_b * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _wrap(out, (x, gamma, beta), vjp, _any_var(x, gamma, beta)), None, None

    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var_b = (centered**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var_b + eps)
    xhat = centered * inv
    out = g_b * xhat + b_b

    def vjp(g):
        dxhat = g * g_b
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    result = _wrap(out, (x, gamma, beta), vjp, _any_var(x, gamma, beta))
    return result, mu.reshape(-1), var_b.reshape(-1)


def cross_entropy(logits, labels: np.ndarray):
    """Mean softmax cross-entropy of ``logits`` (N, K) against integer labels."""
    ld = _data(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = ld.shape[0]
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _wrap(np.asarray(loss), (logits,), vjp, _any_var(logits))


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(w: np.ndarray, grad: np.ndarray, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, state: np.ndarray | None = None):
    """One SGD update with heavy-ball momentum and L2 decay; returns ``(w', buffer')``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if w.shape != grad.shape:
        raise ValueError(f"weight/grad shape mismatch: {w.shape} vs {grad.shape}")
    buf = np.zeros_like(w) if state is None else state
    buf = momentum * buf + grad + weight_decay * w
    return w - lr * buf, buf


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, rank: int, singular_values: np.ndarray, residual_norm: float):
        self.rank = rank
        self.singular_values = singular_values
        self.residual_norm = residual_norm
        super().__init__(
            f"design matrix is rank deficient (rank {rank} < {len(singular_values)} columns; "
            f"singular values {np.array2string(singular_values, precision=3)}; "
            f"min-norm residual {residual_norm:.3e})"
        )


def least_squares_fit(features, targets, ridge: float = 1e-8) -> np.ndarray:
    """Solve ``min ||features @ coeffs - targets||^2`` via the normal equations.

    Near-singular (but full-rank) systems get a ``ridge`` term; genuinely
    rank-deficient designs raise :class:`RankDeficientError`.
    """
    a = np.asarray(features, dtype=np.float64)
    b = np.asarray(targets, dtype=np.float64).reshape(-1)
    if a.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"features {a.shape} incompatible with targets {b.shape}")
    m, p = a.shape
    sv = np.linalg.svd(a, compute_uv=False)
    tol = sv.max(initial=0.0) * max(m, p) * np.finfo(np.float64).eps
    rank = int((sv > tol).sum())
    if m < p or rank < p:
        x_min, *_ = np.linalg.lstsq(a, b, rcond=None)
        raise RankDeficientError(rank, sv, float(np.linalg.norm(a @ x_min - b)))

    ata = a.T @ a
    atb = a.T @ b
    if sv[-1] == 0 or sv[0] / sv[-1] > 1e6:
        warnings.warn("ill-conditioned least-squares system; adding ridge term", RuntimeWarning, stacklevel=2)
        ata = ata + ridge * np.eye(p)
    coeffs = np.linalg.solve(ata, atb)
    # one step of iterative refinement tightens the normal-equation solve
    coeffs = coeffs + np.linalg.solve(ata, atb - ata @ coeffs)
    return coeffs

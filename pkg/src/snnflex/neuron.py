"""Clock-driven LIF/IF dynamics and surrogate derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import numerics as nx
from .numerics import Var

__all__ = [
    "NeuronParams",
    "SurrogateSpec",
    "surrogate",
    "lif_step",
    "lif_forward_seq",
    "lif_backward_analytic",
    "lif_sequence",
]


@dataclass(frozen=True)
class NeuronParams:
    v_th: float = 1.0
    tau: float = 0.5
    reset_mode: Literal["hard", "soft"] = "hard"
    multi_spike: bool = False
    tau0: float | None = None

    def __post_init__(self):
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.reset_mode not in ("hard", "soft"):
            raise ValueError(f"unknown reset mode {self.reset_mode!r}")
        if self.multi_spike and self.reset_mode != "soft":
            raise ValueError("multi-spike neurons require soft reset")
        if self.tau0 is not None and not self.tau0 > 0:
            raise ValueError("tau0 must be positive")

    @property
    def is_if(self) -> bool:
        return self.tau == 1.0

    @classmethod
    def if_multispike(cls, v_th: float = 1.0) -> NeuronParams:
        """IF neuron as deployed on event-driven hardware."""
        return cls(v_th=v_th, tau=1.0, reset_mode="soft", multi_spike=True)


@dataclass(frozen=True)
class SurrogateSpec:
    kind: Literal["triangular", "single_exponential"] = "triangular"
    h: float = 1.0
    alpha: float = 1.0
    beta: float = 5.0

    def __post_init__(self):
        if self.kind not in ("triangular", "single_exponential"):
            raise ValueError(f"unknown surrogate {self.kind!r}")
        if self.h <= 0 or self.alpha <= 0 or self.beta <= 0:
            raise ValueError("surrogate parameters must be positive")

    def __call__(self, v, v_th: float):
        return surrogate(v, self, v_th)


def surrogate(v, spec: SurrogateSpec, v_th: float):
    """Surrogate for d heaviside(v - v_th)/dv."""
    v = np.asarray(v, dtype=np.float64)
    if spec.kind == "triangular":
        return np.maximum(0.0, spec.h - np.abs(v_th - v)) / spec.h**2
    return spec.alpha * np.exp(-spec.beta * np.abs(v - v_th))


def _check_finite(x) -> None:
    data = x.data if isinstance(x, Var) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise nx.NonFiniteError("non-finite neuron input")


def lif_step(u, inp, p: NeuronParams, spec: SurrogateSpec | None = None):
    """Advance one step. Returns ``(spikes, u_next)``; works on arrays or tape vars."""
    _check_finite(inp)
    v = inp if _is_zero(u) else nx.add(nx.mul(u, p.tau), inp)
    if p.multi_spike:
        s = nx.multispike(v, p.v_th, spec)
    else:
        s = nx.heaviside(v, p.v_th, spec)
    if p.reset_mode == "hard":
        u_next = nx.mul(v, nx.add(nx.mul(s, -1.0), 1.0))
    else:
        u_next = nx.add(v, nx.mul(s, -p.v_th))
    return s, u_next


def _is_zero(u) -> bool:
    return not isinstance(u, Var) and np.ndim(u) == 0 and float(u) == 0.0


def lif_forward_seq(inputs, p: NeuronParams, spec: SurrogateSpec | None = None, return_trace: bool = False):
    """Run ``lif_step`` over the leading axis of ``inputs`` from ``u = 0``.

    With ``return_trace`` also returns the pre-reset potentials ``v`` and
    spikes as plain arrays (T, ...), which is what the analytic backward needs.
    """
    n_steps = len(inputs)
    if n_steps == 0:
        raise ValueError("need at least one time step")
    u = np.zeros(inputs.shape[1:])
    spikes, vs = [], []
    for t in range(n_steps):
        inp = inputs[t]
        if return_trace:
            ud = u.data if isinstance(u, Var) else u
            vs.append(p.tau * ud + (inp.data if isinstance(inp, Var) else inp))
        s, u = lif_step(u, inp, p, spec)
        spikes.append(s)
    out = nx.stack(spikes)
    if return_trace:
        sd = out.data if isinstance(out, Var) else out
        return out, np.stack(vs), sd.copy()
    return out


def lif_backward_analytic(v: np.ndarray, s: np.ndarray, p: NeuronParams, spec: SurrogateSpec,
                          upstream: np.ndarray) -> np.ndarray:
    """Hand-expanded BPTT for hard-reset LIF.

    ``dI[t'] = sum_{t >= t'} ds[t] * SG(v[t]) * tau**(t-t') *
    prod_{i=t'}^{t-1} [(1 - s[i]) - v[i] * SG(v[i])]``, evaluated term by term.
    """
    if p.reset_mode != "hard":
        raise ValueError("the closed-form expansion only covers hard reset; use the tape for soft reset")
    if p.multi_spike:
        raise ValueError("the closed-form expansion only covers single-spike neurons")
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    n_steps = v.shape[0]
    sg = surrogate(v, spec, p.v_th)
    du_dv = (1.0 - s) - v * sg
    d_in = np.zeros_like(v)
    for t in range(n_steps):
        for n in range(t + 1):
            src = t - n
            term = upstream[t] * sg[t] * p.tau**n
            for i in range(src, t):
                term = term * du_dv[i]
            d_in[src] += term
    return d_in


def lif_sequence(inputs, p: NeuronParams, spec: SurrogateSpec, detach_reset: bool = False):
    """Whole-sequence LIF layer as a single tape node.

    Numerically identical to ``lif_forward_seq`` but records one node, so the
    backward costs O(T) instead of one full-size scatter per step.
    """
    xd = inputs.data if isinstance(inputs, Var) else np.asarray(inputs, dtype=np.float64)
    if len(xd) == 0:
        raise ValueError("need at least one time step")
    if not np.all(np.isfinite(xd)):
        raise nx.NonFiniteError("non-finite neuron input")
    v_all = np.empty_like(xd)
    s_all = np.empty_like(xd)
    u = None
    for t in range(len(xd)):
        v = xd[t] if u is None else p.tau * u + xd[t]
        if p.multi_spike:
            s = np.maximum(np.floor(v / p.v_th), 0.0)
        else:
            s = (v >= p.v_th).astype(np.float64)
        u = v * (1.0 - s) if p.reset_mode == "hard" else v - p.v_th * s
        v_all[t] = v
        s_all[t] = s

    def vjp(g):
        if p.multi_spike:
            shifted = v_all - np.maximum(s_all - 1.0, 0.0) * p.v_th
            sg = spec(shifted, p.v_th)
        else:
            sg = spec(v_all, p.v_th)
        gx = np.empty_like(xd)
        gu = np.zeros_like(xd[0])
        for t in range(len(xd) - 1, -1, -1):
            gs = g[t]
            if p.reset_mode == "hard":
                if not detach_reset:
                    gs = gs - gu * v_all[t]
                gv = gs * sg[t] + gu * (1.0 - s_all[t])
            else:
                if not detach_reset:
                    gs = gs - gu * p.v_th
                gv = gs * sg[t] + gu
            gx[t] = gv
            gu = gv * p.tau
        return (gx,)

    return nx.custom_op(s_all, (inputs,), vjp)

"""Accuracy estimation, energy-constrained config search, cost model and robustness probes."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import ForwardStats, StagedNetwork, TemporalConfig, forward
from .numerics import Tape
from .training import evaluate, predict

__all__ = [
    "EstimatorModel",
    "EnergyModel",
    "NoiseSpec",
    "SearchResult",
    "estimator_features",
    "fit_estimator",
    "predict_acc",
    "estimate_firing_rates",
    "search_optimal",
    "brute_force_search",
    "cost_ratio",
    "noise_robustness",
    "gradient_metrics",
    "early_exit_infer",
    "dumps",
]


def dumps(obj) -> str:
    """Stable UTF-8 JSON used for every report."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def _t_tuple(t) -> tuple[int, ...]:
    return t.t if isinstance(t, TemporalConfig) else tuple(int(v) for v in t)


# ---------------------------------------------------------------------------
# accuracy estimator


@dataclass
class EstimatorModel:
    K: np.ndarray
    c: float

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(-1)
        self.c = float(self.c)

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "c": self.c}

    @classmethod
    def from_dict(cls, d: dict) -> EstimatorModel:
        return cls(d["K"], d["c"])


def estimator_features(t) -> np.ndarray:
    t = np.asarray(_t_tuple(t), dtype=np.float64)
    if np.any(t < 1):
        raise ValueError(f"time steps must be >= 1, got {t.tolist()}")
    return np.sqrt(np.log2(t))


def predict_acc(model: EstimatorModel, t) -> float:
    f = estimator_features(t)
    if len(f) != len(model.K):
        raise ValueError(f"config has {len(f)} stages, model has {len(model.K)}")
    return float(np.dot(model.K, f) + model.c)


def fit_estimator(samples: Sequence[tuple]) -> EstimatorModel:
    """Least-squares fit of ``acc ~ sum K_i sqrt(log2 t_i) + c``.

    Raises :class:`~snnflex.numerics.RankDeficientError` when the sampled
    configs do not pin down every coefficient.
    """
    if not samples:
        raise ValueError("no samples")
    configs = [_t_tuple(t) for t, _ in samples]
    G = len(configs[0])
    if any(len(c) != G for c in configs):
        raise ValueError("all configs must have the same number of stages")
    if len(samples) < G + 1:
        raise ValueError(f"need at least {G + 1} samples for {G} stages, got {len(samples)}")
    a = np.column_stack([np.stack([estimator_features(c) for c in configs]), np.ones(len(configs))])
    coeffs = nx.least_squares_fit(a, [acc for _, acc in samples])
    return EstimatorModel(coeffs[:-1], coeffs[-1])


# ---------------------------------------------------------------------------
# energy model and search


@dataclass
class EnergyModel:
    R: np.ndarray
    budget: float | None = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(-1)
        if np.any(self.R < 0):
            raise ValueError("firing rates must be non-negative")

    def cost(self, t) -> float:
        return float(np.dot(np.asarray(_t_tuple(t), dtype=np.float64), self.R))

    def uniform_budget(self, T: int) -> float:
        """Cost of the uniform config ``(T, ..., T)``."""
        return float(T * self.R.sum())

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "budget": self.budget}


def estimate_firing_rates(net: StagedNetwork, data, T: int | None = None, batch_size: int = 256) -> EnergyModel:
    """Mean spikes per neuron per step, per stage, over ``data`` at uniform ``T``."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    T = T or net.t_max
    stats = ForwardStats()
    predict(net, data, TemporalConfig.uniform(T, net.num_stages), batch_size, stats=stats)
    rates = [s / n if n else 0.0 for s, n in zip(stats.stage_spikes, stats.stage_neuron_steps)]
    return EnergyModel(rates)


@dataclass
class SearchResult:
    config: tuple[int, ...]
    predicted: float
    energy: float
    budget: float
    visited: int = 0

    def to_dict(self) -> dict:
        return {"config": list(self.config), "predicted_acc": self.predicted, "energy": self.energy,
                "budget": self.budget, "visited": self.visited}


def _check_search(model: EstimatorModel, energy: EnergyModel, t_min: int, t_max: int, budget: float | None):
    G = len(model.K)
    if len(energy.R) != G:
        raise ValueError(f"estimator has {G} stages, energy model {len(energy.R)}")
    if not 1 <= t_min <= t_max:
        raise ValueError(f"need 1 <= t_min <= t_max, got [{t_min}, {t_max}]")
    budget = energy.budget if budget is None else budget
    if budget is None:
        raise ValueError("no energy budget given")
    if _over_budget(energy.cost((t_min,) * G), budget):
        raise ValueError(f"budget {budget} is below the cheapest config's cost {energy.cost((t_min,) * G)}")
    return G, float(budget)


def _over_budget(cost: float, budget: float) -> bool:
    # slack absorbs summation-order rounding so a config costing exactly the budget stays feasible
    return cost > budget + 1e-12 * (1.0 + abs(budget))


def search_optimal(model: EstimatorModel, energy: EnergyModel, t_min: int, t_max: int,
                   budget: float | None = None) -> SearchResult:
    """Exact depth-first branch and bound over ``[t_min, t_max]^G``.

    Stages are assigned in order and values tried in increasing order, so the
    first maximiser found is the lexicographically smallest; a branch is cut
    only when even its optimistic bound cannot beat the incumbent.
    """
    G, budget = _check_search(model, energy, t_min, t_max, budget)
    K, R = model.K, energy.R
    f = {t: math.sqrt(math.log2(t)) for t in range(t_min, t_max + 1)}
    best_gain = np.array([max(k * f[t_min], k * f[t_max]) for k in K])
    tail_gain = np.concatenate([np.cumsum(best_gain[::-1])[::-1], [0.0]])
    tail_cost = np.concatenate([np.cumsum((t_min * R)[::-1])[::-1], [0.0]])

    best_cfg: tuple[int, ...] | None = None
    best_val = -math.inf
    visited = 0
    prefix: list[int] = []

    def dfs(i: int, gain: float, cost: float) -> None:
        nonlocal best_cfg, best_val, visited
        visited += 1
        if i == G:
            val = predict_acc(model, prefix)
            if val > best_val:
                best_val, best_cfg = val, tuple(prefix)
            return
        for t in range(t_min, t_max + 1):
            c = cost + t * R[i]
            if _over_budget(c + tail_cost[i + 1], budget):
                break  # costs only grow with t
            g = gain + K[i] * f[t]
            if best_cfg is not None and g + tail_gain[i + 1] + model.c + 1e-9 * (1 + abs(best_val)) <= best_val:
                continue
            prefix.append(t)
            dfs(i + 1, g, c)
            prefix.pop()

    dfs(0, 0.0, 0.0)
    return SearchResult(best_cfg, best_val, energy.cost(best_cfg), budget, visited)


def brute_force_search(model: EstimatorModel, energy: EnergyModel, t_min: int, t_max: int,
                       budget: float | None = None) -> SearchResult:
    """Exhaustive reference for :func:`search_optimal`."""
    G, budget = _check_search(model, energy, t_min, t_max, budget)
    best_cfg, best_val, n = None, -math.inf, 0
    for cfg in itertools.product(range(t_min, t_max + 1), repeat=G):
        n += 1
        if _over_budget(energy.cost(cfg), budget):
            continue
        val = predict_acc(model, cfg)
        if val > best_val:
            best_cfg, best_val = cfg, val
    return SearchResult(best_cfg, best_val, energy.cost(best_cfg), budget, n)


# ---------------------------------------------------------------------------
# cost model


def cost_ratio(s: int, t_min: int, t_max: int, T: int) -> float:
    """Expected MTT/SDT time ratio ``s (t_min + t_max) / (2 T)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return s * (t_min + t_max) / (2.0 * T)


# ---------------------------------------------------------------------------
# robustness


@dataclass
class NoiseSpec:
    sigma2: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05)
    target: str = "weights"
    repeats: int = 5

    def __post_init__(self):
        self.sigma2 = tuple(float(v) for v in self.sigma2)
        if any(v < 0 for v in self.sigma2):
            raise ValueError("variances must be non-negative")
        if self.target not in ("weights", "inputs"):
            raise ValueError(f"unknown noise target {self.target!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class _NoisyInputs:
    base: object
    std: float
    rng: np.random.Generator
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = self.base.labels

    def __len__(self) -> int:
        return len(self.base)

    def encode(self, idx, t):
        x = self.base.encode(idx, t)
        return x + self.rng.normal(0.0, self.std, x.shape)


def noise_robustness(net: StagedNetwork, spec: NoiseSpec, data, rng: np.random.Generator, T: int | None = None,
                     batch_size: int = 256) -> list[dict]:
    """Accuracy under Gaussian ``N(0, sigma2)`` perturbations, one row per variance.

    Weight noise is applied to a copy, so ``net`` itself is never touched.
    """
    cfg = TemporalConfig.uniform(T or net.t_max, net.num_stages)
    rows = []
    for s2 in spec.sigma2:
        accs = []
        for _ in range(spec.repeats):
            if s2 == 0.0:
                accs.append(evaluate(net, data, cfg, batch_size))
                continue
            std = math.sqrt(s2)
            if spec.target == "weights":
                noisy = net.copy()
                for name in noisy.weight_names():
                    noisy.params[name] = noisy.params[name] + rng.normal(0.0, std, noisy.params[name].shape)
                accs.append(evaluate(noisy, data, cfg, batch_size))
            else:
                accs.append(evaluate(net, _NoisyInputs(data, std, rng), cfg, batch_size))
        rows.append({"sigma2": s2, "mean": float(np.mean(accs)), "min": float(np.min(accs)),
                     "max": float(np.max(accs)), "accs": [float(a) for a in accs]})
    return rows


def gradient_metrics(net: StagedNetwork, data, T: int | None = None, batch_size: int = 256) -> tuple[float, float]:
    """``(||dL/dW||, mean_i ||dL_i/dx_i||)`` with ``L`` the mean loss over ``data``.

    ``W`` covers every conv/dense weight; ``x_i`` is sample ``i``'s encoded
    input tensor. BN runs on its stored statistics so samples stay independent.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    cfg = TemporalConfig.uniform(T or net.t_max, net.num_stages)
    names = net.weight_names()
    gw = {k: np.zeros_like(net.params[k]) for k in names}
    x_norms = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        tape = Tape()
        x = tape.watch(data.encode(idx, cfg.t[0]), "__input__")
        logits = forward(net, x, cfg, tape=tape, mode="eval")
        loss = nx.cross_entropy(logits, data.labels[idx])
        grads = tape.backward(loss)
        for k in names:
            gw[k] += grads[k] * (len(idx) / n)
        gx = grads["__input__"] * len(idx)  # per-sample loss gradients
        x_norms.append(np.sqrt((np.moveaxis(gx, 1, 0).reshape(len(idx), -1) ** 2).sum(axis=1)))
    w_norm = math.sqrt(sum(float((g**2).sum()) for g in gw.values()))
    return w_norm, float(np.concatenate(x_norms).mean())


def early_exit_infer(net: StagedNetwork, x: np.ndarray, confidence_threshold: float, t_max: int | None = None):
    """Confidence-based early exit on a uniform-step run.

    ``x`` is (t_max, N, ...). The readout after each step is the one a run of
    that length would produce; a sample exits at the first step whose softmax
    confidence reaches the threshold. Returns ``(classes, steps_used)``.
    """
    t_max = t_max or len(x)
    stats = ForwardStats()
    forward(net, x[:t_max], TemporalConfig.uniform(t_max, net.num_stages), stats=stats)
    logits = stats.step_logits  # (t_max, N, K)
    z = logits - logits.max(axis=2, keepdims=True)
    p = np.exp(z)
    conf = (p / p.sum(axis=2, keepdims=True)).max(axis=2)
    hit = conf >= confidence_threshold
    steps = np.where(hit.any(axis=0), hit.argmax(axis=0) + 1, t_max)
    n = np.arange(logits.shape[1])
    classes = logits[steps - 1, n].argmax(axis=1)
    return classes, steps

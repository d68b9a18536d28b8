"""SDT / NMT / MTT training loops, BN calibration and bias-free fine-tuning."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datasets import minibatches
from .graph import ForwardStats, StagedNetwork, TemporalConfig, forward, partition
from .numerics import Tape

__all__ = [
    "METHODS",
    "SAMPLER_MODES",
    "TrainConfig",
    "CalibrationReport",
    "EpochMetrics",
    "NumericError",
    "OptimizerState",
    "sample_config",
    "accumulate_gradients",
    "apply_update",
    "mtt_iteration",
    "prepare_network",
    "train",
    "evaluate",
    "predict",
    "bn_calibrate",
    "finetune_bias_free",
    "write_metrics_csv",
]

METHODS = ("SDT", "NMT", "MTT")
SAMPLER_MODES = ("iid_uniform", "monotone_nonincreasing")


class NumericError(nx.NonFiniteError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    method: str = "MTT"
    s: int = 3
    t_min: int = 1
    t_max: int = 6
    g: int = 1
    epochs: int = 10
    batch_size: int = 50
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    sampler_mode: str = "iid_uniform"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.sampler_mode not in SAMPLER_MODES:
            raise ValueError(f"unknown sampler mode {self.sampler_mode!r}")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError(f"need 1 <= t_min <= t_max, got [{self.t_min}, {self.t_max}]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def samples_per_iteration(self) -> int:
        return 1 if self.method == "SDT" else self.s


@dataclass
class CalibrationReport:
    batches: int
    config: tuple[int, ...]
    deltas: dict[str, dict[str, float]]  # layer -> {"mean": max |Δ|, "var": max |Δ|}


@dataclass
class EpochMetrics:
    epoch: int
    losses: list[float]  # mean loss per sample index
    train_acc: float
    wall_time: float


@dataclass
class OptimizerState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sample_config(G: int, t_min: int, t_max: int, mode: str, rng: np.random.Generator) -> TemporalConfig:
    """Draw one temporal configuration of ``G`` stage step counts."""
    draws = rng.integers(t_min, t_max + 1, size=G)
    if mode == "monotone_nonincreasing":
        draws = np.sort(draws)[::-1]
    elif mode != "iid_uniform":
        raise ValueError(f"unknown sampler mode {mode!r}")
    return TemporalConfig(tuple(int(v) for v in draws), t_min, t_max)


def accumulate_gradients(net: StagedNetwork, data, idx: np.ndarray, configs: Sequence[TemporalConfig]):
    """Sum of per-config gradients for one batch.

    Each config gets its own forward/backward and its tape is dropped before
    the next one starts. Returns ``(grads, losses, first_logits)``.
    """
    labels = data.labels[idx]
    total: dict[str, np.ndarray] | None = None
    losses, first = [], None
    for cfg in configs:
        x = data.encode(idx, cfg.t[0])
        tape = Tape()
        logits = forward(net, x, cfg, tape=tape, mode="train")
        loss = nx.cross_entropy(logits, labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at config {cfg.t}")
        grads = tape.backward(loss)
        if first is None:
            first = logits.data
        del tape, logits, loss
        if total is None:
            total = grads
        else:
            for k, v in grads.items():
                total[k] = total[k] + v
        losses.append(value)
    return total, losses, first


def apply_update(net: StagedNetwork, grads: dict[str, np.ndarray], opt: OptimizerState, lr: float,
                 cfg: TrainConfig) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        w, buf = nx.sgd_step(net.params[name], g, lr, cfg.momentum, cfg.weight_decay, opt.buffers.get(name))
        net.params[name] = w
        opt.buffers[name] = buf
    opt.step += 1


def _iteration_configs(net: StagedNetwork, cfg: TrainConfig, rng: np.random.Generator) -> list[TemporalConfig]:
    G = net.num_stages
    if cfg.method == "SDT":
        return [TemporalConfig.uniform(cfg.t_max, G)]
    return [sample_config(G, cfg.t_min, cfg.t_max, cfg.sampler_mode, rng) for _ in range(cfg.s)]


def mtt_iteration(net: StagedNetwork, data, idx: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                  opt: OptimizerState, lr: float) -> list[float]:
    """One iteration: sample ``s`` configs, accumulate their gradients, step once."""
    configs = _iteration_configs(net, cfg, rng)
    grads, losses, _ = accumulate_gradients(net, data, idx, configs)
    apply_update(net, grads, opt, lr, cfg)
    return losses


def prepare_network(net: StagedNetwork, cfg: TrainConfig) -> StagedNetwork:
    """Partition view matching the method: NMT is one stage, MTT uses ``cfg.g``."""
    if cfg.method == "NMT":
        view = partition(net, len(net.blocks))
    elif cfg.method == "MTT":
        view = partition(net, cfg.g)
    else:
        view = net
    view.t_min, view.t_max = cfg.t_min, cfg.t_max
    return view


def train(net: StagedNetwork, data, cfg: TrainConfig, log=None):
    """Train in place (parameters are updated inside ``net.params``).

    Shuffling and config sampling draw from separate streams, so a run whose
    sampler is degenerate consumes exactly the data order of the SDT run.
    Returns ``(net, metrics)``.
    """
    net = prepare_network(net, cfg)
    data_rng = nx.rng_stream(cfg.seed, 1)
    cfg_rng = nx.rng_stream(cfg.seed, 2)
    opt = OptimizerState()
    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = max(per_epoch * cfg.epochs, 1)
    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        sums = np.zeros(cfg.samples_per_iteration)
        correct = seen = batches = 0
        for idx in minibatches(n, cfg.batch_size, data_rng):
            lr = nx.cosine_lr(opt.step, total, cfg.lr)
            configs = _iteration_configs(net, cfg, cfg_rng)
            grads, losses, logits = accumulate_gradients(net, data, idx, configs)
            apply_update(net, grads, opt, lr, cfg)
            sums += losses
            batches += 1
            correct += int((logits.argmax(axis=1) == data.labels[idx]).sum())
            seen += len(idx)
        m = EpochMetrics(epoch + 1, (sums / max(batches, 1)).tolist(), correct / max(seen, 1),
                         time.perf_counter() - start)
        metrics.append(m)
        if log is not None:
            log(m)
    return net, metrics


def predict(net: StagedNetwork, data, cfg: TemporalConfig | Sequence[int] | int, batch_size: int = 256,
            stats: ForwardStats | None = None) -> np.ndarray:
    """Eval-mode logits for the whole set."""
    cfg = _as_config(net, cfg)
    outs = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        probe = ForwardStats() if stats is not None else None
        outs.append(forward(net, data.encode(idx, cfg.t[0]), cfg, mode="eval", stats=probe))
        if stats is not None:
            _merge_stats(stats, probe)
    return np.concatenate(outs)


def _merge_stats(into: ForwardStats, part: ForwardStats) -> None:
    if not into.stage_spikes:
        into.stage_spikes = list(part.stage_spikes)
        into.stage_neuron_steps = list(part.stage_neuron_steps)
    else:
        into.stage_spikes = [a + b for a, b in zip(into.stage_spikes, part.stage_spikes)]
        into.stage_neuron_steps = [a + b for a, b in zip(into.stage_neuron_steps, part.stage_neuron_steps)]
    for name in ("step_logits", "output_spikes"):
        new = getattr(part, name)
        if new is None:
            continue
        old = getattr(into, name)
        axis = 1 if name == "step_logits" else 0
        setattr(into, name, new if old is None else np.concatenate([old, new], axis=axis))
    for i, counts in part.layer_spikes.items():
        old = into.layer_spikes.get(i)
        into.layer_spikes[i] = counts if old is None else np.concatenate([old, counts])


def _as_config(net: StagedNetwork, cfg) -> TemporalConfig:
    if isinstance(cfg, TemporalConfig):
        return cfg
    if isinstance(cfg, (int, np.integer)):
        return TemporalConfig.uniform(int(cfg), net.num_stages)
    return TemporalConfig(tuple(cfg), 1, max(cfg))


def evaluate(net: StagedNetwork, data, cfg, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    logits = predict(net, data, cfg, batch_size)
    return 100.0 * float((logits.argmax(axis=1) == data.labels).mean())


def bn_calibrate(net: StagedNetwork, data, n_batches: int = 10, cfg_t: TemporalConfig | int | None = None,
                 batch_size: int = 50) -> tuple[StagedNetwork, CalibrationReport]:
    """Replace BN running statistics by pooled moments of ``n_batches`` forwards.

    Batches are the first ``n_batches`` in dataset order, so repeating the
    call reproduces the same statistics. Weights are untouched (and shared).
    """
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    cfg = _as_config(net, cfg_t if cfg_t is not None else net.t_max)
    calib: dict = {}
    used = 0
    for start in range(0, len(data), batch_size):
        if used == n_batches:
            break
        idx = np.arange(start, min(start + batch_size, len(data)))
        forward(net, data.encode(idx, cfg.t[0]), cfg, mode="calibrate", calib=calib)
        used += 1
    new_state = dict(net.bn_state)
    deltas = {}
    for i, (s1, s2, count) in sorted(calib.items()):
        mean = s1 / count
        var = np.maximum(s2 / count - mean**2, 0.0)
        rm, rv = f"L{i}.running_mean", f"L{i}.running_var"
        deltas[f"L{i}"] = {
            "mean": float(np.abs(mean - net.bn_state[rm]).max()),
            "var": float(np.abs(var - net.bn_state[rv]).max()),
        }
        new_state[rm], new_state[rv] = mean, var
    return replace(net, bn_state=new_state), CalibrationReport(used, cfg.t, deltas)


def finetune_bias_free(net: StagedNetwork, data, cfg: TrainConfig, log=None):
    """Fine-tune a folded network (BN already absorbed, biases dropped)."""
    if net.has_bn() or not net.bias_free or any(k.endswith(".bias") for k in net.params):
        raise ValueError("fine-tuning expects a BN-free, bias-free network; fold it first")
    return train(net, data, cfg, log)


def write_metrics_csv(metrics: Sequence[EpochMetrics], path: str | Path, include_time: bool = True) -> Path:
    path = Path(path)
    s = len(metrics[0].losses) if metrics else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["epoch"] + [f"loss_{j + 1}" for j in range(s)] + ["train_acc"]
        if include_time:
            header.append("wall_time")
        w.writerow(header)
        for m in metrics:
            row = [m.epoch] + [repr(v) for v in m.losses] + [repr(m.train_acc)]
            if include_time:
                row.append(f"{m.wall_time:.3f}")
            w.writerow(row)
    return path

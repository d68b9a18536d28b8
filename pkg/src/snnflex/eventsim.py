"""Event-driven simulation of bias-free IF networks and spike-difference checks.

Each chain of linear layers between two spiking populations is collapsed into
one sparse synapse matrix. An input event delivers its row to the next
population; any neuron driven to ``v >= v_th`` emits ``floor(v / v_th)``
spikes at once (soft reset) and those spikes are delivered at the same tick,
depth first, before the next external event is touched.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .datasets import EventStream, FrameSpec, frame_events
from .graph import ForwardStats, StagedNetwork, TemporalConfig, _apply_stateless, forward
from .neuron import NeuronParams

__all__ = [
    "GateError",
    "SynapseLayer",
    "AsyncNet",
    "SimResult",
    "SdReport",
    "import_weights",
    "simulate",
    "simulate_many",
    "spike_difference",
    "timestep_reference",
    "sd_report",
    "observed_layer",
    "write_trace_csv",
]

_LINEAR = ("conv2d", "dense", "avg_pool", "flatten")


class GateError(ValueError):
    """The network cannot be expressed event-side; ``problems`` lists why."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("network rejected for event-driven import:\n  " + "\n  ".join(problems))


@dataclass
class SynapseLayer:
    layer: int  # index of the target layer in the source network
    kind: str  # lif, voting_if or voting_membrane
    weights: sp.csr_matrix  # (n_pre, n_post)
    neuron: NeuronParams | None

    def __post_init__(self):
        w = self.weights
        self._indptr, self._indices, self._data = w.indptr, w.indices, w.data

    @property
    def size(self) -> int:
        return self.weights.shape[1]

    def row(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self._indptr[j], self._indptr[j + 1]
        return self._indices[lo:hi], self._data[lo:hi]


@dataclass
class AsyncNet:
    input_shape: tuple[int, ...]
    layers: list[SynapseLayer]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].size

    @property
    def readout(self) -> str:
        return self.layers[-1].kind

    def population(self, layer: int) -> int:
        """Position of the population fed by source layer ``layer``."""
        for k, L in enumerate(self.layers):
            if L.layer == layer:
                return k
        raise KeyError(f"layer {layer} is not a neuron population")


@dataclass
class SimResult:
    counts: np.ndarray  # output spike counts (voting_if) or final potentials (voting_membrane)
    potentials: list[np.ndarray]
    spikes: list[np.ndarray]  # per-neuron emitted spike totals, per population
    delivered: list[np.ndarray] | None = None
    trace: list[tuple[int, int, int, int]] | None = None  # (tick, layer, neuron, count)


@dataclass(frozen=True)
class SdReport:
    s0: tuple[float, ...]
    s: tuple[float, ...]
    sd: float
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"s0": list(self.s0), "s": list(self.s), "sd": self.sd, **self.meta},
                          sort_keys=True, ensure_ascii=False)


# ---------------------------------------------------------------------------
# import


def _check_neuron(i: int, kind: str, p: NeuronParams) -> list[str]:
    bad = []
    if not (p.tau == 1.0 or p.tau0 is not None):
        bad.append(f"layer {i} ({kind}): leak tau={p.tau} has no continuous-time constant tau0")
    if p.reset_mode != "soft":
        bad.append(f"layer {i} ({kind}): {p.reset_mode} reset (soft reset required)")
    if not p.multi_spike:
        bad.append(f"layer {i} ({kind}): single-spike neuron (multi-spike required)")
    return bad


def _chain_matrix(net: StagedNetwork, chain: Sequence[int], in_shape: tuple[int, ...], chunk: int = 512) -> sp.csr_matrix:
    """Matrix of the linear map realised by ``chain``, built by probing basis vectors."""
    n_in = int(np.prod(in_shape))
    if not chain:
        return sp.identity(n_in, format="csr")
    parts = []
    for start in range(0, n_in, chunk):
        stop = min(start + chunk, n_in)
        probe = np.zeros((stop - start, n_in))
        probe[np.arange(stop - start), np.arange(start, stop)] = 1.0
        h = probe.reshape(stop - start, *in_shape)
        for i in chain:
            h = _apply_stateless(net, i, h, net.params, "eval", None)
        parts.append(sp.csr_matrix(h.reshape(stop - start, -1)))
    return sp.vstack(parts, format="csr")


def import_weights(net: StagedNetwork) -> AsyncNet:
    """Translate a folded, bias-free IF network into synapse matrices.

    Raises :class:`GateError` listing every offending layer.
    """
    problems = []
    for i, spec in enumerate(net.specs):
        if spec.kind == "batchnorm":
            problems.append(f"layer {i} (batchnorm): BN must be folded away first")
        if spec.kind in ("conv2d", "dense") and (spec.bias or f"L{i}.bias" in net.params):
            problems.append(f"layer {i} ({spec.kind}): carries a bias")
        if spec.kind in ("lif", "voting_if"):
            problems.extend(_check_neuron(i, spec.kind, net.layer_neuron(i)))
    if net.specs[-1].kind not in ("voting_if", "voting_membrane"):
        problems.append(f"layer {len(net.specs) - 1} ({net.specs[-1].kind}): network must end in a voting layer")
    if problems:
        raise GateError(problems)

    layers, chain = [], []
    shape = tuple(net.input_shape)
    for i, spec in enumerate(net.specs):
        if spec.kind in _LINEAR:
            chain.append(i)
            continue
        w = _chain_matrix(net, chain, shape)
        neuron = None if spec.kind == "voting_membrane" else net.layer_neuron(i)
        layers.append(SynapseLayer(i, spec.kind, w, neuron))
        shape = net.shapes[i][1]
        chain = []
    return AsyncNet(tuple(net.input_shape), layers)


# ---------------------------------------------------------------------------
# simulation


def _input_indices(stream: EventStream, input_shape: tuple[int, ...]) -> np.ndarray:
    ev = stream.events
    c, h, w = input_shape
    if len(ev) and (ev["x"].max() >= w or ev["y"].max() >= h or ev["p"].max() >= c):
        raise ValueError(f"events exceed the network input geometry {input_shape}")
    return (ev["p"].astype(np.int64) * h + ev["y"]) * w + ev["x"]


def simulate(anet: AsyncNet, stream: EventStream, *, tie_order: str = "canonical", trace: bool = False,
             track_charge: bool = False) -> SimResult:
    """Replay ``stream`` through ``anet`` from rest.

    Same-tick input events are taken in (tick, input index) order unless
    ``tie_order="as_given"``, which keeps the stream's own order (the stream
    must still be tick-sorted).
    """
    ticks = stream.events["t"].astype(np.int64)
    if len(ticks) and np.any(np.diff(ticks) < 0):
        raise ValueError("event stream is not sorted by tick")
    src = _input_indices(stream, anet.input_shape)
    if tie_order == "canonical":
        order = np.lexsort((src, ticks))
        ticks, src = ticks[order], src[order]
    elif tie_order != "as_given":
        raise ValueError(f"unknown tie order {tie_order!r}")

    layers = anet.layers
    n_layers = len(layers)
    u = [np.zeros(L.size) for L in layers]
    spikes = [np.zeros(L.size) for L in layers]
    delivered = [np.zeros(L.size) for L in layers] if track_charge else None
    decay = [L.neuron is not None and L.neuron.tau0 is not None and L.neuron.tau != 1.0 for L in layers]
    last = [0] * n_layers
    events: list[tuple[int, int, int, int]] | None = [] if trace else None

    for tick, j in zip(ticks.tolist(), src.tolist()):
        stack = [(0, j, 1.0)]
        while stack:
            li, pre, count = stack.pop()
            L = layers[li]
            idx, w = L.row(pre)
            if decay[li] and tick != last[li]:
                u[li] *= math.exp(-(tick - last[li]) / L.neuron.tau0)
            last[li] = tick
            if len(idx) == 0:
                continue
            charge = count * w
            u[li][idx] += charge
            if delivered is not None:
                delivered[li][idx] += charge
            if L.neuron is None:
                continue
            vth = L.neuron.v_th
            n = np.floor(u[li][idx] / vth)
            fired = n > 0
            if not fired.any():
                continue
            hit, n = idx[fired], n[fired]
            u[li][hit] -= n * vth
            spikes[li][hit] += n
            if events is not None:
                events.extend((tick, L.layer, int(k), int(c)) for k, c in zip(hit, n))
            if li + 1 < n_layers:
                order = np.argsort(hit)[::-1]  # smallest index ends on top of the stack
                stack.extend((li + 1, int(hit[k]), float(n[k])) for k in order)

    out = spikes[-1] if anet.readout == "voting_if" else u[-1]
    return SimResult(out.copy(), u, spikes, delivered, events)


def observed_layer(net_or_anet) -> int:
    """Layer whose spike counts are compared between simulators.

    That is the voting layer itself for spike-count readouts, and otherwise
    the last spiking layer, whose spikes drive the membrane readout.
    """
    if isinstance(net_or_anet, AsyncNet):
        spiking = [L.layer for L in net_or_anet.layers if L.neuron is not None]
    else:
        spiking = [i for i, s in enumerate(net_or_anet.specs) if s.kind in ("lif", "voting_if")]
    if not spiking:
        raise ValueError("network has no spiking layer")
    return spiking[-1]


def _simulate_counts(args) -> tuple[np.ndarray, np.ndarray]:
    anet, stream, tie_order, pop = args
    res = simulate(anet, stream, tie_order=tie_order)
    return res.counts, res.spikes[pop]


def simulate_many(anet: AsyncNet, streams: Sequence[EventStream], workers: int = 1,
                  tie_order: str = "canonical", observe: int | None = None):
    """Readout vectors for many streams, (N, classes).

    With ``observe`` (a source layer index) also returns that population's
    per-neuron spike counts, (N, neurons). Streams are independent, so
    ``workers > 1`` farms them out to processes; each stream is still replayed
    by a single worker in its fixed order, which keeps the result identical to
    the single-worker run.
    """
    pop = anet.population(observe) if observe is not None else len(anet.layers) - 1
    jobs = [(anet, s, tie_order, pop) for s in streams]
    if not jobs:
        out = np.zeros((0, anet.num_classes)), np.zeros((0, anet.layers[pop].size))
    elif workers <= 1:
        out = _stack_pairs([_simulate_counts(j) for j in jobs])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, len(jobs) // (4 * workers))
            out = _stack_pairs(list(pool.map(_simulate_counts, jobs, chunksize=chunk)))
    return out if observe is not None else out[0]


def _stack_pairs(pairs):
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])


def write_trace_csv(result: SimResult, path: str | Path) -> Path:
    if result.trace is None:
        raise ValueError("simulation was run without trace=True")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "layer", "neuron", "count"])
        w.writerows(result.trace)
    return path


# ---------------------------------------------------------------------------
# comparison


def spike_difference(s0, s) -> float:
    """``sum |s0 - s| / sum s0`` over all entries."""
    s0 = np.asarray(s0, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s0.shape != s.shape:
        raise ValueError(f"shape mismatch {s0.shape} vs {s.shape}")
    denom = s0.sum()
    if denom <= 0:
        raise ValueError("reference spike counts sum to zero")
    return float(np.abs(s0 - s).sum() / denom)


def sd_report(s0, s, **meta) -> SdReport:
    s0 = np.asarray(s0, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    return SdReport(tuple(s0.tolist()), tuple(s.tolist()), spike_difference(s0, s), meta)


def timestep_reference(net: StagedNetwork, stream: EventStream | Sequence[EventStream], T: int,
                       t_start: int | None = None, t_stop: int | None = None, observe: int | None = None):
    """Clock-driven counterpart of :func:`simulate_many` after framing into ``T`` bins.

    The network must pass :func:`import_weights` so both sides run the same
    neuron model. The readout is class spike counts for ``voting_if`` and the
    integrated potential for ``voting_membrane``. With ``observe`` the spike
    counts of that layer are returned as well. Single streams give 1-D results.
    """
    import_weights(net)
    single = isinstance(stream, EventStream)
    streams = [stream] if single else list(stream)
    c, h, w = net.input_shape
    spec = FrameSpec(T, h, w, c, t_start, t_stop)
    x = np.stack([frame_events(s, spec) for s in streams], axis=1)
    stats = ForwardStats()
    logits = forward(net, x, TemporalConfig.uniform(T, net.num_stages), stats=stats)
    out = stats.output_spikes if net.specs[-1].kind == "voting_if" else logits * T
    if observe is None:
        return out[0] if single else out
    seen = stats.layer_spikes[observe].reshape(len(streams), -1)
    return (out[0], seen[0]) if single else (out, seen)

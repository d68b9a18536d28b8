"""Layer/stage composition, partitioned forward passes, BN folding, checkpoints."""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .neuron import NeuronParams, SurrogateSpec, lif_sequence
from .numerics import Tape, Var
from .ttm import DEFAULT_EPSILON, mixing_matrix

__all__ = [
    "LAYER_KINDS",
    "LayerSpec",
    "TemporalConfig",
    "StagedNetwork",
    "FoldReport",
    "ForwardStats",
    "build_network",
    "partition",
    "forward",
    "static_encode",
    "voting_readout",
    "fold_bn_remove_bias",
    "save_checkpoint",
    "load_checkpoint",
    "preset",
    "PRESETS",
]

LAYER_KINDS = ("conv2d", "dense", "batchnorm", "lif", "avg_pool", "flatten", "voting_if", "voting_membrane")
_SPIKING = ("lif", "voting_if")
_VOTING = ("voting_if", "voting_membrane")


@dataclass
class LayerSpec:
    kind: str
    out: int | None = None
    kernel: int = 3
    stride: int | None = None
    padding: int = 0
    bias: bool = False
    neuron: NeuronParams | None = None
    surrogate: SurrogateSpec | None = None
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neuron"] = asdict(self.neuron) if self.neuron else None
        d["surrogate"] = asdict(self.surrogate) if self.surrogate else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        if d.get("neuron"):
            d["neuron"] = NeuronParams(**d["neuron"])
        if d.get("surrogate"):
            d["surrogate"] = SurrogateSpec(**d["surrogate"])
        return cls(**d)


@dataclass(frozen=True)
class TemporalConfig:
    t: tuple[int, ...]
    t_min: int = 1
    t_max: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(int(v) for v in self.t))
        t_max = self.t_max if self.t_max is not None else max(self.t)
        object.__setattr__(self, "t_max", t_max)
        if self.t_min < 1:
            raise ValueError("t_min must be >= 1")
        if not self.t:
            raise ValueError("empty temporal configuration")
        if any(v < self.t_min or v > t_max for v in self.t):
            raise ValueError(f"config {self.t} outside [{self.t_min}, {t_max}]")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def uniform(cls, T: int, stages: int) -> TemporalConfig:
        return cls((T,) * stages, 1, T)


@dataclass
class FoldReport:
    dropped_bias: dict[str, float]  # layer -> max |bias| that was discarded
    folded: list[int]


@dataclass
class ForwardStats:
    """Optional probes filled in by :func:`forward`."""

    stage_spikes: list[float] = field(default_factory=list)
    stage_neuron_steps: list[float] = field(default_factory=list)
    step_logits: np.ndarray | None = None  # (T_last, N, K) running readout after each step
    output_spikes: np.ndarray | None = None  # (N, K) class spike counts for voting_if
    layer_spikes: dict[int, np.ndarray] = field(default_factory=dict)  # layer -> (N, ...) counts over time


@dataclass
class StagedNetwork:
    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    shapes: list[tuple[tuple[int, ...], tuple[int, ...]]]
    params: dict[str, np.ndarray]
    bn_state: dict[str, np.ndarray]
    blocks: list[list[int]]
    g: int = 1
    bias_free: bool = False
    neuron: NeuronParams = field(default_factory=NeuronParams)
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    t_min: int = 1
    t_max: int = 1
    epsilon: float = DEFAULT_EPSILON

    @property
    def stages(self) -> list[list[int]]:
        """Block indices grouped ``g`` per stage."""
        g = min(max(self.g, 1), len(self.blocks))
        return [list(range(i, min(i + g, len(self.blocks)))) for i in range(0, len(self.blocks), g)]

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_layers(self) -> list[list[int]]:
        return [[i for b in stage for i in self.blocks[b]] for stage in self.stages]

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes[-1][1]))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".weight")]

    def layer_neuron(self, i: int) -> NeuronParams:
        return self.specs[i].neuron or self.neuron

    def layer_surrogate(self, i: int) -> SurrogateSpec:
        return self.specs[i].surrogate or self.surrogate

    def copy(self) -> StagedNetwork:
        """Deep copy of parameters and BN state."""
        return replace(
            self,
            specs=copy.deepcopy(self.specs),
            params={k: v.copy() for k, v in self.params.items()},
            bn_state={k: v.copy() for k, v in self.bn_state.items()},
            blocks=[list(b) for b in self.blocks],
        )

    def has_bn(self) -> bool:
        return any(s.kind == "batchnorm" for s in self.specs)


# ---------------------------------------------------------------------------
# construction


def _infer(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    k = spec.kind
    if k == "conv2d":
        if len(shape) != 3 or spec.out is None:
            raise ValueError(f"conv2d needs a (C, H, W) input and out channels, got {shape}")
        stride = spec.stride or 1
        h = (shape[1] + 2 * spec.padding - spec.kernel) // stride + 1
        w = (shape[2] + 2 * spec.padding - spec.kernel) // stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"conv2d kernel {spec.kernel} does not fit input {shape}")
        return (spec.out, h, w)
    if k == "dense":
        if len(shape) != 1 or spec.out is None:
            raise ValueError(f"dense needs a flat input and out features, got {shape}")
        return (spec.out,)
    if k == "avg_pool":
        if len(shape) != 3:
            raise ValueError(f"avg_pool needs a (C, H, W) input, got {shape}")
        stride = spec.stride or spec.kernel
        if spec.kernel > shape[1] or spec.kernel > shape[2]:
            raise ValueError(f"pool window {spec.kernel} exceeds input {shape}")
        return (shape[0], (shape[1] - spec.kernel) // stride + 1, (shape[2] - spec.kernel) // stride + 1)
    if k == "flatten":
        return (int(np.prod(shape)),)
    return shape


def _block_partition(specs: Sequence[LayerSpec]) -> list[list[int]]:
    blocks, current, closed = [], [], False
    for i, spec in enumerate(specs):
        if closed and spec.kind not in ("avg_pool", "flatten"):
            blocks.append(current)
            current, closed = [], False
        current.append(i)
        if spec.kind in _SPIKING or spec.kind in _VOTING:
            closed = True
    if current:
        blocks.append(current)
    return blocks


def build_network(specs: Sequence[LayerSpec], input_shape: Sequence[int], seed: int = 0,
                  neuron: NeuronParams | None = None, surrogate: SurrogateSpec | None = None) -> StagedNetwork:
    """Resolve shapes and initialise parameters (Kaiming-uniform on fan-in).

    The result is a single stage; :func:`partition` splits it.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("empty layer spec")
    rng = nx.rng_stream(seed, 0x1417)
    shape = tuple(int(s) for s in input_shape)
    shapes, params, bn_state = [], {}, {}
    for i, spec in enumerate(specs):
        if spec.kind in _VOTING and i != len(specs) - 1:
            raise ValueError("voting layer must be terminal")
        out_shape = _infer(spec, shape)
        if spec.kind == "conv2d":
            fan_in = shape[0] * spec.kernel**2
            bound = math.sqrt(6.0 / fan_in)
            params[f"L{i}.weight"] = rng.uniform(-bound, bound, (spec.out, shape[0], spec.kernel, spec.kernel))
            if spec.bias:
                params[f"L{i}.bias"] = np.zeros(spec.out)
        elif spec.kind == "dense":
            bound = math.sqrt(6.0 / shape[0])
            params[f"L{i}.weight"] = rng.uniform(-bound, bound, (shape[0], spec.out))
            if spec.bias:
                params[f"L{i}.bias"] = np.zeros(spec.out)
        elif spec.kind == "batchnorm":
            c = shape[0]
            params[f"L{i}.gamma"] = np.ones(c)
            params[f"L{i}.beta"] = np.zeros(c)
            bn_state[f"L{i}.running_mean"] = np.zeros(c)
            bn_state[f"L{i}.running_var"] = np.ones(c)
        shapes.append((shape, out_shape))
        shape = out_shape
    blocks = _block_partition(specs)
    return StagedNetwork(
        specs=specs,
        input_shape=tuple(int(s) for s in input_shape),
        shapes=shapes,
        params=params,
        bn_state=bn_state,
        blocks=blocks,
        g=len(blocks),
        neuron=neuron or NeuronParams(),
        surrogate=surrogate or SurrogateSpec(),
        bias_free=not any(s.bias for s in specs),
    )


def partition(net: StagedNetwork, g: int) -> StagedNetwork:
    """View of ``net`` with ``g`` consecutive blocks per stage.

    Parameters and BN state are shared with ``net``, not copied.
    """
    if g < 1:
        raise ValueError("granularity must be >= 1")
    return replace(net, g=min(g, len(net.blocks)))


# ---------------------------------------------------------------------------
# forward


def static_encode(image, T: int):
    """Repeat a (N, ...) input ``T`` times along a new leading axis."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(image, Var):
        flat = nx.reshape(image, (1, -1))
        rep = nx.time_mix(flat, np.ones((T, 1)))
        return nx.reshape(rep, (T, *image.shape))
    image = np.asarray(image, dtype=np.float64)
    return np.broadcast_to(image, (T, *image.shape)).copy()


def _membrane_weights(T: int, tau: float) -> np.ndarray:
    return (tau ** np.arange(T - 1, -1, -1.0) / T).reshape(1, T)


def voting_readout(kind: str, values, neuron: NeuronParams | None = None):
    """Reduce a (T, N, K) tensor to (N, K) logits.

    ``voting_if`` sums spike counts; ``voting_membrane`` integrates the input
    current without firing and divides the final potential by ``T``.
    """
    T = len(values)
    if kind == "voting_if":
        mix = np.ones((1, T))
    elif kind == "voting_membrane":
        tau = neuron.tau if neuron is not None else 1.0
        mix = _membrane_weights(T, tau)
    else:
        raise ValueError(f"not a voting layer: {kind!r}")
    out = nx.time_mix(values, mix)
    return nx.reshape(out, out.shape[1:])


def _apply_stateless(net: StagedNetwork, i: int, x, p: dict, mode: str, calib: dict | None):
    spec = net.specs[i]
    k = spec.kind
    if k == "conv2d":
        y = nx.conv2d(x, p[f"L{i}.weight"], spec.stride or 1, spec.padding)
        if spec.bias:
            y = nx.add(y, nx.reshape(p[f"L{i}.bias"], (1, -1, 1, 1)))
        return y
    if k == "dense":
        y = nx.matmul(x, p[f"L{i}.weight"])
        if spec.bias:
            y = nx.add(y, p[f"L{i}.bias"])
        return y
    if k == "avg_pool":
        return nx.avg_pool2d(x, spec.kernel, spec.stride or spec.kernel)
    if k == "flatten":
        return nx.flatten(x)
    if k == "batchnorm":
        rm, rv = f"L{i}.running_mean", f"L{i}.running_var"
        if mode == "eval":
            y, _, _ = nx.batch_norm(x, p[f"L{i}.gamma"], p[f"L{i}.beta"], spec.eps, net.bn_state[rm], net.bn_state[rv])
            return y
        y, mu, var = nx.batch_norm(x, p[f"L{i}.gamma"], p[f"L{i}.beta"], spec.eps)
        if mode == "train":
            m = spec.momentum
            net.bn_state[rm] = (1 - m) * net.bn_state[rm] + m * mu
            net.bn_state[rv] = (1 - m) * net.bn_state[rv] + m * var
        elif mode == "calibrate" and calib is not None:
            xd = x.data if isinstance(x, Var) else x
            axes = tuple(a for a in range(xd.ndim) if a != 1)
            acc = calib.setdefault(i, [0.0, 0.0, 0])
            acc[0] = acc[0] + xd.sum(axis=axes)
            acc[1] = acc[1] + (xd**2).sum(axis=axes)
            acc[2] += xd.size // xd.shape[1]
        return y
    raise ValueError(f"layer {i} ({k}) is not stateless")


def _merge_time(x, T: int):
    shape = x.shape
    return nx.reshape(x, (T * shape[1], *shape[2:]))


def _split_time(x, T: int):
    shape = x.shape
    return nx.reshape(x, (T, shape[0] // T, *shape[1:]))


def forward(net: StagedNetwork, x, cfg: TemporalConfig | Sequence[int], *, tape: Tape | None = None,
            mode: str = "eval", calib: dict | None = None, stats: ForwardStats | None = None,
            params: dict | None = None):
    """Run the partitioned network: stage ``i`` at ``cfg[i]`` steps, TTMs in between.

    ``x`` is (t_1, N, ...). With a ``tape`` the parameters are watched by name
    and the returned logits are a :class:`Var`. ``mode`` selects BN behaviour:
    ``eval`` (running stats), ``train`` (batch stats, running update) or
    ``calibrate`` (batch stats, pooled moments accumulated into ``calib``).
    """
    t = cfg.t if isinstance(cfg, TemporalConfig) else tuple(int(v) for v in cfg)
    stages = net.stage_layers()
    if len(t) != len(stages):
        raise ValueError(f"config has {len(t)} entries but the network has {len(stages)} stages")
    if len(x) != t[0]:
        raise ValueError(f"input has {len(x)} frames but stage 1 runs {t[0]} steps")
    if mode not in ("eval", "train", "calibrate"):
        raise ValueError(f"unknown mode {mode!r}")
    source = net.params if params is None else params
    if tape is not None:
        p = {k: tape.watch(v, k) for k, v in source.items()}
    else:
        p = source

    h = x
    for si, layers in enumerate(stages):
        T = t[si]
        if len(h) != T:
            h = nx.time_mix(h, mixing_matrix(len(h), T, net.epsilon))
        spikes = neuron_steps = 0.0
        for i in layers:
            spec = net.specs[i]
            if spec.kind == "lif" or spec.kind == "voting_if":
                h = lif_sequence(h, net.layer_neuron(i), net.layer_surrogate(i))
                hd = h.data if isinstance(h, Var) else h
                spikes += float(hd.sum())
                neuron_steps += float(hd.size)
                if stats is not None:
                    stats.layer_spikes[i] = hd.sum(axis=0)
                if spec.kind == "voting_if":
                    if stats is not None:
                        stats.step_logits = np.cumsum(hd, axis=0)
                        stats.output_spikes = hd.sum(axis=0)
                    h = voting_readout("voting_if", h)
            elif spec.kind == "voting_membrane":
                if stats is not None:
                    hd = h.data if isinstance(h, Var) else h
                    tau = net.layer_neuron(i).tau if spec.neuron else 1.0
                    stats.step_logits = _running_membrane(hd, tau)
                h = voting_readout("voting_membrane", h, spec.neuron)
            else:
                merged = _merge_time(h, T)
                h = _split_time(_apply_stateless(net, i, merged, p, mode, calib), T)
        if stats is not None:
            stats.stage_spikes.append(spikes)
            stats.stage_neuron_steps.append(neuron_steps)
    return h


def _running_membrane(currents: np.ndarray, tau: float) -> np.ndarray:
    out = np.empty_like(currents)
    u = np.zeros_like(currents[0])
    for k in range(len(currents)):
        u = tau * u + currents[k]
        out[k] = u / (k + 1)
    return out


# ---------------------------------------------------------------------------
# deployment transforms


def fold_bn_remove_bias(net: StagedNetwork) -> tuple[StagedNetwork, FoldReport]:
    """Absorb every BN into the preceding conv/dense weights and drop all biases.

    The bias each fold would have introduced is discarded; its magnitude is
    reported per layer so the accuracy hit can be judged.
    """
    for i, spec in enumerate(net.specs):
        if spec.kind == "batchnorm" and (i == 0 or net.specs[i - 1].kind not in ("conv2d", "dense")):
            raise ValueError(f"batchnorm at layer {i} does not follow a conv/dense layer")
    params = {k: v.copy() for k, v in net.params.items()}
    dropped: dict[str, float] = {}
    folded: list[int] = []
    keep: list[int] = []
    for i, spec in enumerate(net.specs):
        if spec.kind == "batchnorm":
            j = i - 1
            w = params[f"L{j}.weight"]
            gamma, beta = params.pop(f"L{i}.gamma"), params.pop(f"L{i}.beta")
            mean, var = net.bn_state[f"L{i}.running_mean"], net.bn_state[f"L{i}.running_var"]
            scale = gamma / np.sqrt(var + spec.eps)
            bias = params.pop(f"L{j}.bias", np.zeros_like(gamma))
            new_bias = (bias - mean) * scale + beta
            if net.specs[j].kind == "conv2d":
                params[f"L{j}.weight"] = w * scale.reshape(-1, 1, 1, 1)
            else:
                params[f"L{j}.weight"] = w * scale.reshape(1, -1)
            dropped[f"L{j}"] = float(np.abs(new_bias).max(initial=0.0))
            folded.append(i)
            continue
        if spec.kind in ("conv2d", "dense") and f"L{i}.bias" in params:
            b = params.pop(f"L{i}.bias")
            if f"L{i}" not in dropped:
                dropped[f"L{i}"] = float(np.abs(b).max(initial=0.0))
        keep.append(i)

    remap = {old: new for new, old in enumerate(keep)}
    new_specs, new_shapes, new_params = [], [], {}
    for old in keep:
        spec = replace(net.specs[old], bias=False) if net.specs[old].kind in ("conv2d", "dense") else net.specs[old]
        new_specs.append(spec)
        new_shapes.append(net.shapes[old])
        for suffix in ("weight",):
            key = f"L{old}.{suffix}"
            if key in params:
                new_params[f"L{remap[old]}.{suffix}"] = params[key]
    folded_net = replace(
        net,
        specs=new_specs,
        shapes=new_shapes,
        params=new_params,
        bn_state={},
        blocks=_block_partition(new_specs),
        bias_free=True,
    )
    return folded_net, FoldReport(dropped, folded)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SNNFLEX\x00"
_VERSION = 1


def _header(net: StagedNetwork, meta: dict | None) -> dict:
    return {
        "format_version": _VERSION,
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "g": net.g,
        "num_stages": net.num_stages,
        "bias_free": net.bias_free,
        "neuron": asdict(net.neuron),
        "surrogate": asdict(net.surrogate),
        "t_min": net.t_min,
        "t_max": net.t_max,
        "epsilon": net.epsilon,
        "meta": meta or {},
    }


def save_checkpoint(net: StagedNetwork, path: str | Path, meta: dict | None = None) -> Path:
    """Write the binary container plus a ``.json`` sidecar mirroring its header."""
    path = Path(path)
    header = _header(net, meta)
    arrays, blobs, offset = [], [], 0
    for group, store in (("param", net.params), ("bn", net.bn_state)):
        for name, value in store.items():
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            arrays.append({"group": group, "name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header["arrays"] = arrays
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[StagedNetwork, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(net, meta)``."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(_MAGIC)
    version, head_len = struct.unpack_from("<IQ", raw, pos)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + head_len].decode("utf-8"))
    pos += head_len
    params, bn_state = {}, {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        (params if entry["group"] == "param" else bn_state)[entry["name"]] = arr
    specs = [LayerSpec.from_dict(d) for d in header["layers"]]
    shapes, shape = [], tuple(header["input_shape"])
    for spec in specs:
        out = _infer(spec, shape)
        shapes.append((shape, out))
        shape = out
    net = StagedNetwork(
        specs=specs,
        input_shape=tuple(header["input_shape"]),
        shapes=shapes,
        params=params,
        bn_state=bn_state,
        blocks=_block_partition(specs),
        g=header["g"],
        bias_free=header["bias_free"],
        neuron=NeuronParams(**header["neuron"]),
        surrogate=SurrogateSpec(**header["surrogate"]),
        t_min=header["t_min"],
        t_max=header["t_max"],
        epsilon=header["epsilon"],
    )
    return net, header.get("meta", {})


# ---------------------------------------------------------------------------
# named topologies


def _conv_block(out: int, bn: bool, pool: bool) -> list[LayerSpec]:
    layers = [LayerSpec("conv2d", out=out, kernel=3, padding=1)]
    if bn:
        layers.append(LayerSpec("batchnorm"))
    layers.append(LayerSpec("lif"))
    if pool:
        layers.append(LayerSpec("avg_pool", kernel=2))
    return layers


def preset(name: str, num_classes: int = 10, bn: bool = True) -> tuple[list[LayerSpec], tuple[int, ...]]:
    """Layer list and input shape for a named topology."""
    if name == "3c1fc_w16":
        layers = _conv_block(8, bn, True) + _conv_block(16, bn, True) + _conv_block(16, bn, True)
        layers += [LayerSpec("flatten"), LayerSpec("dense", out=num_classes), LayerSpec("voting_if")]
        return layers, (2, 34, 34)
    if name == "digits_cnn":
        layers = _conv_block(16, bn, True) + _conv_block(32, bn, True)
        layers += [LayerSpec("flatten"), LayerSpec("dense", out=num_classes), LayerSpec("voting_membrane")]
        return layers, (1, 8, 8)
    if name == "event_digits":
        layers = _conv_block(16, bn, True) + _conv_block(32, bn, True)
        layers += [LayerSpec("flatten"), LayerSpec("dense", out=num_classes), LayerSpec("voting_membrane")]
        return layers, (2, 8, 8)
    if name == "event_cnn":
        layers = _conv_block(8, bn, True) + _conv_block(16, bn, True)
        layers += [LayerSpec("flatten"), LayerSpec("dense", out=num_classes), LayerSpec("voting_if")]
        return layers, (2, 16, 16)
    if name == "event_mlp":
        layers = [LayerSpec("flatten"), LayerSpec("dense", out=64)]
        if bn:
            layers.append(LayerSpec("batchnorm"))
        layers += [LayerSpec("lif"), LayerSpec("dense", out=64)]
        if bn:
            layers.append(LayerSpec("batchnorm"))
        layers += [LayerSpec("lif"), LayerSpec("dense", out=num_classes), LayerSpec("voting_if")]
        return layers, (2, 16, 16)
    raise KeyError(f"unknown network preset {name!r}; known: {', '.join(PRESETS)}")


PRESETS = ("3c1fc_w16", "digits_cnn", "event_digits", "event_cnn", "event_mlp")

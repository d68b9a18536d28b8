from __future__ import annotations

import numpy as np
import pytest

from snnflex import numerics as nx


@pytest.fixture
def rng() -> np.random.Generator:
    return nx.rng_stream(1234)


def toy_events(n: int = 80, T: int = 4, seed: int = 0, size: int = 4, rate: float = 0.02, duration: int = 200):
    """Two-class Poisson event set framed at ``T`` bins; returns (FrameSet, streams)."""
    from snnflex import datasets as ds

    params = ds.SyntheticParams(n_samples=n, height=size, width=size, duration=duration, rate=rate, noise_rate=0.002)
    pairs = ds.gen_synthetic("poisson_twoclass", params, nx.rng_stream(seed, 11))
    streams = [s for s, _ in pairs]
    labels = np.array([lab for _, lab in pairs])
    frames = ds.frame_dataset(streams, T, size, size, 0, duration)
    return ds.FrameSet(frames, labels), streams


def toy_mlp(hidden: int = 8, blocks: int = 2, bn: bool = True, seed: int = 0, size: int = 4, classes: int = 2,
            neuron=None, readout: str = "voting_membrane"):
    from snnflex.graph import LayerSpec, build_network

    specs = [LayerSpec("flatten")]
    for _ in range(blocks - 1):
        specs.append(LayerSpec("dense", out=hidden))
        if bn:
            specs.append(LayerSpec("batchnorm"))
        specs.append(LayerSpec("lif"))
    specs += [LayerSpec("dense", out=classes), LayerSpec(readout)]
    return build_network(specs, (2, size, size), seed, neuron=neuron)


def if_net(weights: list[np.ndarray], input_shape=(2, 2, 2), readout: str = "voting_if", neuron=None):
    """Bias-free multi-spike IF MLP with the given dense weight matrices."""
    from snnflex.graph import LayerSpec, build_network
    from snnflex.neuron import NeuronParams

    specs = [LayerSpec("flatten")]
    for w in weights[:-1]:
        specs += [LayerSpec("dense", out=w.shape[1]), LayerSpec("lif")]
    specs += [LayerSpec("dense", out=weights[-1].shape[1]), LayerSpec(readout)]
    net = build_network(specs, input_shape, 0, neuron=neuron or NeuronParams.if_multispike())
    dense = [i for i, s in enumerate(specs) if s.kind == "dense"]
    for i, w in zip(dense, weights):
        net.params[f"L{i}.weight"] = np.asarray(w, dtype=np.float64)
    return net


def signed_toy(seed: int = 0):
    """Fixed signed-weight IF net and 20 streams inside ticks [0, 256)."""
    from snnflex import datasets as ds

    r = nx.rng_stream(seed, 3)
    net = if_net([r.normal(0.1, 0.6, (32, 16)), r.normal(0.1, 0.6, (16, 4))], (2, 4, 4))
    p = ds.SyntheticParams(n_samples=20, height=4, width=4, duration=256, rate=0.03, noise_rate=0.005)
    streams = [s for s, _ in ds.gen_synthetic("poisson_twoclass", p, nx.rng_stream(0, 9))]
    return net, streams


ACCEPTANCE: dict[int, str] = {}


def record_criterion(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

from __future__ import annotations

import json

import numpy as np
import pytest

from snnflex import numerics as nx
from snnflex.graph import (
    ForwardStats,
    LayerSpec,
    TemporalConfig,
    build_network,
    fold_bn_remove_bias,
    forward,
    load_checkpoint,
    partition,
    preset,
    save_checkpoint,
    static_encode,
    voting_readout,
)
from snnflex.neuron import NeuronParams
from snnflex.numerics import Tape


def _mlp(blocks: int, width: int = 6, bn: bool = False, seed: int = 0, neuron=None):
    specs = [LayerSpec("flatten")]
    for _ in range(blocks - 1):
        specs.append(LayerSpec("dense", out=width))
        if bn:
            specs.append(LayerSpec("batchnorm"))
        specs.append(LayerSpec("lif"))
    specs += [LayerSpec("dense", out=3), LayerSpec("voting_membrane")]
    return build_network(specs, (2, 2, 2), seed, neuron=neuron)


def test_build_examples():
    net = build_network([LayerSpec("dense", out=2), LayerSpec("lif")], (4,))
    assert net.num_stages == 1
    assert net.num_parameters() == 8
    with pytest.raises(ValueError):
        build_network([], (4,))
    with pytest.raises(ValueError):
        build_network([LayerSpec("voting_if"), LayerSpec("dense", out=2)], (4,))
    with pytest.raises(ValueError):
        build_network([LayerSpec("dense", out=2)], (2, 3, 3))


def test_3c1fc_parameter_count():
    specs, shape = preset("3c1fc_w16", 10, bn=False)
    assert build_network(specs, shape).num_parameters() == 6160


def test_partition_granularity():
    net = _mlp(8)
    assert len(net.blocks) == 8
    assert partition(net, 8).num_stages == 1
    assert partition(net, 1).num_stages == 8
    assert [len(s) for s in partition(net, 3).stages] == [3, 3, 2]
    assert partition(net, 20).num_stages == 1
    with pytest.raises(ValueError):
        partition(net, 0)


def test_bn_stays_with_its_linear_layer():
    net = partition(_mlp(4, bn=True), 1)
    for layers in net.stage_layers():
        for i in layers:
            if net.specs[i].kind == "batchnorm":
                assert i - 1 in layers


def test_partition_shares_parameters():
    net = _mlp(3)
    view = partition(net, 1)
    assert view.params is net.params


def test_forward_shapes_and_errors(rng):
    net = partition(_mlp(3), 1)
    x = rng.normal(size=(4, 5, 2, 2, 2))
    assert forward(net, x, (4, 2, 3)).shape == (5, 3)
    with pytest.raises(ValueError):
        forward(net, x, (4, 2))
    with pytest.raises(ValueError):
        forward(net, x, (3, 2, 3))


def test_uniform_config_equals_single_stage(rng):
    base = _mlp(4, bn=True, seed=3)
    x = rng.uniform(0, 2, size=(5, 7, 2, 2, 2))
    ref = forward(base, x, (5,))
    for g in (1, 2, 3):
        view = partition(base, g)
        np.testing.assert_array_equal(forward(view, x, (5,) * view.num_stages), ref)


def test_downsampling_ttm_inserted(rng):
    net = partition(_mlp(2, seed=1), 1)
    x = rng.uniform(0, 2, size=(4, 3, 2, 2, 2))
    got = forward(net, x, (4, 2))
    # manual: stage 1 at 4 steps, sum frame pairs, stage 2 at 2 steps
    p = net.params
    h = x.reshape(4 * 3, -1) @ p["L1.weight"]
    s = np.stack([np.asarray(v) for v in _lif(h.reshape(4, 3, -1), net.neuron)])
    s2 = np.stack([s[0] + s[1], s[2] + s[3]])
    cur = s2.reshape(2 * 3, -1) @ p["L3.weight"]
    np.testing.assert_allclose(got, cur.reshape(2, 3, -1).sum(axis=0) / 2, rtol=1e-12)


def _lif(x, p: NeuronParams):
    u = np.zeros_like(x[0])
    out = []
    for t in range(len(x)):
        v = p.tau * u + x[t]
        s = (v >= p.v_th).astype(float)
        u = v * (1 - s)
        out.append(s)
    return out


def test_static_encode():
    img = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(static_encode(img, 1)[0], img)
    x = static_encode(img, 4)
    assert x.shape == (4, 2, 3) and all(np.array_equal(f, img) for f in x)
    assert not static_encode(np.zeros((2, 2)), 3).any()
    with pytest.raises(ValueError):
        static_encode(img, 0)


def test_voting_readouts():
    counts = np.array([[[1.0, 0.0]], [[1.0, 1.0]], [[1.0, 0.0]]])
    np.testing.assert_array_equal(voting_readout("voting_if", counts), [[3.0, 1.0]])
    drive = np.full((5, 1, 2), 0.4)
    np.testing.assert_allclose(voting_readout("voting_membrane", drive), [[0.4, 0.4]])
    one = np.array([[[0.3, 0.6]]])
    np.testing.assert_allclose(voting_readout("voting_membrane", one), [[0.3, 0.6]])
    with pytest.raises(ValueError):
        voting_readout("lif", counts)


def test_forward_gradients_cover_all_parameters(rng):
    net = partition(_mlp(3, bn=True), 1)
    x = rng.uniform(0, 2, size=(3, 4, 2, 2, 2))
    seen = []
    for cfg in [(3, 3, 3), (3, 1, 2)]:
        tape = Tape()
        loss = nx.cross_entropy(forward(net, x[: cfg[0]], cfg, tape=tape, mode="train"), np.array([0, 1, 2, 0]))
        seen.append(set(tape.backward(loss)))
    assert seen[0] == seen[1] == set(net.params)


def _bn_net(kind: str):
    if kind == "dense":
        specs = [LayerSpec("flatten"), LayerSpec("dense", out=3, bias=True), LayerSpec("batchnorm"), LayerSpec("lif"),
                 LayerSpec("dense", out=2), LayerSpec("voting_membrane")]
    else:
        specs = [LayerSpec("conv2d", out=3, padding=1), LayerSpec("batchnorm", eps=0.0), LayerSpec("lif"), LayerSpec("flatten"),
                 LayerSpec("dense", out=2), LayerSpec("voting_membrane")]
    return build_network(specs, (1, 2, 2), 0)


def test_fold_identity_bn():
    net = _bn_net("conv")
    net.specs[1].eps = 0.0
    folded, report = fold_bn_remove_bias(net)
    np.testing.assert_array_equal(folded.params["L0.weight"], net.params["L0.weight"])
    assert report.dropped_bias == {"L0": 0.0}
    assert folded.bias_free and not folded.has_bn()
    assert not any(k.endswith(".bias") for k in folded.params)
    assert [s.kind for s in folded.specs] == ["conv2d", "lif", "flatten", "dense", "voting_membrane"]


def test_fold_scale_and_shift():
    net = _bn_net("conv")
    net.params["L1.gamma"] = np.full(3, 2.0)
    net.params["L1.beta"] = np.array([0.0, 0.5, -0.25])
    folded, report = fold_bn_remove_bias(net)
    np.testing.assert_array_equal(folded.params["L0.weight"], 2 * net.params["L0.weight"])
    assert report.dropped_bias["L0"] == 0.5


def test_fold_matches_eval_forward_when_bias_zero(rng):
    net = _bn_net("dense")
    net.bn_state["L2.running_var"] = np.array([0.5, 2.0, 1.5])
    net.params["L2.gamma"] = np.array([1.2, 0.7, 2.0])
    x = rng.uniform(0, 2, size=(3, 4, 1, 2, 2))
    folded, report = fold_bn_remove_bias(net)
    assert report.dropped_bias["L1"] == 0.0
    np.testing.assert_allclose(forward(folded, x, (3,)), forward(net, x, (3,)), rtol=1e-12)


def test_fold_rejects_orphan_bn():
    net = build_network([LayerSpec("batchnorm"), LayerSpec("lif")], (3,))
    with pytest.raises(ValueError):
        fold_bn_remove_bias(net)


def test_checkpoint_round_trip(tmp_path, rng):
    net = partition(_mlp(3, bn=True, neuron=NeuronParams.if_multispike()), 1)
    net.t_min, net.t_max = 1, 4
    net.bn_state["L2.running_mean"] = rng.normal(size=6)
    path = save_checkpoint(net, tmp_path / "m.ckpt", {"method": "MTT"})
    back, meta = load_checkpoint(path)
    assert meta == {"method": "MTT"}
    assert back.num_stages == net.num_stages and back.neuron == net.neuron and back.t_max == 4
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    for k in net.bn_state:
        np.testing.assert_array_equal(back.bn_state[k], net.bn_state[k])
    side = json.loads((tmp_path / "m.ckpt.json").read_text())
    assert side["num_stages"] == net.num_stages
    x = rng.uniform(0, 2, size=(4, 3, 2, 2, 2))
    np.testing.assert_array_equal(forward(back, x, (4, 2, 3)), forward(net, x, (4, 2, 3)))
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_forward_stats(rng):
    net = _mlp(3, neuron=NeuronParams.if_multispike())
    x = rng.uniform(0, 2, size=(4, 5, 2, 2, 2))
    stats = ForwardStats()
    logits = forward(partition(net, 1), x, (4, 4, 4), stats=stats)
    assert len(stats.stage_spikes) == 3 and stats.stage_spikes[-1] == 0.0
    np.testing.assert_allclose(stats.step_logits[-1], logits)
    assert set(stats.layer_spikes) == {2, 4}


def test_presets_build():
    for name in ("3c1fc_w16", "digits_cnn", "event_digits", "event_cnn", "event_mlp"):
        specs, shape = preset(name)
        net = build_network(specs, shape)
        assert net.num_classes == 10
    with pytest.raises(KeyError):
        preset("nope")


def test_temporal_config_bounds():
    with pytest.raises(ValueError):
        TemporalConfig((0, 2))
    with pytest.raises(ValueError):
        TemporalConfig((3, 7), 1, 6)
    assert TemporalConfig.uniform(3, 2).t == (3, 3)

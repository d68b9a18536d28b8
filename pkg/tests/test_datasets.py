from __future__ import annotations

import numpy as np
import pytest

from snnflex import datasets as ds
from snnflex import numerics as nx


def _stream(rows):
    t, x, y, p = (np.array(c) for c in zip(*rows)) if rows else ([], [], [], [])
    return ds.EventStream.from_arrays(t, x, y, p)


def test_csv_load_sorts(tmp_path):
    f = tmp_path / "e.csv"
    f.write_text("t,x,y,p\n5,1,1,0\n2,0,1,1\n9,3,0,1\n")
    ev = ds.load_events(f)
    assert len(ev) == 3 and ev.t.tolist() == [2, 5, 9]


def test_formats_round_trip(tmp_path):
    rng = nx.rng_stream(1)
    n = 500
    s = ds.EventStream.from_arrays(rng.integers(0, 10**6, n), rng.integers(0, 300, n), rng.integers(0, 200, n), rng.integers(0, 2, n))
    for fmt, name in (("csv", "a.csv"), ("packed", "a.evs")):
        path = ds.save_events(s, tmp_path / name, fmt)
        back = ds.load_events(path, fmt)
        np.testing.assert_array_equal(back.events, s.events)
        again = ds.save_events(back, tmp_path / ("b" + name[1:]), fmt)
        assert again.read_bytes() == path.read_bytes()
    a = ds.load_events(tmp_path / "a.csv")
    b = ds.load_events(tmp_path / "a.evs")
    np.testing.assert_array_equal(a.events, b.events)


def test_malformed_inputs(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("t,x,y,p\n1,2,3,0\n4,5,6,2\n")
    with pytest.raises(ds.EventFormatError, match=":3"):
        ds.load_events(f)
    f.write_text("t,x,y,p\n1,2,three,0\n")
    with pytest.raises(ds.EventFormatError, match=":2"):
        ds.load_events(f)
    f.write_text("a,b\n")
    with pytest.raises(ds.EventFormatError):
        ds.load_events(f)
    g = tmp_path / "bad.evs"
    g.write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(ds.EventFormatError, match="magic"):
        ds.load_events(g)
    g.write_bytes(b"EVS1\x02\x00\x00\x00" + b"\x00" * 9)
    with pytest.raises(ds.EventFormatError):
        ds.load_events(g)


def test_frame_examples():
    s = _stream([(0, 0, 0, 0), (49, 1, 0, 1), (50, 0, 1, 0), (99, 1, 1, 1)])
    two = ds.frame_events(s, ds.FrameSpec(2, 2, 2, 2, 0, 100))
    assert two[0].sum() == 2 and two[1].sum() == 2
    assert two[1, 0, 1, 0] == 1
    one = ds.frame_events(s, ds.FrameSpec(1, 2, 2))
    np.testing.assert_array_equal(one[0], [[[1, 0], [1, 0]], [[0, 1], [0, 1]]])
    with pytest.warns(RuntimeWarning):
        empty = ds.frame_events(_stream([]), ds.FrameSpec(3, 2, 2))
    assert empty.shape == (3, 2, 2, 2) and not empty.any()


def test_frame_conserves_counts_and_prefix_property():
    rng = nx.rng_stream(3)
    for _ in range(30):
        n = int(rng.integers(1, 200))
        s = ds.EventStream.from_arrays(rng.integers(0, 120, n), rng.integers(0, 3, n), rng.integers(0, 3, n), rng.integers(0, 2, n))
        for T in (1, 2, 3, 4, 6, 12):
            f = ds.frame_events(s, ds.FrameSpec(T, 3, 3, 2, 0, 120))
            assert f.sum() == n
            for t in range(1, T + 1):
                # first t of T equal-span bins == the stream's first t/T of the span framed at t bins
                stop = 120 * t // T
                sub = s.events[s.events["t"] < stop]
                direct = ds.frame_events(ds.EventStream(sub), ds.FrameSpec(t, 3, 3, 2, 0, stop)) if len(sub) else np.zeros((t, 2, 3, 3))
                if 120 % T == 0:
                    np.testing.assert_array_equal(ds.take_first_frames(f, t), direct)


def test_take_first_frames():
    x = np.arange(3.0)[:, None]
    np.testing.assert_array_equal(ds.take_first_frames(x, 3), x)
    np.testing.assert_array_equal(ds.take_first_frames(x, 1), x[:1])
    np.testing.assert_array_equal(ds.take_first_frames(x, 2), x[:2])
    with pytest.raises(ValueError):
        ds.take_first_frames(x, 4)


def test_synthetic_determinism_and_validation():
    p = ds.SyntheticParams(n_samples=6, duration=500)
    for kind in ("poisson_twoclass", "moving_bar"):
        a = ds.gen_synthetic(kind, p, nx.rng_stream(4))
        b = ds.gen_synthetic(kind, p, nx.rng_stream(4))
        assert all(x.events.tobytes() == y.events.tobytes() and la == lb for (x, la), (y, lb) in zip(a, b))
        assert [lab for _, lab in a] == [0, 1, 0, 1, 0, 1]
    with pytest.raises(ValueError):
        ds.gen_synthetic("poisson_twoclass", ds.SyntheticParams(rate=0.0), nx.rng_stream(0))
    with pytest.raises(ValueError):
        ds.gen_synthetic("nope", p, nx.rng_stream(0))


def test_twoclass_separable_without_noise():
    p = ds.SyntheticParams(n_samples=20, height=4, width=4, duration=1000, rate=0.05, noise_rate=0.0)
    for s, label in ds.gen_synthetic("poisson_twoclass", p, nx.rng_stream(2)):
        f = ds.frame_events(s, ds.FrameSpec(1, 4, 4, 2, 0, 1000))[0]
        left, right = f[..., :2].sum(), f[..., 2:].sum()
        assert (left > 0 and right == 0) if label == 0 else (right > 0 and left == 0)


def test_poisson_rate_within_three_sigma():
    rate = 0.003
    p = ds.SyntheticParams(n_samples=1, height=8, width=8, duration=10_000, rate=rate, noise_rate=0.0)
    (s, _), = ds.gen_synthetic("poisson_twoclass", p, nx.rng_stream(8))
    f = ds.frame_events(s, ds.FrameSpec(1, 8, 8, 2, 0, 10_000))[0]
    active = f[:, :, :4]
    lam = rate * 10_000
    assert abs(active.mean() - lam) < 3 * np.sqrt(lam / active.size)
    assert f[:, :, 4:].sum() == 0


def test_moving_bar_direction():
    p = ds.SyntheticParams(n_samples=2, height=4, width=8, duration=2000, rate=0.05, noise_rate=0.0)
    for s, label in ds.gen_synthetic("moving_bar", p, nx.rng_stream(5)):
        ev = s.events
        early = ev["x"][ev["t"] < 500].mean()
        late = ev["x"][ev["t"] >= 1500].mean()
        assert (late > early) if label == 0 else (late < early)


def test_images_to_events_rate():
    img = np.zeros((1, 1, 4, 4))
    img[0, 0, :, :2] = 1.0
    p = ds.SyntheticParams(duration=20_000, rate=0.01, noise_rate=0.0)
    (s,) = ds.images_to_events(img, p, nx.rng_stream(6))
    f = ds.frame_events(s, ds.FrameSpec(1, 4, 4, 2, 0, 20_000))[0]
    assert f[..., 2:].sum() == 0
    lam = 0.01 / 2 * 20_000
    assert abs(f[..., :2].mean() - lam) < 3 * np.sqrt(lam / 16)
    with pytest.raises(ValueError):
        ds.images_to_events(img, ds.SyntheticParams(rate=0.0), nx.rng_stream(0))


def test_idx_round_trip_and_downsample(tmp_path):
    rng = nx.rng_stream(7)
    imgs = rng.integers(0, 256, size=(5, 28, 28)) / 255.0
    labels = np.arange(5)
    ds.save_images_idx(imgs, tmp_path / "i.idx", labels, tmp_path / "l.idx")
    back, lab = ds.load_images_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert back.shape == (5, 1, 28, 28)
    np.testing.assert_allclose(back[:, 0], imgs, atol=1e-12)
    np.testing.assert_array_equal(lab, labels)
    np.testing.assert_array_equal(ds.downsample(back, 1), back)
    assert ds.downsample(back, 2).shape == (5, 1, 14, 14)
    np.testing.assert_allclose(ds.downsample(np.full((1, 1, 8, 8), 0.3), 2), 0.3)
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 12)
    with pytest.raises(ValueError, match="magic"):
        ds.load_images_idx(tmp_path / "bad.idx")


def test_views_and_minibatches():
    frames = np.arange(4 * 5 * 2.0).reshape(4, 5, 2)
    fs = ds.FrameSet(frames, np.arange(5))
    np.testing.assert_array_equal(fs.encode(np.array([1, 3]), 2), frames[:2, [1, 3]])
    assert len(fs.subset(np.array([0, 1]))) == 2
    st = ds.StaticSet(np.ones((3, 1, 2, 2)), np.zeros(3, int))
    assert st.encode(np.array([0, 2]), 3).shape == (3, 2, 1, 2, 2)
    batches = list(ds.minibatches(10, 4, nx.rng_stream(0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert [len(b) for b in ds.minibatches(10, 4, drop_last=True)] == [4, 4]


def test_reframed_set_spans_whole_window():
    s = _stream([(0, 0, 0, 0), (99, 0, 0, 0)])
    rs = ds.ReframedSet([s], np.array([0]), 1, 1, 100)
    assert rs.encode(np.array([0]), 1).sum() == 2
    np.testing.assert_array_equal(rs.encode(np.array([0]), 2)[:, 0, 0, 0, 0], [1, 1])

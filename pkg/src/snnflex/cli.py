"""``snnflex`` command line: train, sweep, simulate, calibrate, fit, search, cost, noise, gradnorm, gen-data."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis as an
from . import datasets as ds
from . import numerics as nx
from .eventsim import GateError, import_weights, observed_layer, sd_report, simulate_many, timestep_reference
from .graph import build_network, fold_bn_remove_bias, load_checkpoint, preset, save_checkpoint
from .neuron import NeuronParams, SurrogateSpec
from .training import TrainConfig, bn_calibrate, evaluate, finetune_bias_free, train, write_metrics_csv

log = logging.getLogger("snnflex")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_NUMERIC = 0, 1, 2, 3

# every key a config file may set, with its default
DEFAULTS: dict[str, object] = {
    "dataset": "event_digits",  # digits | event_digits | poisson_twoclass | moving_bar | idx | events
    "data_path": "",
    "labels_path": "",
    "n_samples": 1797,
    "test_fraction": 1 / 6,
    "frame_policy": "first_frames",  # first_frames | reframe
    "event_rate": 0.01,
    "noise_rate": 0.0005,
    "duration": 1000,
    "height": 16,
    "width": 16,
    "data_seed": 0,
    "network": "event_digits",
    "bn": True,
    "neuron": "if_multispike",  # lif | if | if_multispike
    "v_th": 1.0,
    "tau": 0.5,
    "surrogate": "triangular",
    "h": 1.0,
    "alpha": 1.0,
    "beta": 5.0,
    "epsilon": 0.01,
    "method": "MTT",
    "s": 3,
    "t_min": 1,
    "t_max": 6,
    "g": 1,
    "sampler_mode": "iid_uniform",
    "epochs": 10,
    "batch_size": 50,
    "lr": 0.1,
    "lr_schedule": "cosine",
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "seed": 0,
    "calibration_batches": 10,
    "finetune_epochs": 0,
    "finetune_lr": 0.01,
    "repeats": 5,
    "output_dir": "runs/default",
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def parse(cls, text: str = "", overrides: Sequence[str] = (), source: str = "<config>") -> RunConfig:
        values = dict(DEFAULTS)
        lines = [(f"{source}:{n}", line) for n, line in enumerate(text.splitlines(), 1)]
        lines += [("<command line>", o) for o in overrides]
        for where, line in lines:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{where}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
        if path is None:
            return cls.parse("", overrides)
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        return cls.parse(p.read_text(encoding="utf-8"), overrides, str(p))

    def validate(self) -> None:
        for key in ("data_path", "labels_path"):
            if self.values[key] and not Path(self.values[key]).exists():
                raise ConfigError(f"{key}: {self.values[key]} does not exist")
        if self.dataset in ("idx", "events") and not self.data_path:
            raise ConfigError(f"dataset={self.dataset} needs data_path")
        if self.lr_schedule != "cosine":
            raise ConfigError("lr_schedule: only 'cosine' is supported")
        if self.frame_policy not in ("first_frames", "reframe"):
            raise ConfigError(f"frame_policy: unknown policy {self.frame_policy!r}")

    def neuron_params(self) -> NeuronParams:
        if self.neuron == "if_multispike":
            return NeuronParams.if_multispike(self.v_th)
        if self.neuron == "if":
            return NeuronParams(v_th=self.v_th, tau=1.0)
        if self.neuron == "lif":
            return NeuronParams(v_th=self.v_th, tau=self.tau)
        raise ConfigError(f"neuron: unknown kind {self.neuron!r}")

    def train_config(self, finetune: bool = False) -> TrainConfig:
        return TrainConfig(
            method=self.method, s=self.s, t_min=self.t_min, t_max=self.t_max, g=self.g,
            epochs=self.finetune_epochs if finetune else self.epochs, batch_size=self.batch_size,
            lr=self.finetune_lr if finetune else self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, sampler_mode=self.sampler_mode,
            seed=self.seed + 1000 if finetune else self.seed,
        )


# ---------------------------------------------------------------------------
# data


@dataclass
class Data:
    train: object
    test: object
    test_streams: list | None  # raw streams for event-driven replay
    test_labels: np.ndarray
    num_classes: int
    height: int = 0
    width: int = 0
    t_stop: int | None = None


def _split(n: int, fraction: float) -> int:
    return n - max(1, int(round(n * fraction)))


def _event_views(cfg: RunConfig, streams: list, labels: np.ndarray, H: int, W: int, t_stop: int | None) -> Data:
    cut = _split(len(streams), cfg.test_fraction)
    if cfg.frame_policy == "first_frames":
        frames = ds.frame_dataset(streams, cfg.t_max, H, W, 0, t_stop)
        tr, te = ds.FrameSet(frames[:, :cut], labels[:cut]), ds.FrameSet(frames[:, cut:], labels[cut:])
    else:
        tr = ds.ReframedSet(streams[:cut], labels[:cut], H, W, t_stop)
        te = ds.ReframedSet(streams[cut:], labels[cut:], H, W, t_stop)
    return Data(tr, te, streams[cut:], labels[cut:], int(labels.max()) + 1, H, W, t_stop)


def load_data(cfg: RunConfig) -> Data:
    rng = nx.rng_stream(cfg.data_seed, 7)
    if cfg.dataset in ("digits", "idx"):
        if cfg.dataset == "digits":
            images, labels = ds.load_digits()
        else:
            images, labels = ds.load_images_idx(cfg.data_path, cfg.labels_path or None)
            images = images[:, None] if images.ndim == 3 else images
        images, labels = images[: cfg.n_samples], labels[: cfg.n_samples]
        cut = _split(len(labels), cfg.test_fraction)
        return Data(ds.StaticSet(images[:cut], labels[:cut]), ds.StaticSet(images[cut:], labels[cut:]),
                    None, labels[cut:], int(labels.max()) + 1)
    params = ds.SyntheticParams(n_samples=cfg.n_samples, height=cfg.height, width=cfg.width, duration=cfg.duration,
                                rate=cfg.event_rate, noise_rate=cfg.noise_rate)
    if cfg.dataset == "event_digits":
        images, labels = ds.load_digits()
        images, labels = images[: cfg.n_samples], labels[: cfg.n_samples]
        streams = ds.images_to_events(images, params, rng)
        return _event_views(cfg, streams, labels, 8, 8, cfg.duration)
    if cfg.dataset in ("poisson_twoclass", "moving_bar"):
        pairs = ds.gen_synthetic(cfg.dataset, params, rng)
        streams, labels = [s for s, _ in pairs], np.array([lab for _, lab in pairs])
        return _event_views(cfg, streams, labels, cfg.height, cfg.width, cfg.duration)
    if cfg.dataset == "events":
        streams, labels = read_event_dir(cfg.data_path)
        return _event_views(cfg, streams, labels, cfg.height, cfg.width, None if cfg.duration <= 0 else cfg.duration)
    raise ConfigError(f"dataset: unknown kind {cfg.dataset!r}")


def read_event_dir(path: str | Path) -> tuple[list, np.ndarray]:
    """Directory holding ``labels.csv`` (file,label) next to the event files."""
    root = Path(path)
    index = root / "labels.csv"
    if not index.is_file():
        raise ConfigError(f"{root} has no labels.csv")
    streams, labels = [], []
    with open(index, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            streams.append(ds.load_events(root / row["file"]))
            labels.append(int(row["label"]))
    return streams, np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# reports


def _write_json(path: Path, obj) -> None:
    path.write_text(an.dumps(obj) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: RunConfig) -> int:
    data = load_data(cfg)
    out = _out_dir(cfg)
    specs, shape = preset(cfg.network, data.num_classes, cfg.bn)
    surrogate = SurrogateSpec(cfg.surrogate, cfg.h, cfg.alpha, cfg.beta)
    net = build_network(specs, shape, cfg.seed, cfg.neuron_params(), surrogate)
    net.epsilon = cfg.epsilon
    tcfg = cfg.train_config()
    net, metrics = train(net, data.train, tcfg, log=lambda m: log.info("epoch %d losses %s acc %.4f", m.epoch, m.losses, m.train_acc))
    write_metrics_csv(metrics, out / "metrics.csv", include_time=False)
    _write_csv(out / "timing.csv", ["epoch", "wall_time"], [(m.epoch, f"{m.wall_time:.3f}") for m in metrics])
    meta = {"method": tcfg.method, "num_stages": net.num_stages, "config": cfg.values}
    save_checkpoint(net, out / "model.ckpt", meta)
    final = net
    if net.has_bn():
        final, report = bn_calibrate(net, data.train, cfg.calibration_batches, cfg.t_max, cfg.batch_size)
        save_checkpoint(final, out / "model_calibrated.ckpt", {**meta, "calibrated_at": list(report.config)})
    if cfg.finetune_epochs > 0:
        folded, fold = fold_bn_remove_bias(final)
        tuned, ft_metrics = finetune_bias_free(folded, data.train, cfg.train_config(finetune=True))
        write_metrics_csv(ft_metrics, out / "finetune_metrics.csv", include_time=False)
        save_checkpoint(tuned, out / "model_bias_free.ckpt", {**meta, "dropped_bias": fold.dropped_bias})
        final = tuned
    acc = evaluate(final, data.test, cfg.t_max)
    print(f"test accuracy at T={cfg.t_max}: {acc:.2f}")
    return EXIT_OK


def _load_net(args):
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    return load_checkpoint(args.checkpoint)


def cmd_sweep(args, cfg: RunConfig) -> int:
    Ts = sorted(set(_int_list(args.T)))
    if not Ts:
        raise ConfigError("empty T list")
    net, _ = _load_net(args)
    data = load_data(cfg)
    rows = []
    for T in Ts:
        model = net
        if args.recalibrate and net.has_bn():
            model, _ = bn_calibrate(net, data.train, cfg.calibration_batches, T, cfg.batch_size)
        rows.append((T, f"{evaluate(model, data.test, T):.4f}"))
    path = Path(args.out) if args.out else _out_dir(cfg) / "sweep.csv"
    _write_csv(path, ["T", "accuracy"], rows)
    for T, acc in rows:
        print(f"T={T}\t{acc}")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    net, _ = _load_net(args)
    try:
        anet = import_weights(net)
    except GateError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GATE
    data = load_data(cfg)
    if data.test_streams is None:
        raise ConfigError("simulate needs an event dataset")
    obs = observed_layer(net)
    readout, seen = simulate_many(anet, data.test_streams, workers=args.workers, observe=obs)
    acc = 100.0 * float((readout.argmax(axis=1) == data.test_labels).mean())
    report = {"event_accuracy": acc, "observed_layer": obs}
    if args.reference is not None:
        ref_out, ref_seen = timestep_reference(net, data.test_streams, args.reference, 0, data.t_stop, observe=obs)
        sd = sd_report(ref_seen, seen, reference_T=args.reference)
        report.update({"reference_T": args.reference, "sd": sd.sd,
                       "timestep_accuracy": 100.0 * float((ref_out.argmax(axis=1) == data.test_labels).mean())})
    path = Path(args.out) if args.out else _out_dir(cfg) / "simulate.json"
    _write_json(path, report)
    print(an.dumps(report))
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig) -> int:
    net, meta = _load_net(args)
    data = load_data(cfg)
    T = args.T or cfg.t_max
    new, report = bn_calibrate(net, data.train, cfg.calibration_batches, T, cfg.batch_size)
    out = Path(args.out) if args.out else _out_dir(cfg) / "model_calibrated.ckpt"
    save_checkpoint(new, out, {**meta, "calibrated_at": list(report.config)})
    _write_json(out.with_suffix(".report.json"), {"batches": report.batches, "config": list(report.config),
                                                   "deltas": report.deltas})
    print(f"calibrated {len(report.deltas)} BN layers over {report.batches} batches at {report.config}")
    return EXIT_OK


def cmd_fit(args, cfg: RunConfig) -> int:
    samples = []
    with open(args.samples, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ts = [int(row[k]) for k in sorted((k for k in row if k.startswith("t")), key=lambda k: int(k[1:]))]
            samples.append((ts, float(row["acc"])))
    model = an.fit_estimator(samples)
    doc = model.to_dict()
    if args.out:
        _write_json(Path(args.out), doc)
    print(an.dumps(doc))
    return EXIT_OK


def cmd_search(args, cfg: RunConfig) -> int:
    model = an.EstimatorModel.from_dict(json.loads(Path(args.model).read_text(encoding="utf-8")))
    energy = an.EnergyModel(_float_list(args.R))
    budget = args.budget if args.budget is not None else energy.uniform_budget(args.budget_T or cfg.t_max)
    result = an.search_optimal(model, energy, args.t_min or cfg.t_min, args.t_max or cfg.t_max, budget)
    doc = {**model.to_dict(), "R": energy.R.tolist(), **result.to_dict()}
    if args.out:
        _write_json(Path(args.out), doc)
    print(an.dumps(doc))
    return EXIT_OK


def cmd_cost(args, cfg: RunConfig) -> int:
    print(f"{an.cost_ratio(args.s, args.t_min, args.t_max, args.T):.4g}")
    return EXIT_OK


def cmd_noise(args, cfg: RunConfig) -> int:
    net, _ = _load_net(args)
    data = load_data(cfg)
    spec = an.NoiseSpec(tuple(_float_list(args.sigma2)), args.target, args.repeats or cfg.repeats)
    rows = an.noise_robustness(net, spec, data.test, nx.rng_stream(cfg.seed, 5), args.T or cfg.t_max)
    path = Path(args.out) if args.out else _out_dir(cfg) / "noise.csv"
    _write_csv(path, ["sigma2", "mean", "min", "max"], [(r["sigma2"], r["mean"], r["min"], r["max"]) for r in rows])
    for r in rows:
        print(f"sigma2={r['sigma2']}\tmean={r['mean']:.2f}\tmin={r['min']:.2f}\tmax={r['max']:.2f}")
    return EXIT_OK


def cmd_gradnorm(args, cfg: RunConfig) -> int:
    net, _ = _load_net(args)
    data = load_data(cfg)
    w, x = an.gradient_metrics(net, data.train, args.T or cfg.t_max)
    doc = {"grad_norm_w": w, "mean_grad_norm_x": x}
    if args.out:
        _write_json(Path(args.out), doc)
    print(an.dumps(doc))
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rng = nx.rng_stream(cfg.data_seed, 7)
    params = ds.SyntheticParams(n_samples=cfg.n_samples, height=cfg.height, width=cfg.width, duration=cfg.duration,
                                rate=cfg.event_rate, noise_rate=cfg.noise_rate)
    if cfg.dataset == "event_digits":
        images, labels = ds.load_digits()
        pairs = list(zip(ds.images_to_events(images[: cfg.n_samples], params, rng), labels[: cfg.n_samples]))
    elif cfg.dataset in ("poisson_twoclass", "moving_bar"):
        pairs = ds.gen_synthetic(cfg.dataset, params, rng)
    else:
        raise ConfigError(f"gen-data cannot generate dataset {cfg.dataset!r}")
    ext = "evs" if args.format == "packed" else "csv"
    rows = []
    for i, (stream, label) in enumerate(pairs):
        name = f"sample_{i:05d}.{ext}"
        ds.save_events(stream, out / name, args.format)
        rows.append((name, int(label)))
    _write_csv(out / "labels.csv", ["file", "label"], rows)
    print(f"wrote {len(rows)} streams to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snnflex", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="BLAS / worker thread count")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, serialised execution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, checkpoint=False):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if checkpoint:
            p.add_argument("checkpoint")
        return p

    add("train", cmd_train)
    p = add("sweep", cmd_sweep, checkpoint=True)
    p.add_argument("--T", required=True, help="comma-separated step counts")
    p.add_argument("--recalibrate", action="store_true")
    p.add_argument("--out")
    p = add("simulate", cmd_simulate, checkpoint=True)
    p.add_argument("--reference", type=int, default=None, help="time-stepped reference T")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p = add("calibrate", cmd_calibrate, checkpoint=True)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--out")
    p = add("fit", cmd_fit)
    p.add_argument("samples", help="CSV with columns t1..tG,acc")
    p.add_argument("--out")
    p = add("search", cmd_search)
    p.add_argument("model", help="estimator JSON from 'fit'")
    p.add_argument("--R", required=True, help="comma-separated stage firing rates")
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--budget-T", dest="budget_T", type=int, default=None)
    p.add_argument("--t-min", dest="t_min", type=int, default=None)
    p.add_argument("--t-max", dest="t_max", type=int, default=None)
    p.add_argument("--out")
    p = add("cost", cmd_cost)
    p.add_argument("--s", type=int, default=3)
    p.add_argument("--t-min", dest="t_min", type=int, default=1)
    p.add_argument("--t-max", dest="t_max", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p = add("noise", cmd_noise, checkpoint=True)
    p.add_argument("--sigma2", default="0,0.001,0.002,0.005,0.01")
    p.add_argument("--target", choices=("weights", "inputs"), default="weights")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--out")
    p = add("gradnorm", cmd_gradnorm, checkpoint=True)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--out")
    p = add("gen-data", cmd_gen_data)
    p.add_argument("--format", choices=("csv", "packed"), default="packed")
    return parser


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        os.environ["OMP_NUM_THREADS"] = str(n)
        return
    threadpool_limits(n)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.deterministic:
        args.threads = 1
        if hasattr(args, "workers"):
            args.workers = 1
    elif hasattr(args, "workers") and args.threads:
        args.workers = max(args.workers, args.threads)
    _limit_threads(args.threads)
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        return args.fn(args, cfg)
    except (ConfigError, FileNotFoundError, ds.EventFormatError) as exc:
        print(f"snnflex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GateError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GATE
    except (nx.NonFiniteError, nx.RankDeficientError, FloatingPointError) as exc:
        print(f"snnflex: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"snnflex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()

"""Command-line entry point: ``gen-data``, ``train``, ``sample``, ``eval`` and ``check``.

Exit codes: 0 success, 2 configuration error, 3 check failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from .checks import SUITES, run_suite
from .config import DATA_KEYS, ConfigError, RunConfig, load_section
from .datasets import DatasetSpec, read_states, write_dataset, write_states
from .metrics import evaluate
from .network import init_params
from .objective import METRIC_COLUMNS, Checkpoint, train
from .sampler import GUIDED_DEFAULTS, GuidanceSpec, SamplerConfig, ThinningError, sample, worker_count
from .trace import write_traces

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4


class InputError(Exception):
    """Unreadable or malformed input file."""


def _read(fn, path, what):
    try:
        return fn(path)
    except ConfigError:
        raise
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed {what} {path}: {exc}") from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_observations(path):
    """Line-delimited observations: a JSON array of ``d`` values, or an object
    ``{"x": [...], "slot": k}`` giving an explicit 1-based position."""
    values, slots = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if isinstance(rec, dict):
                values.append(rec["x"])
                slots.append(rec.get("slot"))
            else:
                values.append(rec)
                slots.append(None)
    if not values:
        raise ValueError("no observations")
    if any(s is not None for s in slots) and any(s is None for s in slots):
        raise ValueError("either every observation has a slot or none does")
    obs = np.array(values, dtype=np.float64)
    return obs, (None if slots[0] is None else np.array(slots, dtype=np.int64))


def cmd_gen_data(args):
    base = {}
    if args.config:
        base = _read(lambda p: load_section(p, "data", DATA_KEYS), args.config, "config")
    params = dict(base.get("params", {}))
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = _parse_value(v)
    try:
        spec = DatasetSpec(
            kind=args.kind or base.get("kind", "toy2"),
            size=args.size if args.size is not None else base.get("size", 1000),
            seed=args.seed if args.seed is not None else base.get("seed", 0),
            params=params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    write_dataset(args.out, spec)
    return EXIT_OK


def _load_config(path):
    return _read(RunConfig.load, path, "config") if path else None


def cmd_train(args):
    cfg = _read(RunConfig.load, args.config, "config")
    data_path = args.data or cfg.paths.get("data")
    out = args.out or cfg.paths.get("checkpoint")
    if not data_path or not out:
        raise ConfigError("train needs a dataset (--data or paths.data) and an output (--out or paths.checkpoint)")
    metrics_path = args.metrics or cfg.paths.get("metrics") or out + ".metrics.csv"
    data = _read(read_states, data_path, "dataset")
    if data.d != cfg.schedule.d or data.N > cfg.schedule.N:
        raise ConfigError(f"dataset has (d={data.d}, N={data.N}); config expects "
                          f"(d={cfg.schedule.d}, N={cfg.schedule.N})")
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    states = [s if s.N == cfg.schedule.N else type(s)(s.n, s.x, s.d, cfg.schedule.N) for s in data]
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg.arch, rng)
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)

        def on_step(step, lb):
            w.writerow([step] + [repr(v) for v in lb.row(step)[1:-1]] + [lb.clamp_count])

        ckpt, _ = train(states, params, cfg.schedule, tcfg, rng, on_step=on_step)
    ckpt.save(out)
    return EXIT_OK


def _sampler_config(args, base):
    kw = {}
    if args.observe and not args.no_guided_defaults:
        kw.update(GUIDED_DEFAULTS)
    flag_map = {"dt": "dt", "dt_coarse": "dt_coarse", "correctors": "C", "snr": "corrector_snr",
                "corrector_start": "corrector_start_frac", "rate_mode": "rate_mode",
                "thinning": "thinning", "seed": "seed", "block_size": "block_size",
                "step_norm": "step_norm"}
    for flag, key in flag_map.items():
        v = getattr(args, flag)
        if v is not None:
            kw[key] = v
    if args.dim_corrector:
        kw["use_dim_corrector"] = True
    if args.literal_drift:
        kw["literal_drift"] = True
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_sample(args):
    cfg = _load_config(args.config)
    ckpt = _read(Checkpoint.load, args.checkpoint, "checkpoint")
    scfg = _sampler_config(args, cfg.sampler if cfg else SamplerConfig())
    guidance = None
    if args.observe:
        obs, slots = _read(read_observations, args.observe, "observation file")
        if obs.ndim != 2 or obs.shape[1] != ckpt.arch.d:
            raise ConfigError(f"observations must be length-{ckpt.arch.d} vectors")
        if obs.shape[0] > ckpt.arch.N:
            raise ConfigError("more observations than the maximum component count")
        guidance = GuidanceSpec(obs, slots, weight=args.guidance_weight)
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    out = args.out or (cfg.paths.get("samples") if cfg else None)
    if not out:
        raise ConfigError("sample needs --out or paths.samples")
    trace_path = args.trace or (cfg.paths.get("traces") if cfg else None)
    params = ckpt.model_params(use_ema=not args.raw_params)
    try:
        states, traces = sample(params, scfg, args.count, guidance=guidance, schedule=ckpt.schedule,
                                keep_traces=bool(trace_path))
    except ThinningError as exc:
        raise ConfigError(str(exc)) from None
    write_states(out, states, ckpt.arch.d, ckpt.arch.N, "samples", scfg.seed)
    if trace_path:
        write_traces(trace_path, traces)
    return EXIT_OK


def cmd_eval(args):
    samples = _read(read_states, args.samples, "samples")
    data = _read(read_states, args.data, "dataset")
    if samples.d != data.d or samples.N != data.N:
        raise ConfigError(f"samples (d={samples.d}, N={samples.N}) and data (d={data.d}, N={data.N}) differ")
    observed = None
    if args.observe:
        observed, _ = _read(read_observations, args.observe, "observation file")
    try:
        report = evaluate(samples.states, data.states, data.N, observed, args.bandwidth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_check(args):
    suites = SUITES if args.suite == "all" else (args.suite,)
    seed = 0 if args.seed is None else args.seed
    results = []
    for name in suites:
        for r in run_suite(name, seed):
            print(r.line(), flush=True)
            results.append(r)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([{"name": r.name, "value": r.value, "threshold": r.threshold, "passed": r.passed}
                       for r in results], fh, indent=2)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def build_parser():
    p = argparse.ArgumentParser(prog="jumpdiff", description="Trans-dimensional jump diffusion models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g, out_required=True)
    g.add_argument("--kind", choices=["toy2", "clusters", "sequences"])
    g.add_argument("--size", type=int)
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="dataset parameter (JSON value)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data")
    t.add_argument("--metrics")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--dt", type=float)
    s.add_argument("--dt-coarse", type=float)
    s.add_argument("--correctors", type=int, help="corrector steps per time step")
    s.add_argument("--snr", type=float, help="corrector signal-to-noise ratio")
    s.add_argument("--corrector-start", type=float, help="correctors run for t below this fraction of T")
    s.add_argument("--dim-corrector", action="store_true")
    s.add_argument("--rate-mode", choices=["prop3", "direct"])
    s.add_argument("--thinning", choices=["raise", "clip"])
    s.add_argument("--literal-drift", action="store_true", help="drift without the g^2 factor on the score")
    s.add_argument("--block-size", type=int)
    s.add_argument("--step-norm", choices=["pooled", "per_state"],
                   help="corrector step from norms averaged over chains or per chain")
    s.add_argument("--raw-params", action="store_true", help="use raw rather than averaged weights")
    s.add_argument("--observe", help="observations to guide toward")
    s.add_argument("--guidance-weight", type=float, default=1.0)
    s.add_argument("--no-guided-defaults", action="store_true",
                   help="keep corrector and thinning settings unchanged when guiding")
    s.add_argument("--trace", help="write per-chain trajectories as CSV")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compare samples with a dataset")
    common(e)
    e.add_argument("--samples", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--observe", help="observations for the conditional dimension law")
    e.add_argument("--bandwidth", type=float, default=0.1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run oracle check suites")
    common(c)
    c.add_argument("suite", choices=list(SUITES) + ["all"])
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        worker_count()
        return args.func(args)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

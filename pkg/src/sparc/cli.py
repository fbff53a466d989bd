"""Command-line entry point.

    sparc gen-data  -> train.csv, cal.csv, manifest.json
    sparc train     -> model.json, loss.csv
    sparc calibrate -> calibration.json, histogram_{par,perp}.{csv,svg}
    sparc run       -> results.csv (+ trace.csv / trace.svg)
    sparc report    -> table.md, rates.svg

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import conformal, datastore, harness, predictor
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("sparc")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _seed(args, cfg: RunConfig) -> int:
    return cfg.master_seed if args.seed is None else args.seed


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    n_train = cfg.experiment.train_samples if args.train_samples is None else args.train_samples
    n_cal = cfg.experiment.cal_samples if args.cal_samples is None else args.cal_samples
    if n_train < 1 or n_cal < 1:
        raise UsageError("sample counts must be positive")
    out = _out_dir(args, cfg)
    episodes = datastore.generate_dataset(n_train + n_cal, cfg.world, cfg.pedestrian, seed)
    train, cal = datastore.split(episodes, n_cal / (n_train + n_cal), seed)
    datastore.write_trajectories(train, out / "train.csv")
    datastore.write_trajectories(cal, out / "cal.csv")
    doc = datastore.manifest(train, cal, seed, cfg.world, cfg.pedestrian)
    datastore.write_manifest(doc, out / "manifest.json")
    print(f"wrote {doc['n_train_samples']} train / {doc['n_cal_samples']} cal samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _existing(args.data, "data file")
    tcfg = cfg.predictor.train
    overrides = {"seed": _seed(args, cfg)}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    tcfg = dataclasses.replace(tcfg, **overrides)
    out = _out_dir(args, cfg)
    episodes = datastore.read_trajectories(data, cfg.world)
    model, trace = predictor.train(episodes, tcfg, cfg.predictor.feature_window)
    predictor.save_model(model, out / "model.json")
    with open(out / "loss.csv", "w") as fh:
        fh.write("epoch,lr,loss\n")
        for e, loss in enumerate(trace):
            fh.write(f"{e},{tcfg.lr_at(e)!r},{format(loss, '.17g')}\n")
    print(f"trained {tcfg.epochs} epochs on {datastore.n_samples(episodes)} samples -> {out / 'model.json'}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    model = predictor.load_model(_existing(args.model, "model file"))
    episodes = datastore.read_trajectories(_existing(args.data, "data file"), cfg.world)
    mode = args.mode or cfg.conformal.score_mode
    alphas = args.alpha or list(cfg.conformal.alphas)
    for a in alphas:
        if not 0 <= a <= 1:
            raise UsageError(f"alpha must lie in [0, 1], got {a}")
    out = _out_dir(args, cfg)
    scores = conformal.nonconformity_scores(model, episodes, mode)
    profiles = [conformal.profile_from_scores(scores, a) for a in alphas]
    conformal.save_profiles(profiles, out / "calibration.json")
    for p in profiles:
        if not p.finite:
            log.warning("alpha=%g gives an unbounded region with n_cal=%d; use a larger alpha or more data", p.alpha, p.n_cal)
        print(f"alpha={p.alpha:g}: r_par={p.r_par:.4f} r_perp={p.r_perp:.4f} (n_cal={p.n_cal}, {p.score_mode})")
    bins = args.bins or cfg.conformal.n_bins
    for dim in ("par", "perp"):
        markers = {f"R({p.alpha:g})": getattr(p, f"r_{dim}") for p in profiles}
        hist = harness.score_histogram(getattr(scores, dim), bins, markers)
        harness.write_histogram_csv(hist, out / f"histogram_{dim}.csv")
        harness.plot_histogram_svg(hist, out / f"histogram_{dim}.svg", title=f"nonconformity scores ({dim})")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    kinds = harness.CONTROLLERS if args.controller == "all" else (args.controller,)
    model = None
    if any(k != "random" for k in kinds):
        if not args.model:
            raise UsageError(f"--model is required for controller {args.controller}")
        model = predictor.load_model(_existing(args.model, "model file"))
    profiles = []
    if "sparc" in kinds:
        if not args.calibration:
            raise UsageError("--calibration is required for the sparc controller")
        profiles = conformal.load_profiles(_existing(args.calibration, "calibration file"))
        if args.alpha is not None:
            profiles = [p for p in profiles if math.isclose(p.alpha, args.alpha)]
            if not profiles:
                raise UsageError(f"no profile for alpha={args.alpha} in {args.calibration}")
        for p in profiles:
            if not p.finite:
                raise UsageError(f"profile alpha={p.alpha:g} has an infinite radius")
    n_trials = cfg.experiment.n_trials if args.trials is None else args.trials
    if n_trials < 0:
        raise UsageError("--trials must be non-negative")
    threads = args.threads
    if threads is None and os.environ.get("SPARC_THREADS"):
        threads = int(os.environ["SPARC_THREADS"])
    out = _out_dir(args, cfg)
    table = harness.run_experiment(
        n_trials, profiles, model, cfg.world, cfg.pedestrian, cfg.filter, seed,
        controllers=kinds, threads=threads, chunk=cfg.experiment.chunk,
    )
    harness.write_results(table, out / "results.csv")
    print(harness.render_markdown(table), end="")
    if args.trace is not None:
        kind = kinds[0]
        prof = profiles[0] if kind == "sparc" else None
        trial = harness.run_trial(kind, prof.alpha if prof else None, model, prof, cfg.world, cfg.pedestrian,
                                  cfg.filter, seed, index=args.trace, trace=True)
        steps = harness.region_trace(trial)
        harness.write_trace_csv(steps, out / "trace.csv")
        harness.plot_trace_svg(steps, out / "trace.svg", cfg.world)
    return 0


def cmd_report(args) -> int:
    table = harness.read_results(_existing(args.input, "results file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    md = harness.render_markdown(table)
    (out / "table.md").write_text(md)
    harness.plot_rates_svg(table, out / "rates.svg")
    print(md, end="")
    return 0


def cmd_defaults(args) -> int:
    print(json.dumps(RunConfig().to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparc", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration (flags override it)")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (default: config master_seed)")

    g = sub.add_parser("gen-data", help="simulate constant-speed episodes and split train/cal")
    common(g)
    g.add_argument("--train-samples", type=int, help="training step-samples (default 1e6)")
    g.add_argument("--cal-samples", type=int, help="calibration step-samples (default 1e5)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the velocity predictor")
    common(t)
    t.add_argument("--data", required=True, help="training trajectories CSV")
    t.add_argument("--epochs", type=int, help="training epochs (default 50)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="conformal radii and score histograms")
    common(c, seed=False)
    c.add_argument("--model", required=True, help="model.json")
    c.add_argument("--data", required=True, help="calibration trajectories CSV")
    c.add_argument("--alpha", type=float, nargs="+", help="miscoverage levels (default from config)")
    c.add_argument("--mode", choices=conformal.SCORE_MODES, help="score mode (default per_step)")
    c.add_argument("--bins", type=int, help="histogram bins")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="closed-loop Monte-Carlo trials")
    common(r)
    r.add_argument("--controller", choices=harness.CONTROLLERS + ("all",), default="all")
    r.add_argument("--alpha", type=float, help="use only the profile with this alpha")
    r.add_argument("--model", help="model.json (needed for sparc and vanilla)")
    r.add_argument("--calibration", help="calibration.json (needed for sparc)")
    r.add_argument("--trials", type=int, help="number of paired trials (default 1e4)")
    r.add_argument("--trace", type=int, metavar="INDEX", help="also trace trial INDEX of the first controller")
    r.add_argument("--threads", type=int, help="worker threads (env SPARC_THREADS)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render results.csv as a markdown table and plot")
    rep.add_argument("--in", dest="input", required=True, help="results.csv")
    rep.add_argument("--out", required=True, help="output directory")
    rep.set_defaults(func=cmd_report)

    d = sub.add_parser("defaults", help="print the default configuration as JSON")
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, predictor.ModelFormatError, datastore.TrajectoryFormatError,
            harness.ResultsFormatError, conformal.UnboundedRegionError) as e:
        print(f"sparc: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"sparc: runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

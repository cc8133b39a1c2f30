"""Command line entry point: ``sigmoe <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attention, experiments, identifiability, report
from .estimation import Dataset, FitConfig, SynthesisConfig, fit, synthesize_dataset
from .model import ContractError, ExpertSpec, MixingMeasure
from .streams import generator
from .voronoi import LOSS_KINDS, compute_loss

ATTN_THRESHOLD = 1e-10

PROBE_EXPERTS = {
    "linear": ExpertSpec.linear,
    "poly2": lambda d: ExpertSpec.polynomial(d, 2),
    "relu": lambda d: ExpertSpec.two_layer(d, "relu"),
    "gelu": lambda d: ExpertSpec.two_layer(d, "gelu"),
    "relu-ridge": lambda d: ExpertSpec.ridge(d, "relu"),
    "gelu-ridge": lambda d: ExpertSpec.ridge(d, "gelu"),
}


def _dump(obj):
    print(json.dumps(obj, indent=2))


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def load_measure(path):
    """A mixing measure from a measure JSON, a FitResult JSON or a dataset sidecar."""
    data = _load_json(path)
    for key in ("estimate", "ground_truth"):
        if key in data:
            data = data[key]
            break
    return MixingMeasure.from_dict(data)


# ---------------------------------------------------------------------------
# subcommands

def cmd_attn_check(args):
    rng = generator(args.seed, "misc", 0)
    worst = attention.equivalence_residual(args.trials, rng, args.max_n, args.max_d)
    ok = worst <= ATTN_THRESHOLD
    print(f"max residual {worst:.3e} over {args.trials} instances: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_synth(args):
    if args.truth:
        truth = load_measure(args.truth)
    else:
        cfg = experiments.ExperimentConfig(truth_gating=args.gating, score=args.score, regime=args.regime,
                                           d=args.d, n_star=args.n_star, seed=args.truth_seed)
        truth = experiments.make_ground_truth(cfg, args.expert)
    scfg = SynthesisConfig(truth.d, args.n, truth, args.noise_var, args.seed)
    data = synthesize_dataset(scfg)
    out = Path(args.out)
    try:
        with out.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{j + 1}" for j in range(truth.d)] + ["y"])
            for x, y in zip(data.X, data.Y):
                w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
        out.with_suffix(".json").write_text(json.dumps(scfg.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset {out}: {exc}") from exc
    print(f"wrote {data.n} rows to {out} and config to {out.with_suffix('.json')}")
    return 0


def read_dataset(path):
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    return Dataset(arr[:, :-1], arr[:, -1])


def cmd_fit(args):
    data = read_dataset(args.data)
    cfg = FitConfig.from_dict(_load_json(args.config)) if args.config else FitConfig()
    truth_path = args.truth or Path(args.data).with_suffix(".json")
    truth = load_measure(truth_path)
    res = fit(data, cfg, truth=truth)
    payload = res.to_dict()
    payload["config"] = cfg.to_dict()
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"objective {res.final_objective:.6g} after {res.iterations} iterations; wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_loss(args):
    rep = compute_loss(args.kind, load_measure(args.fitted), load_measure(args.truth), r=args.r)
    _dump(rep.to_dict())
    return 0


def cmd_ident_probe(args):
    mode = identifiability.ProbeMode(args.mode)
    if args.score and args.score != mode.score.value:
        raise ContractError(f"mode {mode.value} uses the {mode.score.value} score; "
                            f"use {'partial-' if args.score == 'partial' else ''}"
                            f"{mode.value.replace('partial-', '')} for the {args.score} score")
    spec = PROBE_EXPERTS[args.expert](args.d)
    rep = identifiability.probe(mode, spec, args.atoms, generator(args.seed, "probe"), args.threshold)
    _dump(rep.to_dict())
    return 0


def _sweep_config(args):
    cfg = (experiments.desk_config if args.desk else experiments.scenario_config)(args.scenario)
    if args.config:
        merged = cfg.to_dict()
        over = _load_json(args.config)
        if "fit" in over:
            merged["fit"] = {**merged["fit"], **over.pop("fit")}
        merged.update(over)
        cfg = experiments.ExperimentConfig.from_dict(merged)
    return cfg


def cmd_sweep(args):
    cfg = _sweep_config(args)
    progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    result = experiments.run_sweep(cfg, jobs=args.jobs, timing=args.timing, progress=progress)
    paths = report.emit_outputs(result, args.out)
    slopes = {}
    for label, s in result.slopes.items():
        slopes[label] = s.slope if s else None
        shown = f"{s.slope:.3f} +- {s.stderr:.3f}" if s else "n/a"
        print(f"{label}: slope {shown}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    if args.check:
        problems = experiments.check_slopes(cfg.scenario, slopes)
        for p in problems:
            print(f"CHECK FAIL {p}")
        if problems:
            return 2
        print("CHECK PASS")
    return 0


def cmd_plot(args):
    report.plot_records(args.records, args.out, kind=args.kind, title=args.title)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sigmoe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log optimiser warnings")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attn-check", help="verify attention rows equal their MoE form")
    a.add_argument("--trials", type=int, default=200)
    a.add_argument("--max-n", type=int, default=5)
    a.add_argument("--max-d", type=int, default=4)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_attn_check)

    s = sub.add_parser("synth", help="synthesize a regression dataset")
    s.add_argument("--out", required=True, help="CSV path; a JSON sidecar is written next to it")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--noise-var", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--truth", help="ground truth measure JSON (otherwise drawn at random)")
    s.add_argument("--expert", choices=sorted(experiments.EXPERTS), default="relu")
    s.add_argument("--gating", choices=["sigmoid", "softmax"], default="sigmoid")
    s.add_argument("--score", choices=["full", "partial"], default="full")
    s.add_argument("--regime", choices=["dense", "sparse"], default="dense")
    s.add_argument("--d", type=int, default=8)
    s.add_argument("--n-star", type=int, default=8)
    s.add_argument("--truth-seed", type=int, default=2024)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="least squares fit of a dataset CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--config", help="FitConfig JSON")
    f.add_argument("--truth", help="measure used for warm starts (default: the dataset sidecar)")
    f.add_argument("--out", help="FitResult JSON path (default: stdout)")
    f.set_defaults(func=cmd_fit)

    lo = sub.add_parser("loss", help="Voronoi loss between a fitted and a reference measure")
    lo.add_argument("--fitted", required=True)
    lo.add_argument("--truth", required=True)
    lo.add_argument("--kind", choices=LOSS_KINDS, required=True)
    lo.add_argument("--r", type=float, default=1.0)
    lo.set_defaults(func=cmd_loss)

    ip = sub.add_parser("ident-probe", help="numerical identifiability probe")
    ip.add_argument("--mode", choices=[m.value for m in identifiability.ProbeMode], required=True)
    ip.add_argument("--expert", choices=sorted(PROBE_EXPERTS), required=True)
    ip.add_argument("--score", choices=["full", "partial"])
    ip.add_argument("--atoms", type=int, default=1)
    ip.add_argument("--d", type=int, default=2)
    ip.add_argument("--seed", type=int, default=0)
    ip.add_argument("--threshold", type=float, default=identifiability.DEFAULT_THRESHOLD)
    ip.set_defaults(func=cmd_ident_probe)

    sw = sub.add_parser("sweep", help="sample-size sweep with slope fits")
    sw.add_argument("--scenario", choices=["fig1a", "fig1b", "fig2a", "fig2b", "custom"], required=True)
    sw.add_argument("--config", help="JSON overrides of the scenario's ExperimentConfig")
    sw.add_argument("--out", required=True)
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--desk", action="store_true", help="use the reduced single-core budget")
    sw.add_argument("--timing", action="store_true", help="record wall time per fit")
    sw.add_argument("--check", action="store_true", help="exit 2 if a slope misses its window")
    sw.add_argument("--quiet", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="regenerate a chart from records.csv")
    pl.add_argument("--records", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--kind", help="loss kind to plot (default: each curve's headline loss)")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, OSError, experiments.SweepError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands::

    simulate   Monte Carlo replications of the simulation design
    export     write one simulated cohort in the on-disk cohort format
    estimate   intra processing + AIPW + inference on a cohort directory
    infer      step-down FDPex on an influence file written by ``estimate``

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cohort_io import read_cohort, read_influence, write_cohort, write_influence
from .config import RunConfig
from .harness import analyze_cohort, dgp_from_config, estimates_tsv, get_pipeline, metrics_tsv, replicate
from .inference import EmptyInformativeSetError, FdpConfig, stepdown_fdpex, variance_and_t
from .simulation import gen_cohort

logger = logging.getLogger("medrobust")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _reps(text: str) -> int:
    v = _positive_int(text)
    if v < 2:
        raise argparse.ArgumentTypeError("--reps must be >= 2")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medrobust", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    sim = sub.add_parser("simulate", help="Monte Carlo replications")
    common(sim)
    sim.add_argument("--n", type=_positive_int)
    sim.add_argument("--t", type=_positive_int)
    sim.add_argument("--reps", type=_reps)
    sim.add_argument("--rho", type=float)
    sim.add_argument("--methods", help="comma-separated, e.g. 12p_linear,sl_aipw")
    sim.add_argument("--folds", type=_positive_int)

    exp = sub.add_parser("export", help="write one simulated cohort to disk")
    common(exp)
    exp.add_argument("--n", type=_positive_int)
    exp.add_argument("--t", type=_positive_int)
    exp.add_argument("--rho", type=float)

    est = sub.add_parser("estimate", help="estimate effects on a cohort directory")
    common(est)
    est.add_argument("--data", type=Path, required=True, help="cohort directory")
    est.add_argument("--target", help="nde, nie, ate or psi:a:a' (comma-separated for several)")
    est.add_argument("--folds", type=_positive_int)
    est.add_argument("--alpha", type=_unit_interval)
    est.add_argument("--fdp-c", type=_unit_interval)
    est.add_argument("--fdp-alpha", type=_unit_interval)
    est.add_argument("--boot-b", type=_positive_int)
    est.add_argument("--emit-influence", action="store_true")

    inf = sub.add_parser("infer", help="step-down FDPex on an influence file")
    common(inf)
    inf.add_argument("--data", type=Path, required=True, help="influence TSV from estimate")
    inf.add_argument("--alpha", type=_unit_interval)
    inf.add_argument("--fdp-c", type=_unit_interval)
    inf.add_argument("--fdp-alpha", type=_unit_interval)
    inf.add_argument("--boot-b", type=_positive_int)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    sim = {"n": "n", "t": "T", "rho": "rho", "reps": "reps"}
    for flag, key in sim.items():
        if getattr(args, flag, None) is not None:
            setattr(cfg.simulate, key, getattr(args, flag))
    if getattr(args, "methods", None):
        cfg.simulate.methods = [get_pipeline(m.strip()).label for m in args.methods.split(",")]
    if getattr(args, "folds", None) is not None:
        cfg.estimator.n_folds = args.folds
    if getattr(args, "target", None):
        cfg.estimator.target = args.target
    inf = {"alpha": "alpha", "fdp_c": "fdp_c", "fdp_alpha": "fdp_alpha", "boot_b": "boot_b"}
    for flag, key in inf.items():
        if getattr(args, flag, None) is not None:
            setattr(cfg.inference, key, getattr(args, flag))
    FdpConfig(cfg.inference.fdp_c, cfg.inference.fdp_alpha, cfg.inference.c0, cfg.inference.boot_b)
    return cfg


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, extra: dict) -> None:
    manifest = {"version": __version__, "command": command}
    if cfg is not None:
        manifest.update({"config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed})
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _g(x) -> str:
    x = float(x)
    return "nan" if not np.isfinite(x) else f"{x:.10g}"


def cmd_simulate(args, cfg: RunConfig) -> int:
    table = replicate(cfg, cfg.simulate.methods, cfg.simulate.reps, cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.tsv").write_text(metrics_tsv(table), encoding="utf-8")
    (args.out / "estimates.tsv").write_text(estimates_tsv(table), encoding="utf-8")
    failures = {k: len(v) for k, v in table.messages.items()}
    _write_manifest(args.out, "simulate", cfg, {"failed_replications": failures})
    return 0


def cmd_export(args, cfg: RunConfig) -> int:
    cohort, _ = gen_cohort(dgp_from_config(cfg, cfg.seed))
    write_cohort(cohort, args.out)
    _write_manifest(args.out, "export", cfg, {"n_subjects": len(cohort.subjects)})
    return 0


REPORT_COLUMNS = ("target", "outcome", "v", "v_prime", "estimate", "se", "ci_low", "ci_high",
                  "sim_low", "sim_high", "t", "p_value", "informative", "discovered")


def cmd_estimate(args, cfg: RunConfig) -> int:
    cohort = read_cohort(args.data)
    targets = [t.strip() for t in cfg.estimator.target.split(",") if t.strip()]
    res = analyze_cohort(cohort, cfg, targets)
    args.out.mkdir(parents=True, exist_ok=True)
    pairs = res.derived.matrix.pairs
    ids = np.asarray(cohort.ids, dtype=object)[res.derived.usable]
    lines = ["\t".join(REPORT_COLUMNS)]
    critical_value, effective_k = {}, None
    for label, rep in res.reports.items():
        critical_value[label] = rep.critical_value
        for j, p in enumerate(pairs):
            lines.append("\t".join([
                label, p.label, str(p.v), str(p.v_prime), _g(rep.estimate[j]), _g(rep.se[j]),
                _g(rep.ci_low[j]), _g(rep.ci_high[j]), _g(rep.sim_low[j]), _g(rep.sim_high[j]),
                _g(rep.t[j]), _g(rep.p_value[j]), str(int(rep.informative[j])),
                str(int(rep.discovered[j])),
            ]))
        im = res.influence[label]
        effective_k = im.effective_K
        if args.emit_influence:
            fname = "influence_" + label.replace(":", "_") + ".tsv"
            write_influence(args.out / fname, im.values, im.estimate, pairs, ids)
    (args.out / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    im0 = next(iter(res.influence.values()))
    _write_manifest(args.out, "estimate", cfg, {
        "n_subjects": len(cohort.subjects),
        "n_usable": int(res.derived.usable.sum()),
        "excluded_subjects": int(res.derived.n_excluded),
        "effective_folds": effective_k,
        "clip_fraction": im0.clip_fraction,
        "critical_value": critical_value,
        "targets": targets,
    })
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    infl, est, pairs, ids = read_influence(args.data)
    fdp = FdpConfig(cfg.inference.fdp_c, cfg.inference.fdp_alpha, cfg.inference.c0,
                    cfg.inference.boot_b, cfg.seed)
    res = stepdown_fdpex(infl, est, fdp)
    args.out.mkdir(parents=True, exist_ok=True)
    variance, t = variance_and_t(infl, est)
    disc = set(res.discoveries.tolist())
    stepped = set(res.stepdown)
    lines = ["\t".join(["outcome", "v", "v_prime", "estimate", "variance", "t", "informative",
                        "discovered", "stage"])]
    informative = set(res.informative.tolist())
    for j, p in enumerate(pairs):
        stage = "stepdown" if j in stepped else ("augmentation" if j in disc else "")
        lines.append("\t".join([p.label, str(p.v), str(p.v_prime), _g(est[j]), _g(variance[j]),
                                _g(t[j]), str(int(j in informative)), str(int(j in disc)), stage]))
    (args.out / "discoveries.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    trace = ["\t".join(["iteration", "size", "max_abs_t", "critical_value", "rejected"])]
    for row in res.trace:
        rej = "" if row["rejected"] is None else pairs[row["rejected"]].label
        trace.append("\t".join([str(row["iteration"]), str(row["size"]), _g(row["max_abs_t"]),
                                _g(row["critical_value"]), rej]))
    (args.out / "trace.tsv").write_text("\n".join(trace) + "\n", encoding="utf-8")
    _write_manifest(args.out, "infer", None, {
        "seed": cfg.seed,
        "fdp": dataclasses.asdict(fdp),
        "influence_file": str(args.data),
        "n_subjects": len(ids),
        "critical_value": res.trace[0]["critical_value"],
        "n_discoveries": int(len(res.discoveries)),
        "n_stepdown": len(res.stepdown),
    })
    return 0


COMMANDS = {"simulate": cmd_simulate, "export": cmd_export, "estimate": cmd_estimate,
            "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    try:
        return COMMANDS[args.command](args, cfg)
    except EmptyInformativeSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime / data errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

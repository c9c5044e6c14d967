"""Command-line entry point: ``gap <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._validation import DegenerateSignalError, NumericalError, ValidationError
from .config import ExperimentConfig, dump_config, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("gaprppg")


def _require(value, what: str):
    if value is None:
        raise ValidationError(f"{what} is required (flag or config key)")
    return value


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(_require(args.out or cfg.data.out, "--out / data.out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_root(args, cfg: ExperimentConfig) -> Path:
    return Path(_require(args.data or cfg.data.root, "--data / data.root"))


def _seed_torch(seed: int) -> None:
    import torch

    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg):
    from .synth import generate_dataset

    out = _out_dir(args, cfg)
    manifest = json.loads(Path(generate_dataset(cfg.dataset_spec(), out, seed=cfg.seed)).read_text())
    n = sum(len(d["clips"]) for d in manifest["domains"])
    print(f"wrote {n} clips in {len(manifest['domains'])} domains to {out}")


def cmd_baseline(args, cfg):
    from .classical import run_baselines
    from .metrics import write_rows

    out = _out_dir(args, cfg)
    rows = run_baselines(_data_root(args, cfg), cfg.baseline.methods, cfg.baseline.calibration_clips)
    write_rows(out / "baseline.csv", rows)
    summary = []
    for method in cfg.baseline.methods:
        sel = [r for r in rows if r["method"] == method]
        for task in ("hr", "rr", "spo2"):
            pairs = [(r[task], r[f"{task}_true"]) for r in sel
                     if np.isfinite(r[task]) and np.isfinite(r[f"{task}_true"]) and not (task == "spo2" and r["calibration"])]
            if pairs:
                e = np.array([p - t for p, t in pairs])
                summary.append({"method": method, "task": task, "n": len(pairs),
                                "mae": float(np.mean(np.abs(e))), "rmse": float(np.sqrt(np.mean(e**2)))})
    write_rows(out / "baseline_metrics.csv", summary, ("method", "task", "n", "mae", "rmse"))
    for s in summary:
        print(f"{s['method']:<6} {s['task']:<5} n={s['n']:<4} MAE {s['mae']:.3f}")


def cmd_train(args, cfg):
    from .metrics import compute_metrics, write_report
    from .protocols import evaluate_domain, train_mssdg, write_bvp, write_csv

    _seed_torch(cfg.seed)
    out = _out_dir(args, cfg)
    root = _data_root(args, cfg)
    dump_config(cfg, out / "config.json")
    mcfg = cfg.mssdg_config()
    result = train_mssdg(root, mcfg, run_dir=out)
    with open(out / "audit.json", "w") as fh:
        json.dump({"heldout_domain": mcfg.heldout_domain, "accessed": result.heldout_accesses}, fh, indent=1)
        fh.write("\n")
    if result.heldout_accesses:
        raise ValidationError(f"held-out domain was read during training: {result.heldout_accesses[:3]}")
    print(f"best step {result.best_step}, validation mean MAE {result.best_val:.3f}")
    if mcfg.heldout_domain:
        rows, preds, ds = evaluate_domain(result.model, root, mcfg.heldout_domain, window=mcfg.window,
                                          stride=mcfg.stride, rows=mcfg.rows)
        write_csv(out / "heldout_predictions.csv", rows)
        write_bvp(out, "heldout", ds, list(range(len(ds))), preds["bvp"])
        report = compute_metrics(rows, {"seed": cfg.seed, "heldout_domain": mcfg.heldout_domain})
        write_report(report, out, "metrics")
        for task, c in sorted(report.overall.items()):
            print(f"held-out {task:<5} MAE {c.mae:.3f}")


def cmd_adapt(args, cfg):
    from .metrics import compute_metrics, subject_mean_mae, write_report
    from .protocols import adapt_ttpa

    _seed_torch(cfg.seed)
    out = _out_dir(args, cfg)
    root = _data_root(args, cfg)
    checkpoint = _require(args.checkpoint or cfg.adapt.checkpoint, "--checkpoint / adapt.checkpoint")
    domain = _require(args.domain or cfg.data.target_domain or cfg.data.heldout_domain, "--domain / data.target_domain")
    dump_config(cfg, out / "config.json")
    res = adapt_ttpa(root, domain, checkpoint, cfg.ttpa_config(), run_dir=out,
                     window=cfg.data.window, stride=cfg.data.stride, rows=cfg.data.rows)
    for name, rows in (("adapted", res.predictions), ("frozen", res.frozen)):
        write_report(compute_metrics(rows, {"seed": cfg.seed, "domain": domain, "source": name}), out, f"metrics_{name}")
    for task in ("hr", "rr", "spo2"):
        try:
            print(f"{task:<5} subject-mean MAE frozen {subject_mean_mae(res.frozen, task):.3f} "
                  f"adapted {subject_mean_mae(res.predictions, task):.3f}")
        except ValidationError:
            pass


def cmd_eval(args, cfg):
    from .metrics import compute_metrics, hrv_table, write_report

    if not args.predictions:
        raise ValidationError("--predictions is required")
    for path in args.predictions:
        path = Path(path)
        report = compute_metrics(path, {"seed": cfg.seed, "source": path.name})
        prefix = {"predictions.csv": "adapted", "frozen_predictions.csv": "frozen",
                  "heldout_predictions.csv": "heldout"}.get(path.name)
        if prefix:
            report.hrv = hrv_table(path.parent, prefix)
        out = Path(args.out) if args.out else path.parent
        write_report(report, out, f"eval_{path.stem}")
        for task, c in sorted(report.overall.items()):
            p = "n/a" if c.pearson is None else f"{c.pearson:.3f}"
            print(f"{path.name} {task:<5} n={c.n} MAE {c.mae:.3f} RMSE {c.rmse:.3f} r {p}")


def cmd_gradcheck(args, cfg):
    from .gradcheck import format_table, run_gradcheck
    from .metrics import write_rows

    results = run_gradcheck(seeds=tuple(int(s) for s in cfg.gradcheck.seeds))
    print(format_table(results))
    if args.out or cfg.data.out:
        write_rows(_out_dir(args, cfg) / "gradcheck.csv", [r.to_row() for r in results], ("loss", "seed", "rel_error", "passed"))
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericalError(f"{len(failed)} gradient checks failed")


def cmd_sweep_pi(args, cfg):
    from .metrics import pi_sweep

    _seed_torch(cfg.seed)
    out = _out_dir(args, cfg)
    dump_config(cfg, out / "config.json")
    rows = pi_sweep(_data_root(args, cfg), cfg.mssdg_config(), tuple(float(g) for g in cfg.sweep.grid), run_dir=out)
    for r in rows:
        print(f"pi={r['pi']:<4g} {r['task']:<5} MAE {r['mae']:.3f}")


def cmd_report(args, cfg):
    from .metrics import report

    run = Path(_require(args.run or args.out or cfg.data.out, "--run"))
    info = report(run, args.report_dir)
    print(f"report written to {info['out_dir']}")


def cmd_analyze(args, cfg):
    from .dsp import power_spectrum, self_similarity
    from .metrics import write_rows
    from .stmap import read_stm1

    if not args.stm:
        raise ValidationError("--stm is required")
    out = _out_dir(args, cfg)
    data = read_stm1(args.stm)
    trace = data.mean(axis=1)[:, 1]
    spec = power_spectrum(trace, 30.0)
    write_rows(out / "spectrum.csv", [{"freq_hz": f, "power": p} for f, p in zip(spec.freqs, spec.power)], ("freq_hz", "power"))
    m = self_similarity(trace - trace.mean(), s=30).m
    np.savetxt(out / "ssm.csv", m, delimiter=",", fmt="%.6f")
    print(f"peak {60 * spec.peak_frequency():.2f} bpm; SSM {m.shape[0]}x{m.shape[1]}")


COMMANDS = {
    "synth": cmd_synth,
    "baseline": cmd_baseline,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep-pi": cmd_sweep_pi,
    "report": cmd_report,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gap", description="Multi-task rPPG: synthesis, training, adaptation, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set loss.pi=0.3 (repeatable)")
        p.add_argument("--out", help="output / run directory (data.out)")
        p.add_argument("--data", help="dataset root (data.root)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "adapt":
            p.add_argument("--checkpoint")
            p.add_argument("--domain")
        if name == "eval":
            p.add_argument("--predictions", nargs="+")
        if name == "report":
            p.add_argument("--run")
            p.add_argument("--report-dir")
        if name == "analyze":
            p.add_argument("--stm")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](args, cfg)
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, DegenerateSignalError, FileNotFoundError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

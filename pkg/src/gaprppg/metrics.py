"""Error metrics, HRV tables, the pi-sensitivity sweep and run reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import DegenerateSignalError, ValidationError
from .dsp import HR_BAND, dominant_frequency, hrv_metrics

log = logging.getLogger(__name__)

PREDICTION_FIELDS = ("subject", "sample", "task", "pred", "truth", "mask", "pseudo")
PI_GRID = (0.0, 0.1, 0.3, 0.6, 1.0)


@dataclass
class Cell:
    n: int
    mae: float
    rmse: float
    pearson: float | None

    def to_json(self) -> dict:
        return {"n": self.n, "mae": self.mae, "rmse": self.rmse, "pearson": self.pearson}


@dataclass
class MetricReport:
    overall: dict
    per_domain: dict = field(default_factory=dict)
    per_subject: dict = field(default_factory=dict)
    hrv: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list:
        out = []
        for scope, table in (("overall", {"all": self.overall}), ("domain", self.per_domain), ("subject", self.per_subject)):
            for key in sorted(table):
                for task in sorted(table[key]):
                    c = table[key][task]
                    out.append({"scope": scope, "key": key, "task": task, "n": c.n, "mae": c.mae, "rmse": c.rmse,
                                "pearson": "null" if c.pearson is None else c.pearson})
        return out

    def to_json(self) -> dict:
        conv = lambda t: {k: {task: c.to_json() for task, c in sorted(v.items())} for k, v in sorted(t.items())}  # noqa: E731
        return {
            "overall": {t: c.to_json() for t, c in sorted(self.overall.items())},
            "per_domain": conv(self.per_domain),
            "per_subject": conv(self.per_subject),
            "hrv": self.hrv,
            "metadata": self.metadata,
        }


def error_metrics(pred, truth) -> Cell:
    """MAE, RMSE and Pearson; Pearson is ``None`` for fewer than 2 rows or constant truth or prediction."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValidationError("pred and truth differ in shape")
    if pred.size == 0:
        raise ValidationError("no rows to score")
    e = pred - truth
    pearson = None
    if pred.size >= 2 and np.ptp(truth) > 0 and np.ptp(pred) > 0:
        pearson = float(np.clip(np.corrcoef(pred, truth)[0, 1], -1.0, 1.0))
    return Cell(n=int(pred.size), mae=float(np.mean(np.abs(e))), rmse=float(np.sqrt(np.mean(e**2))), pearson=pearson)


def read_predictions(path) -> list:
    """Parse a prediction CSV, failing with the offending line number."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in PREDICTION_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        for line, r in enumerate(reader, start=2):
            try:
                row = {
                    "subject": r["subject"],
                    "domain": r.get("domain", ""),
                    "sample": r["sample"],
                    "task": r["task"],
                    "pred": float(r["pred"]),
                    "truth": float(r["truth"]),
                    "mask": int(r["mask"]),
                    "pseudo": int(r["pseudo"]),
                }
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{line}: malformed row ({exc})") from exc
            if row["mask"] not in (0, 1) or (row["mask"] and not math.isfinite(row["truth"])) or not math.isfinite(row["pred"]):
                raise ValidationError(f"{path}:{line}: inconsistent mask/truth/pred")
            rows.append(row)
    return rows


def _group(rows, key=None) -> dict:
    groups = {}
    for r in rows:
        if not r["mask"]:
            continue
        g = groups.setdefault(r[key] if key else "all", {}).setdefault(r["task"], ([], []))
        g[0].append(r["pred"])
        g[1].append(r["truth"])
    return {k: {t: error_metrics(p, y) for t, (p, y) in v.items()} for k, v in groups.items()}


def compute_metrics(predictions, metadata: dict | None = None) -> MetricReport:
    """Metrics over labeled rows of a prediction file (path) or row list."""
    rows = read_predictions(predictions) if isinstance(predictions, (str, Path)) else list(predictions)
    overall = _group(rows).get("all", {})
    return MetricReport(
        overall=overall,
        per_domain=_group(rows, "domain") if any(r.get("domain") for r in rows) else {},
        per_subject=_group(rows, "subject"),
        metadata=dict(metadata or {}),
    )


def subject_mean_mae(rows, task: str) -> float:
    """Cohort mean of per-subject MAEs for one task."""
    per = _group([r for r in rows if r["task"] == task], "subject")
    vals = [v[task].mae for v in per.values() if task in v]
    if not vals:
        raise ValidationError(f"no labeled {task} rows")
    return float(np.mean(vals))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def write_rows(path, rows: list, fields=None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def write_report(report: MetricReport, out_dir, stem: str = "metrics") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rows(out_dir / f"{stem}.csv", report.rows(), ("scope", "key", "task", "n", "mae", "rmse", "pearson"))
    if report.hrv:
        write_rows(out_dir / f"{stem}_hrv.csv", report.hrv)
    with open(out_dir / f"{stem}.json", "w") as fh:
        json.dump(_round(report.to_json()), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _round(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    return obj


# ------------------------------------------------------------------ HRV


def stitch_windows(windows: np.ndarray, starts, length: int | None = None) -> np.ndarray:
    """Hann-weighted overlap-add of per-window standardized series."""
    windows = np.asarray(windows, dtype=np.float64)
    starts = np.asarray(starts, dtype=int)
    T = windows.shape[1]
    n = int(length or starts.max() + T)
    acc, wsum = np.zeros(n), np.zeros(n)
    taper = np.hanning(T + 2)[1:-1]
    for w, s in zip(windows, starts):
        sd = w.std()
        z = (w - w.mean()) / sd if sd > 0 else np.zeros_like(w)
        acc[s : s + T] += taper * z
        wsum[s : s + T] += taper
    covered = wsum > 0
    acc[covered] /= wsum[covered]
    return acc[covered] if covered.all() else acc[: np.flatnonzero(covered)[-1] + 1]


def _hrv_row(series, fps) -> dict:
    row = {"HR": 60.0 * dominant_frequency(series, fps, band=HR_BAND)}
    try:
        h = hrv_metrics(series, fps)
        row.update({"LFnu": h["LFnu"], "HFnu": h["HFnu"], "LF_over_HF": h["LF_over_HF"], "status": "ok"})
    except (DegenerateSignalError, ValidationError) as exc:
        row.update({"LFnu": math.nan, "HFnu": math.nan, "LF_over_HF": math.nan, "status": f"failed: {exc}"})
    return row


def hrv_table(run_dir, prefix: str, fps: float = 30.0) -> list:
    """Per-clip HRV (LFnu, HFnu, LF/HF) and whole-clip PSD-peak HR, truth vs prediction."""
    run_dir = Path(run_dir)
    pred_path, true_path, index_path = (run_dir / f"{prefix}_bvp_pred.npy", run_dir / f"{prefix}_bvp_true.npy",
                                        run_dir / f"{prefix}_bvp_index.csv")
    if not (pred_path.exists() and true_path.exists() and index_path.exists()):
        return []
    pred, true = np.load(pred_path), np.load(true_path)
    with open(index_path, newline="") as fh:
        index = list(csv.DictReader(fh))
    clips = {}
    for r in index:
        clips.setdefault((r["subject"], r["clip"]), []).append((int(r["row"]), int(r["start"])))
    out = []
    for (subject, clip), entries in sorted(clips.items()):
        rows = [e[0] for e in entries]
        starts = [e[1] for e in entries]
        if np.isnan(true[rows]).any():
            continue
        # the truth windows are slices of one series; stitching them back is exact up to scale
        for source, arr in (("truth", true), ("pred", pred)):
            series = stitch_windows(arr[rows], starts)
            out.append({"subject": subject, "clip": clip, "source": source, **_hrv_row(series, fps)})
    return out


# ------------------------------------------------------------------ pi sweep


def pi_sweep(root, base_config, grid=PI_GRID, run_dir=None) -> list:
    """One training run per pi value (shared seed); held-out MAE per task."""
    from .protocols import evaluate_domain, train_mssdg

    if base_config.heldout_domain is None:
        raise ValidationError("pi sweep needs a held-out domain to score")
    rows = []
    for pi in grid:
        if pi < 0:
            raise ValidationError("pi must be >= 0")
        cfg = replace(base_config, weights=replace(base_config.weights, pi=float(pi)))
        sub = Path(run_dir) / f"pi_{pi:g}" if run_dir is not None else None
        result = train_mssdg(root, cfg, run_dir=sub)
        pred_rows, _, _ = evaluate_domain(result.model, root, cfg.heldout_domain, window=cfg.window,
                                          stride=cfg.stride, rows=cfg.rows)
        report = compute_metrics(pred_rows)
        pe_raw = [r["loss_pe_raw"] for r in result.log if "loss_pe_raw" in r]
        for task in sorted(report.overall):
            rows.append({"pi": float(pi), "task": task, "mae": report.overall[task].mae,
                         "final_pe_raw": pe_raw[-1] if pe_raw else math.nan})
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        write_rows(Path(run_dir) / "pi_sweep.csv", rows, ("pi", "task", "mae", "final_pe_raw"))
        _plot_pi(rows, Path(run_dir) / "pi_sweep.png")
    return rows


# ------------------------------------------------------------------ plotting and report


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    fig.savefig(path, dpi=90, metadata={"Software": None})
    _pyplot().close(fig)


def _plot_pi(rows, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for task in sorted({r["task"] for r in rows}):
        pts = sorted((r["pi"], r["mae"]) for r in rows if r["task"] == task)
        ax.plot([p for p, _ in pts], [m for _, m in pts], marker="o", label=task)
    ax.set_xlabel("pi")
    ax.set_ylabel("held-out MAE")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def _bland_altman(rows, task, path):
    plt = _pyplot()
    sel = [r for r in rows if r["task"] == task and r["mask"]]
    if not sel:
        return False
    p = np.array([r["pred"] for r in sel])
    t = np.array([r["truth"] for r in sel])
    mean, diff = (p + t) / 2, p - t
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(mean, diff, s=4)
    bias, sd = diff.mean(), diff.std()
    for y, style in ((bias, "-"), (bias + 1.96 * sd, "--"), (bias - 1.96 * sd, "--")):
        ax.axhline(y, color="k", linestyle=style, linewidth=0.8)
    ax.set_xlabel(f"mean of prediction and truth ({task})")
    ax.set_ylabel("prediction - truth")
    fig.tight_layout()
    _save(fig, path)
    return True


def _waveform(run_dir, subject, path) -> bool:
    files = {src: Path(run_dir) / f"{src}_bvp_pred.npy" for src in ("frozen", "adapted", "heldout")}
    index = None
    for src in files:
        if (Path(run_dir) / f"{src}_bvp_index.csv").exists():
            with open(Path(run_dir) / f"{src}_bvp_index.csv", newline="") as fh:
                index = list(csv.DictReader(fh))
            true = np.load(Path(run_dir) / f"{src}_bvp_true.npy")
            break
    if index is None:
        return False
    rows = [int(r["row"]) for r in index if r["subject"] == subject]
    if not rows or np.isnan(true[rows[0]]).any():
        return False
    k = rows[0]
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3))
    z = lambda x: (x - x.mean()) / (x.std() or 1.0)  # noqa: E731
    ax.plot(z(true[k]), label="ground truth", color="k", linewidth=1)
    labels = {"frozen": "GAP-G", "adapted": "GAP-P", "heldout": "GAP-G"}
    for src, f in files.items():
        if f.exists():
            ax.plot(z(np.load(f)[k]), label=labels[src], linewidth=0.9)
    ax.set_xlabel("frame")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    return True


def _loss_curves(path_csv, path_png) -> bool:
    with open(path_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return False
    plt = _pyplot()
    keys = [k for k in rows[0] if k.startswith("loss_") and k != "loss_pe_raw"]
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in rows]
    for k in keys:
        vals = np.array([float(r[k]) for r in rows])
        if np.all(vals == 0):
            continue
        ax.plot(steps, np.abs(vals) + 1e-12, label=k[5:], linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path_png)
    return True


PREDICTION_FILES = {"predictions.csv": "adapted", "frozen_predictions.csv": "frozen", "heldout_predictions.csv": "heldout"}


def report(run_dir, out_dir=None) -> dict:
    """Summarize a run directory into ``<run_dir>/report`` without touching existing artifacts."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"{run_dir} is not a directory")
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    notes, lines, reports = [], ["# Run report", "", f"Run directory: `{run_dir.name}`", ""], {}
    found = {name: src for name, src in PREDICTION_FILES.items() if (run_dir / name).exists()}
    if not found:
        notes.append("no prediction files found; metrics omitted")
    for name, src in found.items():
        rows = read_predictions(run_dir / name)
        rep = compute_metrics(rows)
        rep.hrv = hrv_table(run_dir, src)
        write_report(rep, out, f"metrics_{src}")
        reports[src] = (rows, rep)
        lines += [f"## {src} predictions", "", "| task | n | MAE | RMSE | Pearson |", "|---|---|---|---|---|"]
        for task, c in sorted(rep.overall.items()):
            lines.append(f"| {task} | {c.n} | {c.mae:.3f} | {c.rmse:.3f} | {'n/a' if c.pearson is None else f'{c.pearson:.3f}'} |")
        lines.append("")
        for task in sorted(rep.overall):
            if _bland_altman(rows, task, out / f"bland_altman_{src}_{task}.png"):
                lines.append(f"![{task}](bland_altman_{src}_{task}.png)")
        lines.append("")
        if rep.hrv:
            lines += ["### HRV", "", "| subject | clip | source | LFnu | HFnu | LF/HF | HR | status |", "|---|---|---|---|---|---|---|---|"]
            for h in rep.hrv:
                lines.append(f"| {h['subject']} | {h['clip']} | {h['source']} | {h['LFnu']:.3f} | {h['HFnu']:.3f} | "
                             f"{h['LF_over_HF']:.3f} | {h['HR']:.1f} | {h['status']} |")
        else:
            lines.append("HRV table omitted: no stitched BVP inputs with ground truth in this run.")
        lines.append("")
    if reports:
        rows0, rep0 = next(iter(reports.values()))
        for subject in sorted(rep0.per_subject):
            lines += [f"## Subject {subject}", ""]
            for src, (_, rep) in reports.items():
                cells = rep.per_subject.get(subject, {})
                summary = ", ".join(f"{t} MAE {c.mae:.3f}" for t, c in sorted(cells.items()))
                lines.append(f"- {src}: {summary}")
            if _waveform(run_dir, subject, out / f"waveform_{subject}.png"):
                lines.append(f"\n![waveform](waveform_{subject}.png)")
            lines.append("")
    for log_name in ("loss_log.csv", "adapt_log.csv"):
        if (run_dir / log_name).exists() and _loss_curves(run_dir / log_name, out / f"{log_name[:-4]}.png"):
            lines += [f"![{log_name}]({log_name[:-4]}.png)", ""]
    if not (run_dir / "loss_log.csv").exists() and not (run_dir / "adapt_log.csv").exists():
        notes.append("no loss log found; loss curves omitted")
    for n in notes:
        warnings.warn(n, stacklevel=2)
        lines.append(f"> warning: {n}")
    with open(out / "summary.md", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return {"out_dir": str(out), "sources": sorted(reports), "notes": notes}

"""Training over labeled source domains and per-subject test-time adaptation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import NumericalError, ValidationError
from .augment import AugmentConfig, make_pair
from .dataset import FileAccessAudit, STMapDataset, read_manifest
from .dsp import HR_BAND, RR_BAND, dominant_frequency
from .losses import (
    SCALAR_TASKS,
    LossWeights,
    composite,
    fc_loss,
    flatten_pair,
    masked_l1,
    neg_pearson,
    pe_loss,
    pe_raw,
    sda_loss,
    ssa_loss,
    tc_loss,
    tic_loss,
)
from .model import GAPNet, ModelConfig, build_model, load_checkpoint, parameter_checksum, save_checkpoint, trainable_parameters

log = logging.getLogger(__name__)

DTYPE = torch.float32


class RevisitError(ValidationError):
    """A TTPA stream tried to adapt on a sample it had already used."""


@dataclass
class MssdgConfig:
    heldout_domain: str | None = None
    source_domains: list | None = None
    val_ratio: float = 0.1
    batch_size: int = 8
    iterations: int = 1000
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    val_max_windows: int = 256
    ssm_window: int = 30
    supervise_augmented: bool = True
    preset: str = "desk"
    window: int = 256
    stride: int = 10
    rows: int = 64
    weights: LossWeights = field(default_factory=LossWeights.desk)
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def paper(cls, **kw) -> "MssdgConfig":
        return cls(**{"batch_size": 100, "iterations": 20000, "lr": 1e-5, "preset": "paper", "weights": LossWeights(), **kw})

    @classmethod
    def supervised_only(cls, **kw) -> "MssdgConfig":
        """Plain supervised multi-task baseline: no augmentation, no regularizers."""
        return cls(weights=LossWeights.supervised_only(), aug=AugmentConfig(p_offset=0.0, p_perm=0.0, p_scale=0.0), **kw)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TtpaConfig:
    lr: float = 1e-5
    seed: int = 0
    subjects: list | None = None
    ssm_window: int = 30
    frozen_prefixes: tuple = ()
    weights: LossWeights = field(default_factory=LossWeights.desk)
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: GAPNet
    log: list
    best_step: int
    best_val: float
    identities: list
    heldout_accesses: list
    val_history: list


@dataclass
class TtpaResult:
    predictions: list
    frozen: list
    log: list
    session_checksums: dict
    base_checksum: str
    bvp: np.ndarray | None = None
    frozen_bvp: np.ndarray | None = None
    indices: list = field(default_factory=list)


# ------------------------------------------------------------------ labels


def pseudo_labels(labels: dict, fps: float = 30.0, pseudo_weight: float = 0.1) -> tuple[dict, dict, dict]:
    """Fill missing HR / RR from the dominant frequency of the true BVP.

    Returns ``(values, weights, pseudo_flags)``; SpO2 is never pseudo-filled.
    """
    values = dict(labels)
    weights = {t: (1.0 if labels.get(t) is not None else 0.0) for t in ("bvp", *SCALAR_TASKS)}
    flags = {t: False for t in SCALAR_TASKS}
    bvp = labels.get("bvp")
    if bvp is None:
        return values, weights, flags
    for task, band in (("hr", HR_BAND), ("rr", RR_BAND)):
        if labels.get(task) is not None:
            continue
        try:
            values[task] = 60.0 * dominant_frequency(bvp, fps, band=band)
        except (ValueError, ValidationError):
            continue
        weights[task] = pseudo_weight
        flags[task] = True
    return values, weights, flags


class _LabelCache:
    def __init__(self, dataset: STMapDataset, pseudo_weight: float):
        self.dataset = dataset
        self.pseudo_weight = pseudo_weight
        self._cache = {}

    def __call__(self, k: int):
        if k not in self._cache:
            self._cache[k] = pseudo_labels(self.dataset.labels(k), pseudo_weight=self.pseudo_weight)
        return self._cache[k]


def _batch(dataset: STMapDataset, indices, labels: _LabelCache, aug: AugmentConfig, rng, identity_of=None, dtype=DTYPE):
    xo, xa, records = [], [], []
    tgt = {t: [] for t in SCALAR_TASKS}
    wts = {t: [] for t in SCALAR_TASKS}
    bvp, bvp_w, ids = [], [], []
    for k in indices:
        i, s = dataset.index[k]
        pair = make_pair(dataset.clip_map(i), s, dataset.window, aug, rng)
        xo.append(pair.xo)
        xa.append(pair.xa)
        records.append(pair.record)
        values, weights, _ = labels(k)
        for t in SCALAR_TASKS:
            tgt[t].append(values[t] if values[t] is not None else 0.0)
            wts[t].append(weights[t])
        if values["bvp"] is not None:
            bvp.append(values["bvp"])
            bvp_w.append(1.0)
        else:
            bvp.append(np.zeros(dataset.window))
            bvp_w.append(0.0)
        if identity_of is not None:
            ids.append(identity_of(k))
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    batch = {
        "xo": as_t(np.stack(xo)),
        "xa": as_t(np.stack(xa)),
        "target": {t: as_t(tgt[t]) for t in SCALAR_TASKS},
        "weight": {t: as_t(wts[t]) for t in SCALAR_TASKS},
        "bvp": as_t(np.stack(bvp)),
        "bvp_weight": as_t(bvp_w),
        "records": records,
    }
    if identity_of is not None:
        batch["identity"] = torch.as_tensor(ids, dtype=torch.long)
    return batch


# ------------------------------------------------------------------ losses per step


def supervised_loss(preds: dict, batch: dict, supervise: str = "o") -> dict:
    """Per-task supervised terms; BVP is only supervised on the original view."""
    terms = {}
    B = batch["xo"].shape[0]
    for t in SCALAR_TASKS:
        if supervise == "oa":
            pred = preds[t]
            target = batch["target"][t].repeat(2)
            weight = batch["weight"][t].repeat(2)
        else:
            pred, target, weight = preds[t][:B], batch["target"][t], batch["weight"][t]
        terms[t] = masked_l1(pred, target, weight)
    w = batch["bvp_weight"]
    if float(w.sum()) > 0:
        keep = w > 0
        terms["bvp"] = neg_pearson(preds["bvp"][:B][keep], batch["bvp"][keep])
    else:
        terms["bvp"] = (preds["bvp"] * 0.0).sum()
    return terms


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return ref.new_zeros(())


def pair_losses(out, B: int, weights: LossWeights, ssm_window: int, id_target: torch.Tensor, mode: str) -> dict:
    """Self-supervised terms on a forward pass over ``cat([xo, xa])``."""
    ref = out.z_shared
    losses = {}
    need = lambda w: w > 0  # noqa: E731
    if need(weights.p1) or need(weights.p2):
        flat = [flatten_pair(f[:B], f[B:]) for f in out.block_features]
        losses["ssa"] = ssa_loss(flat, weights.norm) if need(weights.p1) else _zero(ref)
        losses["sda"] = sda_loss(flat, weights.norm) if need(weights.p2) else _zero(ref)
    else:
        losses["ssa"] = losses["sda"] = _zero(ref)
    losses["p"] = F.cross_entropy(out.id_logits, id_target) if need(weights.p3) else _zero(ref)
    if need(weights.p4):
        fc = sum(fc_loss(out.preds[t][:B], out.preds[t][B:], t) for t in SCALAR_TASKS)
        losses["fc"] = fc + fc_loss(out.preds["bvp"][:B], out.preds["bvp"][B:], "bvp")
    else:
        losses["fc"] = _zero(ref)
    if mode == "MSSDG":
        z_tasks = list(out.z_tasks.values())
        if need(weights.p5):
            losses["pe"] = pe_loss(z_tasks, out.z_p, weights.pi, weights.norm)
            losses["pe_raw"] = pe_raw(z_tasks, out.z_p, weights.norm).detach()
        else:
            losses["pe"] = _zero(ref)
        losses["tc"] = tc_loss(out.preds["bvp"][:B], out.preds["bvp"][B:], ssm_window) if need(weights.p6) else _zero(ref)
    else:
        losses["tic"] = tic_loss(out.preds["bvp"][:B], out.preds["bvp"][B:], ssm_window) if need(weights.p7) else _zero(ref)
    return losses


# ------------------------------------------------------------------ prediction


@torch.no_grad()
def predict_windows(model: GAPNet, maps, mode: str = "MSSDG", batch_size: int = 32) -> dict:
    """Predictions for a stack of ``(T, W, 3)`` windows, as numpy arrays."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = {t: [] for t in ("hr", "rr", "spo2", "bvp")}
    maps = np.asarray(maps)
    for s in range(0, len(maps), batch_size):
        res = model(torch.as_tensor(maps[s : s + batch_size], dtype=dtype), mode=mode)
        for t in out:
            out[t].append(res.preds[t].cpu().numpy())
    model.train(was_training)
    return {t: np.concatenate(v) if v else np.zeros(0) for t, v in out.items()}


def _val_mae(model: GAPNet, dataset: STMapDataset, indices) -> tuple[float, dict]:
    if not indices:
        return math.nan, {}
    preds = predict_windows(model, np.stack([dataset.get_window(k) for k in indices]))
    maes = {}
    for t in SCALAR_TASKS:
        truth = np.array([np.nan if dataset.labels(k)[t] is None else dataset.labels(k)[t] for k in indices])
        ok = ~np.isnan(truth)
        if ok.any():
            maes[t] = float(np.mean(np.abs(preds[t][ok] - truth[ok])))
    return (float(np.mean(list(maes.values()))) if maes else math.nan), maes


# ------------------------------------------------------------------ MSSDG


def _split_clips(dataset: STMapDataset, val_ratio: float, rng) -> tuple[list, list]:
    n = len(dataset.clips)
    order = rng.permutation(n)
    n_val = max(1, int(round(val_ratio * n))) if n > 1 else 0
    val_clips = set(order[:n_val].tolist())
    train = [k for k, (i, _) in enumerate(dataset.index) if i not in val_clips]
    val = [k for k, (i, _) in enumerate(dataset.index) if i in val_clips]
    return train, val


def _source_domains(root, config: MssdgConfig) -> list:
    known = [d["domain_id"] for d in read_manifest(root)["domains"]]
    if config.source_domains is not None:
        sources = list(config.source_domains)
    else:
        sources = [d for d in known if d != config.heldout_domain]
    if config.heldout_domain in sources:
        raise ValidationError("held-out domain listed among sources")
    if len(sources) < 2:
        raise ValidationError(f"need at least 2 source domains, got {sources}")
    return sources


def train_mssdg(root, config: MssdgConfig | None = None, run_dir=None) -> TrainResult:
    """Multi-source training; returns the best-on-validation model and the step log."""
    config = config or MssdgConfig()
    root = Path(root)
    sources = _source_domains(root, config)
    audit = FileAccessAudit(root / config.heldout_domain) if config.heldout_domain else None
    if audit is not None:
        audit.__enter__()
    try:
        result = _train(root, sources, config)
    finally:
        if audit is not None:
            audit.__exit__(None, None, None)
    result.heldout_accesses = list(audit.accessed) if audit is not None else []
    if run_dir is not None:
        write_train_outputs(run_dir, result, config)
    return result


def _train(root: Path, sources: list, config: MssdgConfig) -> TrainResult:
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dataset = STMapDataset(root, sources, window=config.window, stride=config.stride, rows=config.rows)
    identities = sorted(dataset.subjects)
    id_index = {s: i for i, s in enumerate(identities)}
    identity_of = lambda k: id_index[dataset.subject_of(k)]  # noqa: E731
    train_idx, val_idx = _split_clips(dataset, config.val_ratio, rng)
    if not train_idx:
        raise ValidationError("no training windows")
    if len(val_idx) > config.val_max_windows:
        val_idx = sorted(rng.choice(val_idx, config.val_max_windows, replace=False).tolist())

    labels = _LabelCache(dataset, config.weights.pseudo_weight)
    head_bias = {}
    for t in SCALAR_TASKS:
        vals = [labels(k)[0][t] for k in train_idx if labels(k)[1][t] == 1.0]
        head_bias[t] = float(np.mean(vals)) if vals else ModelConfig().head_bias[t]
    model_cfg = ModelConfig(preset=config.preset, input_shape=(config.window, config.rows, 3),
                            n_identities=len(identities), head_bias=head_bias)
    model = build_model(model_cfg, seed=config.seed, dtype=DTYPE)
    optimizer = torch.optim.Adam(trainable_parameters(model, "MSSDG"), lr=config.lr)

    w = config.weights
    aug_active = max(config.aug.p_offset, config.aug.p_perm, config.aug.p_scale) > 0
    regularized = any(v > 0 for v in (w.p1, w.p2, w.p3, w.p4, w.p5, w.p6))
    two_view = regularized or (config.supervise_augmented and aug_active)

    best_val, best_step = math.inf, -1
    best_state = copy.deepcopy(model.state_dict())
    history, rows = [], []
    model.train()
    for step in range(config.iterations):
        idx = rng.choice(train_idx, size=config.batch_size, replace=len(train_idx) < config.batch_size)
        batch = _batch(dataset, idx, labels, config.aug, rng, identity_of)
        B = config.batch_size
        x = torch.cat([batch["xo"], batch["xa"]]) if two_view else batch["xo"]
        out = model(x, mode="MSSDG")
        sup = supervised_loss(out.preds, batch, "oa" if two_view and config.supervise_augmented else "o")
        mt = sum(sup.values())
        if two_view:
            losses = pair_losses(out, B, w, config.ssm_window, batch["identity"].repeat(2), "MSSDG")
        else:
            zero = _zero(mt)
            losses = {k: zero for k in ("ssa", "sda", "p", "fc", "pe", "tc")}
        losses["mt"] = mt
        total, lam = composite(losses, w, step, config.iterations, "MSSDG")
        if not torch.isfinite(total):
            comps = {k: v.item() for k, v in losses.items()}
            raise NumericalError(f"non-finite loss at step {step}: {comps}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()

        row = {"step": step, "lambda": lam, "total": total.item()}
        row.update({f"loss_{k}": v.item() for k, v in losses.items()})
        row.update({f"sup_{t}": v.item() for t, v in sup.items()})
        row["regularizer"] = total.item() - mt.item()
        for t in SCALAR_TASKS:
            row[f"n_{t}"] = int((batch["weight"][t] == 1.0).sum())
            row[f"n_pseudo_{t}"] = int(((batch["weight"][t] > 0) & (batch["weight"][t] < 1.0)).sum())
        rows.append(row)

        if (step + 1) % config.eval_every == 0 or step + 1 == config.iterations:
            val, maes = _val_mae(model, dataset, val_idx)
            history.append({"step": step, "val_mean_mae": val, **{f"val_{t}": v for t, v in maes.items()}})
            log.info("step %d val mean MAE %.3f %s", step, val, maes)
            if val < best_val or best_step < 0:
                best_val, best_step = val, step
                best_state = copy.deepcopy(model.state_dict())
            model.train()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, log=rows, best_step=best_step, best_val=best_val, identities=identities,
                       heldout_accesses=[], val_history=history)


def write_train_outputs(run_dir, result: TrainResult, config: MssdgConfig) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run_dir / "checkpoint.pt", result.model, seed=config.seed, step=result.best_step,
                    extra={"identities": result.identities, "best_val": result.best_val})
    with open(run_dir / "train_config.json", "w") as fh:
        json.dump(config.to_json(), fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    write_csv(run_dir / "loss_log.csv", result.log)
    write_csv(run_dir / "val_log.csv", result.val_history)


def write_csv(path, rows: list) -> None:
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


# ------------------------------------------------------------------ evaluation rows


def prediction_rows(dataset: STMapDataset, indices, preds: dict, subject_override=None) -> list:
    """Long-format rows: one per (sample, task) with truth, mask and pseudo flag."""
    rows = []
    for j, k in enumerate(indices):
        lab = dataset.labels(k)
        for t in SCALAR_TASKS:
            truth = lab[t]
            rows.append({
                "subject": subject_override or dataset.subject_of(k),
                "domain": dataset.domain_of(k),
                "sample": dataset.sample_id(k),
                "task": t,
                "pred": float(preds[t][j]),
                "truth": float("nan") if truth is None else float(truth),
                "mask": int(truth is not None),
                "pseudo": 0,
            })
    return rows


def write_bvp(run_dir, prefix: str, dataset: STMapDataset, indices, bvp) -> None:
    """Per-window BVP predictions and truth (NaN when unlabeled) plus an index CSV."""
    run_dir = Path(run_dir)
    bvp = np.asarray(bvp, dtype=np.float64).reshape(len(indices), -1)
    truth = np.full_like(bvp, np.nan)
    index_rows = []
    for j, k in enumerate(indices):
        true = dataset.labels(k)["bvp"]
        if true is not None:
            truth[j] = true
        i, start = dataset.index[k]
        index_rows.append({"row": j, "sample": dataset.sample_id(k), "subject": dataset.subject_of(k),
                           "domain": dataset.domain_of(k), "clip": dataset.clips[i].clip_id, "start": start})
    np.save(run_dir / f"{prefix}_bvp_pred.npy", bvp)
    np.save(run_dir / f"{prefix}_bvp_true.npy", truth)
    write_csv(run_dir / f"{prefix}_bvp_index.csv", index_rows)


def evaluate_domain(model: GAPNet, root, domain: str, mode: str = "MSSDG", window=256, stride=10, rows=64):
    dataset = STMapDataset(root, [domain], window=window, stride=stride, rows=rows)
    idx = list(range(len(dataset)))
    preds = predict_windows(model, np.stack([dataset.get_window(k) for k in idx]), mode=mode)
    return prediction_rows(dataset, idx, preds), preds, dataset


# ------------------------------------------------------------------ TTPA


def _subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(subject_id.encode())])


def adapt_subject(base: GAPNet, dataset: STMapDataset, subject_id: str, config: TtpaConfig, reserved_class: int):
    """One per-subject session from a fresh copy of ``base``; returns ``(rows, log, start_checksum)``."""
    model = copy.deepcopy(base)
    start_checksum = parameter_checksum(model)
    # running statistics stay frozen: batch size 1 and per-sample streaming
    model.eval()
    params = trainable_parameters(model, "TTPA", config.frozen_prefixes)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.SGD(params, lr=config.lr)
    rng = _subject_rng(config.seed, subject_id)
    labels = _LabelCache(dataset, config.weights.pseudo_weight)
    seen = set()
    rows, log_rows, bvp = [], [], []
    dtype = next(model.parameters()).dtype
    target = torch.tensor([reserved_class, reserved_class], dtype=torch.long)
    for step, k in enumerate(dataset.subject_windows(subject_id)):
        sid = dataset.sample_id(k)
        if sid in seen:
            raise RevisitError(f"sample {sid} revisited in subject {subject_id}'s stream")
        seen.add(sid)
        batch = _batch(dataset, [k], labels, config.aug, rng, dtype=dtype)
        out = model(torch.cat([batch["xo"], batch["xa"]]), mode="TTPA")
        losses = pair_losses(out, 1, config.weights, config.ssm_window, target, "TTPA")
        total, _ = composite(losses, config.weights, mode="TTPA")
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite TTPA loss for {sid}: { {k2: v.item() for k2, v in losses.items()} }")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        with torch.no_grad():
            res = model(batch["xo"], mode="TTPA")
        preds = {t: res.preds[t].detach().cpu().numpy() for t in ("hr", "rr", "spo2", "bvp")}
        rows.extend(prediction_rows(dataset, [k], preds))
        bvp.append(preds["bvp"][0])
        log_rows.append({"subject": subject_id, "sample": sid, "step": step, "total": total.item(),
                         **{f"loss_{n}": v.item() for n, v in losses.items()}})
    return rows, log_rows, start_checksum, bvp


def adapt_ttpa(root, domain: str, base, config: TtpaConfig | None = None, run_dir=None, *, window=256, stride=10, rows=64) -> TtpaResult:
    """Per-subject, one-pass, chronological adaptation on the target domain.

    ``base`` is a :class:`GAPNet` or a checkpoint path. Every subject starts
    from the same base weights.
    """
    config = config or TtpaConfig()
    if not isinstance(base, GAPNet):
        base, _ = load_checkpoint(base)
    base.eval()
    dataset = STMapDataset(root, [domain], window=window, stride=stride, rows=rows)
    if tuple(base.config.input_shape) != (window, rows, 3):
        raise ValidationError(f"checkpoint expects input {base.config.input_shape}, data is {(window, rows, 3)}")
    base_checksum = parameter_checksum(base)
    subjects = config.subjects or dataset.subjects
    reserved = base.config.n_identities

    idx_all = list(range(len(dataset)))
    frozen_preds = predict_windows(base, np.stack([dataset.get_window(k) for k in idx_all]), mode="MSSDG")
    frozen_rows = prediction_rows(dataset, idx_all, frozen_preds)

    unknown = sorted(set(subjects) - set(dataset.subjects))
    if unknown:
        raise ValidationError(f"subjects {unknown} not in domain {domain}")
    all_rows, all_log, checksums, all_bvp, order = [], [], {}, [], []
    for subject in subjects:
        rows_s, log_s, chk, bvp_s = adapt_subject(base, dataset, subject, config, reserved)
        if parameter_checksum(base) != base_checksum:
            raise RuntimeError("base checkpoint mutated during adaptation")
        all_rows.extend(rows_s)
        all_log.extend(log_s)
        all_bvp.extend(bvp_s)
        order.extend(dataset.subject_windows(subject))
        checksums[subject] = chk
    pos = {k: j for j, k in enumerate(idx_all)}
    result = TtpaResult(predictions=all_rows, frozen=[r for r in frozen_rows if r["subject"] in subjects],
                        log=all_log, session_checksums=checksums, base_checksum=base_checksum,
                        bvp=np.asarray(all_bvp), frozen_bvp=frozen_preds["bvp"][[pos[k] for k in order]], indices=order)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_csv(run_dir / "predictions.csv", result.predictions)
        write_csv(run_dir / "frozen_predictions.csv", result.frozen)
        write_bvp(run_dir, "adapted", dataset, order, result.bvp)
        write_bvp(run_dir, "frozen", dataset, order, result.frozen_bvp)
        write_csv(run_dir / "adapt_log.csv", result.log)
        with open(run_dir / "ttpa_config.json", "w") as fh:
            json.dump({**config.to_json(), "base_checksum": base_checksum, "session_checksums": checksums},
                      fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")
    return result

"""Reading STM1 datasets written by :func:`gaprppg.synth.generate_dataset` (or by hand).

A dataset directory holds ``manifest.json`` plus, per clip, ``<stem>.stm``,
optional ``<stem>.raw.stm`` and the ``<stem>.json`` sidecar. Only domains that
are asked for are ever opened, which the :class:`FileAccessAudit` hook verifies.
"""

from __future__ import annotations

import json
import os
import sys
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .stmap import Sidecar, read_sidecar, read_stm1, resize_rows_array, window_starts

_listeners: list = []
_hook_lock = threading.Lock()
_hook_installed = False


def _audit_hook(event, args):
    if not _listeners or event not in ("open", "os.listdir", "os.scandir"):
        return
    path = args[0] if args else None
    if isinstance(path, (str, bytes, os.PathLike)):
        for listener in list(_listeners):
            listener(event, os.fsdecode(path))


class FileAccessAudit:
    """Record every file open / directory listing under ``root`` while active."""

    def __init__(self, root):
        self.root = os.path.realpath(os.fspath(root))
        self.accessed: list[tuple[str, str]] = []

    def _listener(self, event, path):
        full = os.path.realpath(os.path.abspath(path))
        if full == self.root or full.startswith(self.root + os.sep):
            self.accessed.append((event, full))

    def __enter__(self):
        global _hook_installed
        with _hook_lock:
            if not _hook_installed:
                sys.addaudithook(_audit_hook)
                _hook_installed = True
        _listeners.append(self._listener)
        return self

    def __exit__(self, *exc):
        _listeners.remove(self._listener)
        return False


@dataclass
class ClipRecord:
    stem: Path
    sidecar: Sidecar
    clip_index: int

    @property
    def subject_id(self) -> str:
        return self.sidecar.subject_id

    @property
    def domain_id(self) -> str:
        return self.sidecar.domain_id

    @property
    def clip_id(self) -> str:
        return f"{self.subject_id}/{self.stem.name}"


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{root}: no manifest.json")
    with open(path) as fh:
        return json.load(fh)


class STMapDataset:
    """Windows of row-resized STMaps plus their labels, for a subset of domains.

    Parameters
    ----------
    root : path to the dataset directory.
    domains : domain ids to load; ``None`` loads all.
    window, stride : windowing along time.
    rows : ROI axis is linearly resized to this many rows.
    """

    def __init__(self, root, domains=None, *, window: int = 256, stride: int = 10, rows: int = 64):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.window, self.stride, self.rows = int(window), int(stride), int(rows)
        known = [d["domain_id"] for d in self.manifest["domains"]]
        wanted = known if domains is None else list(domains)
        unknown = sorted(set(wanted) - set(known))
        if unknown:
            raise ValidationError(f"unknown domains {unknown}; dataset has {known}")
        self.domain_ids = [d for d in known if d in wanted]
        self.domain_info = {d["domain_id"]: d for d in self.manifest["domains"] if d["domain_id"] in wanted}

        self.clips: list[ClipRecord] = []
        for domain_id in self.domain_ids:
            entry = self.domain_info[domain_id]
            if not entry["clips"]:
                raise ValidationError(f"domain {domain_id} has no clips")
            for rel in entry["clips"]:
                stem = self.root / rel
                sidecar = read_sidecar(f"{stem}.json")
                self.clips.append(ClipRecord(stem=stem, sidecar=sidecar, clip_index=len(self.clips)))

        self._maps: dict[int, np.ndarray] = {}
        self.index: list[tuple[int, int]] = []
        for rec in self.clips:
            T = self._load(rec.clip_index).shape[0]
            self.index.extend((rec.clip_index, s) for s in window_starts(T, self.window, self.stride))

    def _load(self, i: int) -> np.ndarray:
        if i not in self._maps:
            data = read_stm1(f"{self.clips[i].stem}.stm")
            if data.shape[1] != self.rows:
                data = np.clip(resize_rows_array(data, self.rows), 0.0, 1.0)
            self._maps[i] = data
        return self._maps[i]

    def __len__(self) -> int:
        return len(self.index)

    def clip_map(self, i: int) -> np.ndarray:
        """Full-length, row-resized normalized map of clip ``i``."""
        return self._load(i)

    def raw_map(self, i: int) -> np.ndarray:
        path = Path(f"{self.clips[i].stem}.raw.stm")
        if not path.exists():
            raise ValidationError(f"{path} missing: dataset has no raw traces")
        return read_stm1(path)

    def get_window(self, k: int) -> np.ndarray:
        i, s = self.index[k]
        return self._load(i)[s : s + self.window]

    def labels(self, k: int) -> dict:
        """Scalar labels (``None`` when absent) and the BVP slice for window ``k``."""
        i, s = self.index[k]
        lab = self.clips[i].sidecar.labels
        bvp = None if lab.bvp is None else lab.bvp[s : s + self.window]
        if bvp is not None and bvp.size != self.window:
            bvp = None
        return {"bvp": bvp, "hr": lab.hr_bpm, "rr": lab.rr_bpm, "spo2": lab.spo2_pct}

    def sample_id(self, k: int) -> str:
        i, s = self.index[k]
        return f"{self.clips[i].clip_id}@{s}"

    def subject_of(self, k: int) -> str:
        return self.clips[self.index[k][0]].subject_id

    def domain_of(self, k: int) -> str:
        return self.clips[self.index[k][0]].domain_id

    @property
    def subjects(self) -> list[str]:
        seen = []
        for rec in self.clips:
            if rec.subject_id not in seen:
                seen.append(rec.subject_id)
        return seen

    def subject_windows(self, subject_id: str) -> list[int]:
        """Window indices of one subject in chronological order (clip, then start)."""
        return [k for k, (i, s) in enumerate(self.index) if self.clips[i].subject_id == subject_id]

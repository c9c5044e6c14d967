"""Central finite-difference checks of every differentiable loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L

H = 1e-5
TOLERANCE = 1e-4
SHAPES = {"B": 4, "D": 6, "T": 64}


@dataclass
class GradCheckResult:
    loss: str
    seed: int
    rel_error: float
    passed: bool

    def to_row(self) -> dict:
        return {"loss": self.loss, "seed": self.seed, "rel_error": self.rel_error, "passed": self.passed}


def numeric_gradient(fn, inputs: list, h: float = H) -> list:
    """Central differences of scalar ``fn(*inputs)`` with respect to every input element."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(fn, inputs: list, h: float = H) -> float:
    """``max |analytic - numeric| / max |numeric|`` over all input elements."""
    inputs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs)
    numeric = numeric_gradient(fn, [x.detach().clone() for x in inputs], h)
    diff = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    scale = max(float(n.abs().max()) for n in numeric)
    return diff / max(scale, 1e-12)


def _distinct_singular(gen, B, D, gap=1e-2):
    # re-sample until singular values are well separated (SVD gradients blow up on ties)
    while True:
        z = torch.randn(B, D, generator=gen, dtype=torch.float64)
        s = torch.linalg.svdvals(z)
        if float((s[:-1] - s[1:]).min()) > gap and float(s.min()) > gap:
            return z


def _cases(seed: int) -> dict:
    gen = torch.Generator().manual_seed(seed)
    B, D, T = SHAPES["B"], SHAPES["D"], SHAPES["T"]
    rnd = lambda *shape: torch.randn(*shape, generator=gen, dtype=torch.float64)  # noqa: E731
    t = torch.arange(T, dtype=torch.float64) / 30.0
    freqs = 1.0 + 2.0 * torch.rand(B, 1, generator=gen, dtype=torch.float64)
    wave = torch.sin(2 * torch.pi * freqs * t) + 0.3 * rnd(B, T)
    wave_a = torch.sin(2 * torch.pi * freqs * t + 0.4) + 0.3 * rnd(B, T)

    zo = [_distinct_singular(gen, B, D) for _ in range(2)]
    za = [_distinct_singular(gen, B, D) for _ in range(2)]

    # keep L1 terms away from their kink
    po = rnd(B)
    pa = po + torch.sign(rnd(B)) * (0.1 + torch.rand(B, generator=gen, dtype=torch.float64))

    z_tasks = [rnd(B, D) for _ in range(4)]
    z_p = rnd(B, D)

    def ssa(zo0, zo1, za0, za1):
        return L.ssa_loss([(zo0, za0), (zo1, za1)])

    def sda(zo0, zo1, za0, za1):
        return L.sda_loss([(zo0, za0), (zo1, za1)])

    feat_o, feat_a = rnd(B, 4, 3, 2), rnd(B, 4, 3, 2)

    def flatten_sda(fo, fa):
        return L.sda_loss([L.flatten_pair(fo, fa)])

    def pe(z0, z1, z2, z3, zp):
        return L.pe_loss([z0, z1, z2, z3], zp, pi_floor=0.1)

    target = rnd(B)
    weight = torch.tensor([1.0, 0.1, 1.0, 0.0], dtype=torch.float64)
    return {
        "ssa": (ssa, [*zo, *za]),
        "sda": (sda, [*zo, *za]),
        "flatten_block+sda": (flatten_sda, [feat_o, feat_a]),
        "fc_scalar": (lambda a, b: L.fc_loss(a, b, "hr"), [po, pa]),
        "fc_bvp": (lambda a, b: L.fc_loss(a, b, "bvp"), [wave, wave_a]),
        "tic": (lambda a, b: L.tic_loss(a, b, 30), [wave, wave_a]),
        "tc": (lambda a, b: L.tc_loss(a, b, 30), [wave, wave_a]),
        "neg_pearson": (L.neg_pearson, [wave, wave_a]),
        "pe": (pe, [*z_tasks, z_p]),
        "masked_l1": (lambda p: L.masked_l1(p, target, weight), [target + torch.sign(rnd(B)) * 0.5]),
    }


def _near_clamp(name, fn, inputs) -> bool:
    if name != "pe":
        return False
    with torch.no_grad():
        raw = L.pe_raw(list(inputs[:-1]), inputs[-1])
    return abs(float(raw) - 0.1) < 1e-6


def run_gradcheck(seeds=(0, 1, 2), losses=None, h: float = H, tol: float = TOLERANCE) -> list:
    results = []
    for seed in seeds:
        for name, (fn, inputs) in _cases(seed).items():
            if losses is not None and name not in losses:
                continue
            if _near_clamp(name, fn, inputs):
                continue
            err = relative_error(fn, inputs, h)
            results.append(GradCheckResult(name, int(seed), err, bool(np.isfinite(err) and err < tol)))
    return results


def format_table(results) -> str:
    lines = [f"{'loss':<20} {'seed':>4} {'rel_error':>12}  result"]
    for r in results:
        lines.append(f"{r.loss:<20} {r.seed:>4} {r.rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

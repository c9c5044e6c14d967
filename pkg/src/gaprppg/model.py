"""The multi-task network: shared encoder, per-task gates, decoders, identity branch.

Layout conventions: inputs are ``(B, T, W, 3)`` maps (as stored), converted to
``(B, 3, T, W)`` internally; exposed block features are ``(B, T_i, W_i, C_i)``.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ._validation import ValidationError
from .losses import ALL_TASKS

MODES = ("MSSDG", "TTPA")


@dataclass
class ModelConfig:
    preset: str = "desk"
    input_shape: tuple[int, int, int] = (256, 64, 3)
    widths: tuple[int, ...] = (16, 32, 32, 32)
    n_identities: int = 1
    gate_hidden: int = 32
    id_hidden: int = 32
    decoder_width: int = 32
    tasks: tuple[str, ...] = ALL_TASKS
    head_bias: dict = field(default_factory=lambda: {"hr": 75.0, "rr": 15.0, "spo2": 96.0})

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        self.tasks = tuple(self.tasks)
        if self.preset not in ("desk", "paper"):
            raise ValidationError(f"unknown preset {self.preset!r}")
        if self.preset == "desk" and len(self.widths) < 2:
            raise ValidationError("encoder needs at least 2 blocks")
        T, W, C = self.input_shape
        if C != 3:
            raise ValidationError("input must have 3 channels")
        if T % 16 or W % 16:
            raise ValidationError("T and W must be multiples of 16")
        if self.n_identities < 1:
            raise ValidationError("n_identities (N_p) must be >= 1")
        if set(self.tasks) != set(ALL_TASKS):
            raise ValidationError(f"tasks must be {ALL_TASKS}")

    @property
    def n_blocks(self) -> int:
        return 4 if self.preset == "paper" else len(self.widths)

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        d["tasks"] = list(self.tasks)
        return d


@dataclass
class ForwardOutput:
    preds: dict
    z_shared: torch.Tensor
    z_tasks: dict
    z_p: torch.Tensor
    id_logits: torch.Tensor
    block_features: list
    gates: dict


class _DeskEncoder(nn.Module):
    """Strided conv blocks halving T in each of the first four blocks and W in every block."""

    def __init__(self, widths, in_channels=3):
        super().__init__()
        blocks = []
        c_in = in_channels
        for i, c_out in enumerate(widths):
            stride = (2 if i < 4 else 1, 2)
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=(5, 3), stride=stride, padding=(2, 1), bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = c_in

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return x, feats


class _ResNetEncoder(nn.Module):
    """ResNet-18 trunk; the last stage keeps temporal resolution so T is reduced 16x."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.layer4[0].conv1.stride = (1, 2)
        net.layer4[0].downsample[0].stride = (1, 2)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.blocks = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.out_channels = 512

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return x, feats


class Gate(nn.Module):
    """Element-wise sigmoid gate: linear -> layer norm -> ReLU -> linear -> sigmoid."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, z):
        return torch.sigmoid(self.fc2(torch.relu(self.norm(self.fc1(z)))))


class BVPDecoder(nn.Module):
    """Four x2 temporal upsampling blocks from ``(B, C, T/16)`` to ``(B, T)``."""

    def __init__(self, channels, width):
        super().__init__()
        layers = [nn.Conv1d(channels, width, kernel_size=3, padding=1)]
        for _ in range(4):
            layers += [
                nn.Upsample(scale_factor=2, mode="linear", align_corners=False),
                nn.Conv1d(width, width, kernel_size=3, padding=1),
                nn.BatchNorm1d(width),
                nn.ELU(),
            ]
        layers.append(nn.Conv1d(width, 1, kernel_size=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z).squeeze(1)


class GAPNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        T, W, _ = config.input_shape
        self.encoder = _ResNetEncoder() if config.preset == "paper" else _DeskEncoder(config.widths)
        self.z_channels = self.encoder.out_channels
        self.z_length = T // 16
        dim = self.z_channels * self.z_length
        self.dim = dim
        self.gates = nn.ModuleDict({t: Gate(dim, config.gate_hidden) for t in config.tasks})
        self.identity_gate = Gate(dim, config.gate_hidden)
        self.heads = nn.ModuleDict({t: nn.Linear(dim, 1) for t in ("hr", "rr", "spo2")})
        self.bvp_decoder = BVPDecoder(self.z_channels, config.decoder_width)
        self.id_head = nn.Sequential(nn.Linear(dim, config.id_hidden), nn.ReLU(), nn.Linear(config.id_hidden, config.n_identities + 1))
        # residual personal-feature fusion, zero-initialized so an unadapted model predicts as trained
        self.fusion_scale = nn.Parameter(torch.zeros(dim))
        self.fusion_norm = nn.LayerNorm(dim, elementwise_affine=False)
        with torch.no_grad():
            for task, bias in config.head_bias.items():
                self.heads[task].bias.fill_(float(bias))

    def encode(self, x: torch.Tensor):
        """``(B, T, W, 3)`` -> shared ``Z`` of shape ``(B, dim)`` plus block features."""
        T, W, C = self.config.input_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != (T, W, C):
            raise ValidationError(f"expected input (B, {T}, {W}, {C}), got {tuple(x.shape)}")
        h, feats = self.encoder(x.permute(0, 3, 1, 2))
        # pool over the ROI axis, keep time
        h = h.mean(dim=3)
        if h.shape[-1] != self.z_length:
            h = nn.functional.adaptive_avg_pool1d(h, self.z_length)
        z = h.reshape(h.shape[0], -1)
        return z, [f.permute(0, 2, 3, 1) for f in feats]

    def forward(self, x: torch.Tensor, mode: str = "MSSDG") -> ForwardOutput:
        mode = mode.upper()
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        z, feats = self.encode(x)
        gates = {t: self.gates[t](z) for t in self.config.tasks}
        g_p = self.identity_gate(z)
        z_p = g_p * z
        z_tasks = {t: gates[t] * z for t in self.config.tasks}
        decoded = z_tasks
        if mode == "TTPA":
            decoded = {t: zt + self.fusion_scale * self.fusion_norm(zt + z_p) for t, zt in z_tasks.items()}
        preds = {t: self.heads[t](decoded[t]).squeeze(-1) for t in ("hr", "rr", "spo2")}
        preds["bvp"] = self.bvp_decoder(decoded["bvp"].reshape(-1, self.z_channels, self.z_length))
        return ForwardOutput(
            preds=preds,
            z_shared=z,
            z_tasks=z_tasks,
            z_p=z_p,
            id_logits=self.id_head(z_p),
            block_features=feats,
            gates={**gates, "identity": g_p},
        )


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=torch.float32) -> GAPNet:
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GAPNet(config)
    return model.to(dtype)


# Name prefixes left out of the TTPA update. Empty by default: every parameter,
# including the identity classifier's output layer, adapts at test time.
TTPA_FROZEN_PREFIXES: tuple[str, ...] = ()


def routing_table(model: GAPNet, frozen_prefixes=TTPA_FROZEN_PREFIXES) -> dict:
    names = [n for n, _ in model.named_parameters()]
    frozen = tuple(frozen_prefixes)
    return {
        "MSSDG": names,
        "TTPA": [n for n in names if not (frozen and n.startswith(frozen))],
    }


def trainable_parameters(model: GAPNet, mode: str, frozen_prefixes=TTPA_FROZEN_PREFIXES) -> list:
    mode = mode.upper()
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    allowed = set(routing_table(model, frozen_prefixes)[mode])
    return [p for n, p in model.named_parameters() if n in allowed]


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: GAPNet, *, seed: int = 0, step: int = 0, extra: dict | None = None) -> None:
    """Single-file container: JSON header (config echo, seed, step) + named tensors."""
    payload = {
        "config": model.config.to_json(),
        "seed": int(seed),
        "step": int(step),
        "extra": extra or {},
        "state": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype=None) -> tuple[GAPNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = payload["config"]
    config = ModelConfig(**{**cfg, "input_shape": tuple(cfg["input_shape"]), "widths": tuple(cfg["widths"]), "tasks": tuple(cfg["tasks"])})
    model = GAPNet(config)
    model.load_state_dict(payload["state"])
    if dtype is not None:
        model = model.to(dtype)
    else:
        first = next(iter(payload["state"].values()))
        model = model.to(first.dtype)
    meta = {k: payload[k] for k in ("seed", "step", "extra")}
    meta["config"] = cfg
    return model, meta


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)

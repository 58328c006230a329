"""Segmentation network, optimizer wrapper, EMA update, gradient check, checkpoints.

The reference network is a small encoder-decoder with skip connections:
two downsampling stages (total factor 4), channel widths 16/32/64, and a
1x1 classification head, roughly 100k parameters.  It is sized so that a
full desk-scale training run finishes in minutes on a single CPU core.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

ARCHITECTURE_ID = "smallsegnet-v1"
CHECKPOINT_MAGIC = b"AMIXCKPT"
CHECKPOINT_FORMAT_VERSION = 1


class ConvBlock(nn.Module):
    """Two 3x3 conv + GroupNorm + ReLU layers at a fixed channel width."""

    def __init__(self, in_channels: int, out_channels: int, num_groups: int = 4):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.GroupNorm(min(num_groups, out_channels), out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.GroupNorm(min(num_groups, out_channels), out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class SmallSegNet(nn.Module):
    """Encoder-decoder segmentation network with skip connections.

    Input:  (batch, in_channels, H, W) or a single (in_channels, H, W) image,
            H and W divisible by ``downsample_factor``.
    Output: logits of shape (batch, num_classes, H, W) (or unbatched to match).
    """

    downsample_factor = 4

    def __init__(self, in_channels: int = 1, num_classes: int = 3,
                 widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(widths)
        w0, w1, w2 = self.widths
        self.enc1 = ConvBlock(in_channels, w0)
        self.enc2 = ConvBlock(w0, w1)
        self.bottleneck = ConvBlock(w1, w2)
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(w2, w1, kernel_size=2, stride=2)
        self.dec2 = ConvBlock(w1 + w1, w1)
        self.up1 = nn.ConvTranspose2d(w1, w0, kernel_size=2, stride=2)
        self.dec1 = ConvBlock(w0 + w0, w0)
        self.head = nn.Conv2d(w0, num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        if x.dim() != 4:
            raise ValueError(f"expected 3D or 4D input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channel(s), got {x.shape[1]}")
        h, w = x.shape[-2], x.shape[-1]
        f = self.downsample_factor
        if h % f != 0 or w % f != 0:
            raise ValueError(
                f"spatial dims ({h}, {w}) must be divisible by {f}")
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        logits = self.head(d1)
        return logits.squeeze(0) if unbatched else logits


def _fan_in(weight: torch.Tensor) -> int:
    receptive = 1
    for s in weight.shape[2:]:
        receptive *= s
    return weight.shape[1] * receptive


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """He-style fan-in initialization driven by an explicit seeded generator.

    Conv weights are drawn from N(0, sqrt(2/fan_in)); biases start at zero;
    normalization gains/offsets start at 1/0.  Identical seeds yield
    bit-identical parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                std = math.sqrt(2.0 / _fan_in(module.weight))
                module.weight.normal_(0.0, std, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def build_model(num_classes: int = 3, seed: int = 0, in_channels: int = 1,
                widths: tuple[int, int, int] = (16, 32, 64)) -> SmallSegNet:
    """Construct and deterministically initialize the reference network."""
    model = SmallSegNet(in_channels=in_channels, num_classes=num_classes,
                        widths=widths)
    return init_parameters(model, seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class OptimizerState:
    """AdamW optimizer plus an explicit step counter.

    Defaults: lr 1e-4 (held fixed), betas (0.9, 0.999), eps 1e-8,
    decoupled weight decay 1e-4.
    """

    optimizer: torch.optim.AdamW
    learning_rate: float
    step_count: int = 0
    _params: list[torch.Tensor] = field(default_factory=list, repr=False)


def make_optimizer(model: nn.Module, learning_rate: float = 1e-4,
                   betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8,
                   weight_decay: float = 1e-4) -> OptimizerState:
    params = list(model.parameters())
    opt = torch.optim.AdamW(params, lr=learning_rate, betas=betas, eps=eps,
                            weight_decay=weight_decay)
    return OptimizerState(optimizer=opt, learning_rate=learning_rate,
                          _params=params)


def optimizer_step(state: OptimizerState, model: nn.Module,
                   grads: list[torch.Tensor] | None = None) -> OptimizerState:
    """Apply one decoupled-weight-decay update and advance the step counter.

    When ``grads`` is given it must shape-match the model's parameter list
    and replaces any gradients from a previous backward pass.
    """
    params = list(model.parameters())
    if grads is not None:
        if len(grads) != len(params):
            raise ValueError(
                f"got {len(grads)} gradients for {len(params)} parameters")
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {tuple(g.shape)} does not match "
                    f"parameter shape {tuple(p.shape)}")
            p.grad = g.detach().clone()
    state.optimizer.step()
    state.step_count += 1
    return state


def ema_update(teacher: nn.Module, student: nn.Module,
               alpha: float) -> nn.Module:
    """teacher <- alpha * teacher + (1 - alpha) * student, element-wise.

    alpha = 0 copies the student; alpha = 1 leaves the teacher unchanged.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ValueError("teacher and student have different parameter counts")
    with torch.no_grad():
        for t, s in zip(t_params, s_params):
            if t.shape != s.shape:
                raise ValueError(
                    f"parameter shape mismatch: {tuple(t.shape)} vs "
                    f"{tuple(s.shape)}")
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)
    return teacher


def _promote_floats(batch):
    """Deep-convert floating-point tensors to float64, leaving labels alone."""
    if isinstance(batch, torch.Tensor):
        return batch.double() if batch.is_floating_point() else batch
    if isinstance(batch, (list, tuple)):
        return type(batch)(_promote_floats(item) for item in batch)
    return batch


def gradient_check(model: nn.Module, batch, loss_fn, epsilon: float,
                   num_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a double-precision copy of the model.  ``loss_fn(model, batch)``
    must return a scalar tensor.  A random subset of ``num_coords`` parameter
    coordinates is probed; the relative error of coordinate g vs. the central
    difference d is |g - d| / (|g| + |d| + 1e-12).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    work = copy.deepcopy(model).double()
    batch = _promote_floats(batch)
    params = [p for p in work.parameters() if p.requires_grad]
    loss = loss_fn(work, batch)
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g
                for p, g in zip(params, analytic)]

    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(num_coords, total), replace=False)

    worst = 0.0
    with torch.no_grad():
        for flat_index in chosen:
            pi = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            k = int(flat_index - offsets[pi])
            view = params[pi].view(-1)
            original = view[k].item()
            view[k] = original + epsilon
            loss_plus = float(loss_fn(work, batch))
            view[k] = original - epsilon
            loss_minus = float(loss_fn(work, batch))
            view[k] = original
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            a = analytic[pi].view(-1)[k].item()
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst


def save_checkpoint(path: str | Path, model: SmallSegNet, step: int,
                    seed: int) -> Path:
    """Write parameters as a flat little-endian float32 container.

    Layout: 8-byte magic, uint32 header length, JSON header (architecture id,
    model hyperparameters, step counter, seed, and a tensor manifest with
    byte offsets), then the raw float32 payload.
    """
    path = Path(path)
    state = model.state_dict()
    manifest = []
    payload = bytearray()
    for name, tensor in state.items():
        raw = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        manifest.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": ARCHITECTURE_ID,
        "in_channels": model.in_channels,
        "num_classes": model.num_classes,
        "widths": list(model.widths),
        "step": int(step),
        "seed": int(seed),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))
    return path


def load_checkpoint(path: str | Path) -> tuple[SmallSegNet, dict]:
    """Rebuild a model from a checkpoint file; returns (model, header)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a recognized checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format_version {header.get('format_version')}")
    if header.get("architecture") != ARCHITECTURE_ID:
        raise ValueError(
            f"unknown architecture id {header.get('architecture')!r}")
    payload = blob[12 + header_len:]
    model = SmallSegNet(in_channels=header["in_channels"],
                        num_classes=header["num_classes"],
                        widths=tuple(header["widths"]))
    state = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ValueError(
                f"checkpoint payload truncated for tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        state[entry["name"]] = torch.from_numpy(
            arr.reshape(entry["shape"]).copy())
    missing = set(model.state_dict()) - set(state)
    extra = set(state) - set(model.state_dict())
    if missing or extra:
        raise ValueError(
            f"checkpoint tensor names do not match the architecture "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    model.load_state_dict(state)
    return model, header

"""Differentiable building blocks and a finite-difference gradient checker.

Feature maps are ``(B, C, H, W)`` tensors throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from cloudfuse.errors import ShapeError


def reformat(x: torch.Tensor, s: int) -> torch.Tensor:
    """Space-to-depth: ``(B, C, H, W) -> (B, C*s*s, H/s, W/s)``.

    Output channel ``(dy*s + dx)*C + c`` holds ``x[:, c, dy::s, dx::s]``, i.e.
    channel groups are the s*s sub-grid phases in row-major order.
    """
    b, c, h, w = x.shape
    if s < 1 or h % s or w % s:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by reformat scale {s}")
    x = x.reshape(b, c, h // s, s, w // s, s)
    x = x.permute(0, 3, 5, 1, 2, 4)
    return x.reshape(b, s * s * c, h // s, w // s)


def reformat_inv(x: torch.Tensor, s: int) -> torch.Tensor:
    """Exact inverse of :func:`reformat`."""
    b, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise ShapeError(f"{cs} channels are not divisible by s^2 = {s * s}")
    c = cs // (s * s)
    x = x.reshape(b, s, s, c, h, w)
    x = x.permute(0, 3, 4, 1, 5, 2)
    return x.reshape(b, c, h * s, w * s)


def conv(in_channels: int, out_channels: int, kernel: int = 3) -> nn.Conv2d:
    """Stride-1 convolution with same padding (1x1 or 3x3)."""
    if kernel not in (1, 3):
        raise ValueError(f"kernel must be 1 or 3, got {kernel}")
    return nn.Conv2d(in_channels, out_channels, kernel, padding=kernel // 2)


def check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{where}: expected (B, {expected}, H, W), got {tuple(x.shape)}")


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_channels(x, self.weight.numel(), "layer_norm")
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class MlpGelu(nn.Module):
    """Position-wise feed-forward network: Linear -> GELU -> Linear."""

    def __init__(self, channels: int, ratio: float = 2.0):
        super().__init__()
        hidden = int(channels * ratio)
        self.fc1 = conv(channels, hidden, 1)
        self.fc2 = conv(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def relative_position_index(window: int) -> torch.Tensor:
    """(N, N) index into a ((2w-1)^2)-entry bias table, N = window^2."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, C, H, W) -> (B*nW, window*window, C), windows in row-major order."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // window, window, w // window, window)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)


def window_merge(tokens: torch.Tensor, window: int, b: int, h: int, w: int) -> torch.Tensor:
    c = tokens.shape[-1]
    x = tokens.reshape(b, h // window, w // window, window, window, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows.

    Each head adds a learned bias indexed by the relative offset between the
    two tokens. Windows never exchange information.
    """

    def __init__(self, channels: int, window: int = 8, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.window = window
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.relative_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("bias_index", relative_position_index(window), persistent=False)

    def attention_weights(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(weights, values)`` shaped (B*nW, heads, N, N) and (B*nW, heads, N, d)."""
        check_channels(x, self.channels, "w_msa")
        _, _, h, w = x.shape
        if h % self.window or w % self.window:
            raise ShapeError(f"spatial size {h}x{w} not divisible by window {self.window}")
        tokens = window_partition(x, self.window)
        nw, n, c = tokens.shape
        qkv = self.qkv(tokens).reshape(nw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_bias[self.bias_index.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)
        return torch.softmax(logits + bias.unsqueeze(0), dim=-1), v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        attn, v = self.attention_weights(x)
        out = (attn @ v).transpose(1, 2).reshape(-1, self.window * self.window, c)
        return window_merge(self.proj(out), self.window, b, h, w)


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    attempts: int = 1

    def __float__(self) -> float:
        return self.max_rel_error


def _relative_errors(analytic: torch.Tensor, numeric: torch.Tensor, atol: float) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, atol))
    return (analytic - numeric).abs() / denom


def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]] | nn.Module = (),
    eps: float = 1e-5,
    atol: float = 1e-6,
    max_coords: int | None = None,
    tol: float = 1e-4,
    retries: int = 2,
    seed: int = 0,
    projection: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> GradCheckResult:
    """Compare autograd gradients of ``sum(op(*inputs))`` with central differences.

    Gradients are checked for every input tensor and every parameter; with
    ``max_coords`` set, a seeded random subset of coordinates per tensor is
    perturbed. Entries whose magnitude is below ``atol`` are compared in
    absolute terms. A coordinate above ``tol`` is re-probed with 10*eps
    (less rounding noise where the true gradient is near zero) and with
    eps/10 and eps/100 (a step across a ReLU kink spoils the quotient); the
    best step counts. If the check still fails it is repeated with jittered
    inputs.
    """
    if isinstance(params, nn.Module):
        params = list(params.named_parameters())
    inputs = [t.detach().clone() for t in inputs]
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("grad_check requires float64 tensors")
    gen = torch.Generator().manual_seed(seed)

    reference = None

    def loss() -> torch.Tensor:
        out = op(*inputs)
        if projection is not None:
            return projection(out)
        # summing out - reference keeps the total near zero, so the difference
        # quotient is not swamped by the rounding of a large sum
        return (out - reference).sum() if reference is not None else out.sum()

    def central(flat: torch.Tensor, i: int, step: float) -> torch.Tensor:
        orig = flat[i].item()
        flat[i] = orig + step
        up = loss().item()
        flat[i] = orig - step
        down = loss().item()
        flat[i] = orig
        return torch.tensor((up - down) / (2 * step), dtype=torch.float64)

    result = None
    for attempt in range(1, retries + 2):
        targets = [(f"input{i}", t) for i, t in enumerate(inputs)] + list(params)
        leaves = [t for _, t in targets]
        for t in inputs:
            t.requires_grad_(True)
        reference = None
        analytic = torch.autograd.grad(loss(), leaves, allow_unused=True)
        with torch.no_grad():
            reference = op(*inputs).detach()
        per_tensor = {}
        with torch.no_grad():
            for (name, t), g in zip(targets, analytic):
                g = torch.zeros_like(t) if g is None else g
                flat, gflat = t.view(-1), g.reshape(-1)
                idx = torch.arange(flat.numel())
                if max_coords is not None and flat.numel() > max_coords:
                    idx = torch.randperm(flat.numel(), generator=gen)[:max_coords]
                errors = torch.empty(len(idx), dtype=torch.float64)
                for j, i in enumerate(idx.tolist()):
                    # a step that straddles a ReLU kink is retried with smaller steps
                    for step in (eps, 10 * eps, eps / 10, eps / 100):
                        err = _relative_errors(gflat[i : i + 1], central(flat, i, step).view(1), atol).item()
                        errors[j] = err if step == eps else min(errors[j].item(), err)
                        if err < tol:
                            break
                per_tensor[name] = errors.max().item() if len(idx) else 0.0
        result = GradCheckResult(max(per_tensor.values(), default=0.0), per_tensor, attempt)
        if result.max_rel_error < tol:
            break
        with torch.no_grad():
            for t in inputs:
                t.requires_grad_(False)
                t.add_(1e-3 * t.abs().mean().clamp_min(1e-3) * torch.randn(t.shape, generator=gen, dtype=t.dtype))
    for t in inputs:
        t.requires_grad_(False)
    return result

"""Differentiable building blocks shared by every model.

All tensors are double precision unless a caller opts into float32. Every
causal op here obeys one contract: perturbing inputs at times > t never
changes outputs at times <= t, bit for bit.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, DegenerateAttentionError, ProbeError, ShapeError

DTYPE = torch.float64


# --------------------------------------------------------------------------
# functional ops
# --------------------------------------------------------------------------

def causal_conv1d(x: torch.Tensor, kernel: torch.Tensor, dilation: int = 1,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """Time-major causal convolution.

    x is ``[T, Cin]`` or ``[B, T, Cin]``; kernel is ``[k, Cin, Cout]`` with
    ``kernel[k-1]`` applied to the current frame. Left side is zero padded.
    """
    if dilation < 1:
        raise ShapeError("dilation must be >= 1")
    if kernel.dim() != 3 or kernel.shape[0] < 1:
        raise ShapeError("kernel must be [k, Cin, Cout] with k >= 1")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {kernel.shape[1]}")
    k = kernel.shape[0]
    w = kernel.permute(2, 1, 0)  # [Cout, Cin, k]
    xp = F.pad(x.transpose(1, 2), ((k - 1) * dilation, 0))
    y = F.conv1d(xp, w, bias, dilation=dilation).transpose(1, 2)
    return y[0] if squeeze else y


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention; ``mask`` is True where attendable."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("query and key widths differ")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not bool(mask.any(-1).all()):
            raise DegenerateAttentionError("attention row with no attendable key")
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def rotary_embed(x: torch.Tensor, positions: torch.Tensor | Sequence[int],
                 base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive channel pairs by position-dependent angles.

    positions broadcast against the time axis (``x.shape[-2]``).
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError("rotary embedding needs an even width")
    pos = torch.as_tensor(positions, dtype=x.dtype)
    inv_freq = base ** (-torch.arange(0, d, 2, dtype=x.dtype) / d)
    ang = pos[..., None] * inv_freq  # [..., T, d/2]
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def softmax_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                          weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    With ``weights`` (same shape as targets) the mean is weighted; an all-zero
    weight vector yields 0.
    """
    n_classes = logits.shape[-1]
    if targets.numel() and (int(targets.max()) >= n_classes or int(targets.min()) < 0):
        raise DataError(f"token index outside [0, {n_classes})")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    if weights is None:
        return nll.mean()
    w = weights.to(nll.dtype)
    total = w.sum()
    if float(total) == 0.0:
        return nll.sum() * 0.0
    return (nll * w).sum() / total


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

def grad_check(op: Callable[..., torch.Tensor], point, eps: float = 1e-6,
               directions: int | None = None, seed: int = 0,
               params: Sequence[torch.Tensor] = ()) -> float:
    """Max relative error between autograd and central finite differences.

    ``op`` maps the tensors in ``point`` (a tensor or tuple of tensors) to a
    tensor; non-scalar outputs are reduced with fixed random weights. Extra
    leaf tensors in ``params`` (e.g. module weights) are checked as well.

    With ``directions=None`` every input element is probed; otherwise the
    check compares directional derivatives along that many random directions.
    """
    if not 0.0 < eps <= 1e-3:
        raise ProbeError("eps must lie in (0, 1e-3]")
    inputs = [point] if isinstance(point, torch.Tensor) else list(point)
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    leaves = inputs + list(params)
    gen = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        y0 = op(*inputs)
    if not torch.isfinite(y0).all():
        raise ProbeError("forward value is not finite at the probe point")
    proj = torch.randn(y0.shape, generator=gen, dtype=y0.dtype) if y0.dim() else None

    def scalar() -> torch.Tensor:
        y = op(*inputs)
        return (y * proj).sum() if proj is not None else y

    for p in leaves:
        p.grad = None
    out = scalar()
    grads = torch.autograd.grad(out, leaves, allow_unused=True) if out.requires_grad else [None] * len(leaves)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]

    def numeric(direction: list[torch.Tensor]) -> float:
        with torch.no_grad():
            for p, d in zip(leaves, direction):
                p.add_(d, alpha=eps)
            fp = float(scalar())
            for p, d in zip(leaves, direction):
                p.add_(d, alpha=-2 * eps)
            fm = float(scalar())
            for p, d in zip(leaves, direction):
                p.add_(d, alpha=eps)
        return (fp - fm) / (2 * eps)

    analytic, numerical = [], []
    if directions is None:
        for i, p in enumerate(leaves):
            for j in range(p.numel()):
                d = [torch.zeros_like(q) for q in leaves]
                d[i].view(-1)[j] = 1.0
                numerical.append(numeric(d))
                analytic.append(float(grads[i].reshape(-1)[j]))
    else:
        for _ in range(directions):
            d = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in leaves]
            numerical.append(numeric(d))
            analytic.append(float(sum((g * di).sum() for g, di in zip(grads, d))))
    a, n = np.asarray(analytic), np.asarray(numerical)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


# --------------------------------------------------------------------------
# fingerprints
# --------------------------------------------------------------------------

def fingerprint(obj) -> str:
    """sha256 over a module's (or state dict's) named tensors."""
    sd = obj.state_dict() if isinstance(obj, nn.Module) else obj
    h = hashlib.sha256()
    for name in sorted(sd):
        t = sd[name]
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class Frozen:
    """Mixin: freeze() disables grads and caches the weight fingerprint."""

    _fp: str | None = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._fp = fingerprint(self)
        return self

    def fingerprint(self) -> str:
        return self._fp if self._fp is not None else fingerprint(self)


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

class CausalConv1d(nn.Module):
    """Channel-first causal conv with an explicit carried input history.

    ``forward(x, hist)`` takes ``x: [B, C, T]`` and the previous
    ``(k-1)*dilation`` input frames (zeros when ``hist`` is None) and returns
    the output plus the updated history, so batch and chunked calls share one
    code path.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int = 1):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel_size, dilation=dilation)
        self.context = (kernel_size - 1) * dilation

    def init_hist(self, batch: int, dtype=DTYPE) -> torch.Tensor:
        return torch.zeros(batch, self.conv.in_channels, self.context, dtype=dtype)

    def forward(self, x: torch.Tensor, hist: torch.Tensor | None = None):
        if hist is None:
            hist = self.init_hist(x.shape[0], x.dtype)
        xx = torch.cat((hist, x), dim=-1)
        y = self.conv(xx)
        new_hist = xx[..., xx.shape[-1] - self.context:] if self.context else hist
        return y, new_hist


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, zero_out: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        if zero_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def band_mask(t_q: int, t_k: int, window: int, q_offset: int = 0) -> torch.Tensor:
    """Causal sliding-window mask: query i sees keys j with i-window < j <= i."""
    qi = torch.arange(t_q)[:, None] + q_offset
    kj = torch.arange(t_k)[None, :]
    return (kj <= qi) & (kj > qi - window)


class KVCache:
    """Rolling key/value memory for one attention layer, capped at ``window``."""

    def __init__(self, window: int):
        self.window = window
        self.k: torch.Tensor | None = None
        self.v: torch.Tensor | None = None

    def append(self, k: torch.Tensor, v: torch.Tensor):
        if self.k is None:
            self.k, self.v = k, v
        else:
            self.k = torch.cat((self.k, k), dim=-2)
            self.v = torch.cat((self.v, v), dim=-2)
        if self.k.shape[-2] > self.window:
            self.k = self.k[..., -self.window:, :]
            self.v = self.v[..., -self.window:, :]
        return self.k, self.v

    def __len__(self) -> int:
        return 0 if self.k is None else self.k.shape[-2]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {} if self.k is None else {"k": self.k, "v": self.v}

    def load(self, d: dict[str, torch.Tensor]) -> None:
        self.k, self.v = d.get("k"), d.get("v")


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, rotary: bool = True, zero_out: bool = False):
        super().__init__()
        self.h = n_heads
        self.dh = d_model // n_heads
        self.rotary = rotary
        self.q = nn.Linear(d_model, d_model)
        self.kv = nn.Linear(d_model, 2 * d_model)
        self.o = nn.Linear(d_model, d_model)
        if zero_out:
            nn.init.zeros_(self.o.weight)
            nn.init.zeros_(self.o.bias)

    def _split(self, x):  # [B, T, D] -> [B, H, T, dh]
        return x.unflatten(-1, (self.h, self.dh)).transpose(-2, -3)

    def project_q(self, x, pos):
        q = self._split(self.q(x))
        return rotary_embed(q, pos) if self.rotary else q

    def project_kv(self, ctx, pos):
        k, v = self.kv(ctx).chunk(2, dim=-1)
        k, v = self._split(k), self._split(v)
        if self.rotary:
            k = rotary_embed(k, pos)
        return k, v

    def attend(self, q, k, v, mask=None):
        y = masked_attention(q, k, v, mask)
        return self.o(y.transpose(-2, -3).flatten(-2))

    def forward(self, x, ctx, mask=None, q_pos=None, k_pos=None):
        if q_pos is None:
            q_pos = torch.arange(x.shape[-2])
        if k_pos is None:
            k_pos = torch.arange(ctx.shape[-2])
        q = self.project_q(x, q_pos)
        k, v = self.project_kv(ctx, k_pos)
        return self.attend(q, k, v, mask)


class AttnLayer(nn.Module):
    """Pre-norm attention sub-layer followed by a pre-norm feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int = 2, rotary: bool = True,
                 zero_out: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rotary=rotary, zero_out=zero_out)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = MLP(d_model, ffn_mult * d_model, d_model, zero_out=zero_out)

    def forward(self, x, ctx=None, mask=None, q_pos=None, k_pos=None):
        """Self-attention when ``ctx`` is None, otherwise attend to ``ctx``."""
        h = self.norm(x)
        x = x + self.attn(h, h if ctx is None else ctx, mask, q_pos, k_pos)
        return x + self.ff(self.norm_ff(x))

    def step(self, x, cache: KVCache, pos: int, ctx=None):
        """One new query position; appends its key/value (or ``ctx``'s) to ``cache``."""
        h = self.norm(x)
        p = torch.tensor([pos])
        k, v = self.attn.project_kv(h if ctx is None else ctx, p)
        k, v = cache.append(k, v)
        x = x + self.attn.attend(self.attn.project_q(h, p), k, v)
        return x + self.ff(self.norm_ff(x))


@contextlib.contextmanager
def seeded_init(seed: int):
    """Fork torch's global RNG and seed it, for deterministic weight init."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield

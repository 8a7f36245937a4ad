"""Streamable vector-quantised motion tokenizer, one per body region.

The encoder is bidirectional inside a window and downsamples time by 4; the
decoder is strictly causal, so a token stream can be decoded chunk by chunk
with carried convolution histories. Training runs in two stages: an
autoencoder with continuous latents, then (encoder/decoder frozen) an EMA
codebook plus the linear pre-projection and projection head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_fitted, check_poses, check_windows
from .config import Config
from .errors import (ConfigError, FrozenMutationError, ShapeError, StateMismatchError,
                     TrainingDivergedError)
from .nncore import DTYPE, CausalConv1d, Frozen, MLP, fingerprint, seeded_init

DOWNSAMPLE = 4
LogFn = Callable[..., None]


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

class _ResBlock(nn.Module):
    """Non-causal residual block (encoder side).

    Replicate padding keeps latents near a window edge statistically close to
    interior ones, which makes them far easier to quantise.
    """

    def __init__(self, c: int, dilations=(1, 3)):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(c, c, 3, dilation=d, padding=d, padding_mode="replicate") for d in dilations)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = conv(F.gelu(h))
        return x + h


class _CausalResBlock(nn.Module):
    def __init__(self, c: int, dilations=(1, 3)):
        super().__init__()
        self.convs = nn.ModuleList(CausalConv1d(c, c, 3, d) for d in dilations)

    def forward(self, x, hists=None):
        hists = hists or [None] * len(self.convs)
        h, new = x, []
        for conv, hist in zip(self.convs, hists):
            h, nh = conv(F.gelu(h), hist)
            new.append(nh)
        return x + h, new


@dataclass
class DecoderState:
    """Carried conv histories of one causal decoder, tagged with its weights."""

    model_fp: str
    hists: list = field(default_factory=list)
    steps: int = 0

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f"h{i}": h for i, h in enumerate(self.hists)}


class StreamAutoencoder(Frozen, nn.Module):
    def __init__(self, dim: int, channels: int = 256, latent_dim: int = 256,
                 res_blocks: int = 2, region: str = ""):
        super().__init__()
        self.region, self.dim, self.latent_dim = region, dim, latent_dim
        c = channels
        enc = [nn.Conv1d(dim, c, 3, padding=1, padding_mode="replicate"), nn.GELU()]
        for _ in range(2):
            enc.append(nn.Conv1d(c, c, 4, stride=2, padding=1, padding_mode="replicate"))
            enc.extend(_ResBlock(c) for _ in range(res_blocks))
        enc.extend([nn.GELU(), nn.Conv1d(c, latent_dim, 1)])
        self.encoder = nn.Sequential(*enc)

        self.dec_in = CausalConv1d(latent_dim, c, 3)
        self.dec_stages = nn.ModuleList(
            nn.ModuleList(_CausalResBlock(c) for _ in range(res_blocks)) for _ in range(2))
        self.dec_out = CausalConv1d(c, dim, 3)

    # -- encoder --------------------------------------------------------
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, T, dim]`` (T divisible by 4) -> latents ``[B, T/4, latent_dim]``."""
        if x.shape[-2] % DOWNSAMPLE:
            raise ShapeError(f"window length {x.shape[-2]} is not divisible by {DOWNSAMPLE}")
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {x.shape[-1]}")
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    # -- causal decoder -------------------------------------------------
    def open_decoder(self, batch: int = 1) -> DecoderState:
        return DecoderState(self.fingerprint(), [None] * self._n_convs())

    def _n_convs(self) -> int:
        return 2 + sum(len(b.convs) for st in self.dec_stages for b in st)

    def decode_causal(self, z: torch.Tensor, state: DecoderState | None = None):
        """Latents ``[B, L, latent_dim]`` -> (poses ``[B, 4L, dim]``, state)."""
        if state is None:
            state = self.open_decoder(z.shape[0])
        elif state.model_fp != self.fingerprint():
            raise StateMismatchError("decoder state belongs to a different model")
        hists = list(state.hists)
        it = iter(range(len(hists)))
        i = next(it)
        h, hists[i] = self.dec_in(z.transpose(1, 2), hists[i])
        for stage in self.dec_stages:
            h = torch.repeat_interleave(h, 2, dim=-1)
            for block in stage:
                idx = [next(it) for _ in block.convs]
                h, new = block(h, [hists[j] for j in idx])
                for j, nh in zip(idx, new):
                    hists[j] = nh
        i = next(it)
        y, hists[i] = self.dec_out(F.gelu(h), hists[i])
        return y.transpose(1, 2), DecoderState(state.model_fp, hists, state.steps + z.shape[1])

    def forward(self, x):
        y, _ = self.decode_causal(self.encode(x))
        return y


# ---------------------------------------------------------------------------
# codebook and projections
# ---------------------------------------------------------------------------

class Codebook(nn.Module):
    """EMA-maintained code table ``c_k = m_k / max(N_k, eps)``."""

    def __init__(self, n_codes: int, code_dim: int, decay: float = 0.99, eps: float = 1e-5):
        super().__init__()
        if n_codes < 1:
            raise ConfigError("empty codebook")
        if not 0.0 < decay < 1.0:
            raise ConfigError("decay must lie in (0, 1)")
        self.decay, self.eps = decay, eps
        self.register_buffer("codes", torch.randn(n_codes, code_dim, dtype=DTYPE))
        self.register_buffer("counts", torch.ones(n_codes, dtype=DTYPE))
        self.register_buffer("sums", self.codes.clone())

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @classmethod
    def from_entries(cls, entries, decay: float = 0.99, eps: float = 1e-5) -> "Codebook":
        e = torch.as_tensor(np.asarray(entries, dtype=np.float64))
        if e.ndim != 2 or e.shape[0] == 0:
            raise ConfigError("empty codebook")
        cb = cls(e.shape[0], e.shape[1], decay, eps)
        cb.codes.copy_(e)
        cb.sums.copy_(e)
        return cb

    def seed_from(self, latents: torch.Tensor, gen: torch.Generator) -> None:
        idx = _sample_rows(latents.shape[0], self.n_codes, gen)
        self.codes.copy_(latents[idx])
        self.sums.copy_(latents[idx])
        self.counts.fill_(1.0)

    def utilization(self, floor: float = 1.0) -> float:
        return float((self.counts >= floor).double().mean())


def _sample_rows(n: int, k: int, gen: torch.Generator) -> torch.Tensor:
    """k row indices from range(n): without replacement when possible."""
    if n >= k:
        return torch.randperm(n, generator=gen)[:k]
    return torch.randint(0, n, (k,), generator=gen)


def quantize(z: torch.Tensor, codebook: Codebook | torch.Tensor, chunk: int = 4096):
    """Nearest-code assignment; ties go to the lowest index.

    Returns ``(tokens, dequantised)``; works on any leading shape.
    """
    codes = codebook.codes if isinstance(codebook, Codebook) else codebook
    if codes.shape[0] == 0:
        raise ConfigError("empty codebook")
    if z.shape[-1] != codes.shape[-1]:
        raise ShapeError(f"latent width {z.shape[-1]} != code width {codes.shape[-1]}")
    flat = z.reshape(-1, z.shape[-1])
    out = []
    for s in range(0, flat.shape[0], chunk):
        d = ((flat[s:s + chunk, None, :] - codes[None]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=-1))
    tokens = torch.cat(out) if out else torch.zeros(0, dtype=torch.long)
    tokens = tokens.reshape(z.shape[:-1])
    return tokens, codes[tokens]


@torch.no_grad()
def ema_update(codebook: Codebook, assignments: torch.Tensor, latents: torch.Tensor) -> Codebook:
    """In-place EMA step on counts and sums, then ``c = m / max(N, eps)``."""
    g = codebook.decay
    a = assignments.reshape(-1)
    z = latents.reshape(-1, latents.shape[-1]).to(codebook.sums.dtype)
    counts = torch.bincount(a, minlength=codebook.n_codes).to(codebook.counts.dtype)
    sums = torch.zeros_like(codebook.sums).index_add_(0, a, z)
    codebook.counts.mul_(g).add_(counts, alpha=1 - g)
    codebook.sums.mul_(g).add_(sums, alpha=1 - g)
    codebook.codes.copy_(codebook.sums / codebook.counts.clamp_min(codebook.eps)[:, None])
    return codebook


@torch.no_grad()
def reset_dead_codes(codebook: Codebook, recent: torch.Tensor, usage_floor: float,
                     gen: torch.Generator) -> int:
    """Re-seed entries whose EMA count fell below ``usage_floor``; returns how many."""
    recent = recent.reshape(-1, recent.shape[-1])
    if recent.shape[0] == 0:
        raise ConfigError("reset needs at least one recent latent")
    dead = torch.nonzero(codebook.counts < usage_floor).reshape(-1)
    if dead.numel() == 0:
        return 0
    pick = recent[_sample_rows(recent.shape[0], dead.numel(), gen)]
    codebook.codes[dead] = pick
    codebook.sums[dead] = pick
    codebook.counts[dead] = 1.0
    return int(dead.numel())


class ProjectionHead(nn.Module):
    """Linear skip plus a zero-initialised MLP branch, ``d_code -> latent_dim``."""

    def __init__(self, d_code: int, latent_dim: int, hidden: int | None = None):
        super().__init__()
        self.skip = nn.Linear(d_code, latent_dim, bias=False)
        self.mlp = MLP(d_code, hidden or 2 * d_code, latent_dim, zero_out=True)
        with torch.no_grad():
            self.skip.weight.zero_()
            n = min(d_code, latent_dim)
            self.skip.weight[:n, :n] = torch.eye(n)

    def forward(self, z):
        return self.skip(z) + self.mlp(z)

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


class CodeStage(Frozen, nn.Module):
    """Stage-2 trainables: latent->code pre-projection, codebook, head."""

    def __init__(self, latent_dim: int, code_dim: int, n_codes: int, decay: float, eps: float):
        super().__init__()
        self.pre = nn.Linear(latent_dim, code_dim, bias=False)
        with torch.no_grad():
            if latent_dim >= code_dim:  # orthonormal rows
                self.pre.weight.copy_(torch.linalg.qr(torch.randn(latent_dim, code_dim))[0].T)
            else:
                self.pre.weight.copy_(torch.linalg.qr(torch.randn(code_dim, latent_dim))[0])
        self.codebook = Codebook(n_codes, code_dim, decay, eps)
        self.head = ProjectionHead(code_dim, latent_dim)
        with torch.no_grad():  # head starts as the pseudo-inverse of pre
            self.head.skip.weight.copy_(torch.linalg.pinv(self.pre.weight))

    def quantize(self, z):
        return quantize(self.pre(z), self.codebook)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.head(self.codebook.codes[tokens])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ae_loss(ae: StreamAutoencoder, x: torch.Tensor, lambda_ae: float = 1.0) -> torch.Tensor:
    return lambda_ae * (ae(x) - x).abs().mean()


def stage2_loss(ae: StreamAutoencoder, cs: CodeStage, x: torch.Tensor, lambda_rec: float = 1.0,
                lambda_cb: float = 0.2, return_parts: bool = False):
    """L1 through the frozen decoder (straight-through) plus commitment."""
    z = cs.pre(ae.encode(x))
    tokens, zq = quantize(z.detach(), cs.codebook)
    st = z + (zq - z).detach()
    rec = (ae.decode_causal(cs.head(st))[0] - x).abs().mean()
    commit = ((z - zq.detach()) ** 2).mean()
    loss = lambda_rec * rec + lambda_cb * commit
    if return_parts:
        return loss, {"rec": rec.item(), "commit": commit.item(), "tokens": tokens, "z": z.detach()}
    return loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _check_finite(loss: torch.Tensor, stage: str, step: int):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{stage}: loss became {float(loss)} at step {step}")


def _batches(n: int, batch: int, steps: int, gen: torch.Generator):
    for _ in range(steps):
        yield torch.randint(0, n, (min(batch, n),), generator=gen)


def train_stage1(windows, cfg: Config, region: str = "", seed: int | None = None,
                 log: LogFn | None = None, epoch_steps: int = 20) -> tuple[StreamAutoencoder, list[float]]:
    """Fit the autoencoder on normalised windows ``[n, T_w, dim]``."""
    x = torch.as_tensor(check_windows(windows))
    seed = cfg.seed if seed is None else seed
    with seeded_init(seed):
        ae = StreamAutoencoder(x.shape[-1], cfg.svq_channels, cfg.latent_dim, cfg.res_blocks, region).to(DTYPE)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed + 1)
    curve, acc = [], []
    for step, idx in enumerate(_batches(len(x), cfg.svq_batch, cfg.svq1_steps, gen)):
        loss = ae_loss(ae, x[idx], cfg.lambda_ae)
        _check_finite(loss, "svq1", step)
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            opt.step()
        acc.append(loss.item())
        if len(acc) == epoch_steps:
            curve.append(float(np.mean(acc)))
            acc = []
            if log:
                log(stage="svq1", step=step + 1, region=region, loss=curve[-1])
    if acc:
        curve.append(float(np.mean(acc)))
        if log:
            log(stage="svq1", step=cfg.svq1_steps, region=region, loss=curve[-1])
    ae.freeze()
    return ae, curve


def train_stage2(windows, ae: StreamAutoencoder, cfg: Config, seed: int | None = None,
                 log: LogFn | None = None, epoch_steps: int = 20) -> tuple[CodeStage, list[float]]:
    """Fit pre-projection, EMA codebook and head with the autoencoder frozen."""
    x = torch.as_tensor(check_windows(windows))
    seed = cfg.seed if seed is None else seed
    before = fingerprint(ae)
    if ae._fp is None:
        ae.freeze()
    with seeded_init(seed + 2):
        cs = CodeStage(cfg.latent_dim, cfg.code_dim, cfg.n_codes, cfg.ema_decay, cfg.ema_eps).to(DTYPE)
    gen = torch.Generator().manual_seed(seed + 3)
    with torch.no_grad():
        first = x[torch.randint(0, len(x), (min(len(x), max(cfg.svq_batch, cfg.n_codes)),), generator=gen)]
        cs.codebook.seed_from(cs.pre(ae.encode(first)).reshape(-1, cfg.code_dim), gen)
    opt = torch.optim.Adam(cs.parameters(), lr=cfg.lr)
    curve, acc = [], []
    for step, idx in enumerate(_batches(len(x), cfg.svq_batch, cfg.svq2_steps, gen)):
        loss, parts = stage2_loss(ae, cs, x[idx], cfg.lambda_rec, cfg.lambda_cb, return_parts=True)
        _check_finite(loss, "svq2", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        z = parts["z"]
        ema_update(cs.codebook, parts["tokens"], z)
        n_reset = 0
        if cfg.reset_every and (step + 1) % cfg.reset_every == 0:
            n_reset = reset_dead_codes(cs.codebook, z, cfg.usage_floor, gen)
        acc.append(parts["rec"])
        if len(acc) == epoch_steps:
            curve.append(float(np.mean(acc)))
            acc = []
            if log:
                log(stage="svq2", step=step + 1, region=ae.region, loss=curve[-1],
                    commit=parts["commit"], utilization=cs.codebook.utilization(cfg.usage_floor),
                    resets=n_reset)
    if acc:
        curve.append(float(np.mean(acc)))
        if log:
            log(stage="svq2", step=cfg.svq2_steps, region=ae.region, loss=curve[-1],
                commit=parts["commit"], utilization=cs.codebook.utilization(cfg.usage_floor), resets=0)
    if fingerprint(ae) != before:
        raise FrozenMutationError("autoencoder weights changed during stage 2")
    cs.freeze()
    return cs, curve


# ---------------------------------------------------------------------------
# tokenizer wrapper
# ---------------------------------------------------------------------------

class RegionTokenizer:
    """Frozen autoencoder + code stage for one region."""

    def __init__(self, ae: StreamAutoencoder, cs: CodeStage, window: int = 16):
        self.ae, self.cs, self.window = ae, cs, window

    @property
    def n_codes(self) -> int:
        return self.cs.codebook.n_codes

    @property
    def code_dim(self) -> int:
        return self.cs.codebook.codes.shape[1]

    def fingerprint(self) -> str:
        return fingerprint({**{f"ae.{k}": v for k, v in self.ae.state_dict().items()},
                            **{f"cs.{k}": v for k, v in self.cs.state_dict().items()}})

    @torch.no_grad()
    def tokenize(self, poses: np.ndarray) -> np.ndarray:
        """Normalised poses ``[T_f, dim]`` -> tokens ``[T_f // 4]``.

        The sequence is tiled into encoder windows; a short tail window is
        encoded on its own.
        """
        x = torch.as_tensor(np.asarray(poses, dtype=np.float64))
        T = (x.shape[0] // DOWNSAMPLE) * DOWNSAMPLE
        out = []
        for s in range(0, T, self.window):
            seg = x[s:min(s + self.window, T)][None]
            out.append(self.cs.quantize(self.ae.encode(seg))[0][0])
        return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)

    @torch.no_grad()
    def decode(self, tokens: np.ndarray, state: DecoderState | None = None):
        z = self.cs.embed(torch.as_tensor(np.asarray(tokens, dtype=np.int64)))[None]
        y, state = self.ae.decode_causal(z, state)
        return y[0].numpy(), state

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}ae.{k}": v.numpy() for k, v in self.ae.state_dict().items()}
        out.update({f"{prefix}cs.{k}": v.numpy() for k, v in self.cs.state_dict().items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str, dim: int, cfg: Config, region: str = "") -> "RegionTokenizer":
        ae = StreamAutoencoder(dim, cfg.svq_channels, cfg.latent_dim, cfg.res_blocks, region).to(DTYPE)
        cs = CodeStage(cfg.latent_dim, cfg.code_dim, cfg.n_codes, cfg.ema_decay, cfg.ema_eps).to(DTYPE)
        _load(ae, arrays, f"{prefix}ae.")
        _load(cs, arrays, f"{prefix}cs.")
        return cls(ae.freeze(), cs.freeze(), cfg.window_frames)


def _load(module: nn.Module, arrays: dict, prefix: str) -> None:
    sd = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(sd)
    if missing:
        raise StateMismatchError(f"checkpoint lacks {sorted(missing)[:3]}")
    module.load_state_dict(sd)


class SVQTokenizer(TransformerMixin, BaseEstimator):
    """scikit-learn facade over the two-stage tokenizer for one region.

    ``fit`` takes normalised windows ``[n, T_w, dim]``; ``transform`` maps a
    pose sequence ``[T_f, dim]`` to tokens and ``inverse_transform`` decodes
    tokens causally back to poses.
    """

    def __init__(self, config: Config | None = None, seed: int = 0):
        self.config = config
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self.config or Config.desk()
        X = check_windows(X)
        ae, self.stage1_curve_ = train_stage1(X, cfg, seed=self.seed)
        cs, self.stage2_curve_ = train_stage2(X, ae, cfg, seed=self.seed)
        self.tokenizer_ = RegionTokenizer(ae, cs, cfg.window_frames)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_fitted(self, "tokenizer_")
        return self.tokenizer_.tokenize(check_poses(X, self.n_features_in_))

    def inverse_transform(self, X):
        check_fitted(self, "tokenizer_")
        return self.tokenizer_.decode(np.asarray(X, dtype=np.int64).reshape(-1))[0]

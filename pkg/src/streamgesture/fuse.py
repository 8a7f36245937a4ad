"""Fusion over frozen region experts.

Per-region residual adapters align the expert hidden states, masked
(region, step) slots are swapped for a learned mask vector, and a stack of
blocks mixes information across regions (spatial attention within one
step), across time (causal windowed attention per region, shared weights)
and from the audio stream (causal cross-attention). Region classifiers start
as copies of the expert classifiers; every output projection starts at zero,
so an untrained fusion model reproduces the experts' logits exactly.

Also hosts the masking schedule, guidance and sampling algebra.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .config import REGIONS, Config
from .errors import ConfigError, NumericError, ShapeError, StateMismatchError, TrainingDivergedError
from .nncore import DTYPE, AttnLayer, Frozen, KVCache, band_mask, fingerprint, softmax_cross_entropy
from .xar import TokenCorpus, crop_window, layer_window

N_REGIONS = len(REGIONS)


class PilorAdapter(nn.Module):
    """``h~ = h + W h`` with ``W`` zero-initialised."""

    def __init__(self, d: int):
        super().__init__()
        self.W = nn.Linear(d, d, bias=False)
        nn.init.zeros_(self.W.weight)

    def forward(self, h):
        return h + self.W(h)


def pilor_adapt(adapters, h: torch.Tensor) -> torch.Tensor:
    """Apply adapter r to ``h[..., r, :]`` for each region."""
    if h.shape[-2] != len(adapters):
        raise ShapeError(f"expected {len(adapters)} region slots, got {h.shape[-2]}")
    return torch.stack([a(h[..., r, :]) for r, a in enumerate(adapters)], dim=-2)


@dataclass
class FuseState:
    model_fp: str
    caches: list
    pos: int = 0


class FusionModel(Frozen, nn.Module):
    def __init__(self, classifiers: list[nn.Linear], d_audio: int, d_model: int = 256, n_heads: int = 4,
                 ffn_mult: int = 2, n_blocks: int = 3, order=("spatial", "temporal", "cross"),
                 history: int = 32, n_symbols: int = 8):
        super().__init__()
        if len(classifiers) != N_REGIONS:
            raise ShapeError("need one classifier per region")
        self.order = tuple(order)
        self.window = layer_window(history, n_blocks)
        self.adapters = nn.ModuleList(PilorAdapter(d_model) for _ in range(N_REGIONS))
        self.region_emb = nn.Parameter(torch.zeros(N_REGIONS, d_model))
        self.mask_emb = nn.Parameter(0.02 * torch.randn(d_model))
        self.audio_proj = nn.Linear(d_audio, d_model)
        self.sym_emb = nn.Embedding(n_symbols + 1, d_model)
        self.null = nn.Parameter(0.02 * torch.randn(d_model))
        self.cond_norm = nn.LayerNorm(d_model)
        self.blocks = nn.ModuleList(
            nn.ModuleDict({
                "spatial": AttnLayer(d_model, n_heads, ffn_mult, rotary=False, zero_out=True),
                "temporal": AttnLayer(d_model, n_heads, ffn_mult, zero_out=True),
                "cross": AttnLayer(d_model, n_heads, ffn_mult, zero_out=True),
            }) for _ in range(n_blocks))
        self.classifiers = nn.ModuleList()
        for c in classifiers:
            lin = nn.Linear(c.in_features, c.out_features)
            lin.load_state_dict(c.state_dict())
            self.classifiers.append(lin)
        self.n_codes = classifiers[0].out_features

    @classmethod
    def from_config(cls, classifiers, cfg: Config) -> "FusionModel":
        return cls(classifiers, cfg.d_audio, cfg.d_model, cfg.n_heads, cfg.ffn_mult, cfg.fuse_blocks,
                   cfg.fuse_layer_order, cfg.history, cfg.n_symbols)

    # -- pieces -------------------------------------------------------
    def conditioning(self, audio, symbols=None, drop=None):
        c = self.audio_proj(audio)
        if symbols is not None:
            c = c + self.sym_emb(symbols.long())
        if drop is not None:
            c = torch.where(drop.reshape(-1, *([1] * (c.dim() - 1))), self.null.expand_as(c), c)
        return self.cond_norm(c)

    def prepare(self, h: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Adapt ``[..., R, D]`` expert states, add region identity, apply the mask."""
        x = pilor_adapt(self.adapters, h) + self.region_emb
        if mask is not None:
            x = torch.where(mask[..., None], self.mask_emb.expand_as(x), x)
        return x

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        """``[..., R, D]`` -> ``[..., R, K]`` with each region's own classifier."""
        return torch.stack([c(x[..., r, :]) for r, c in enumerate(self.classifiers)], dim=-2)

    def local_logits(self, h: torch.Tensor) -> torch.Tensor:
        """Classifier logits on the raw expert states (the local objective)."""
        return self.classify(h)

    # -- full-sequence path ------------------------------------------
    def forward(self, h: torch.Tensor, audio: torch.Tensor, symbols=None, drop=None, mask=None,
                skip: tuple = ()) -> torch.Tensor:
        """Expert states ``[B, T, R, D]`` + audio ``[B, T, d_audio]`` -> logits ``[B, T, R, K]``."""
        B, T, R, D = h.shape
        if R != N_REGIONS:
            raise ShapeError(f"expected {N_REGIONS} region slots, got {R}")
        x = self.prepare(h, mask)
        cond = self.conditioning(audio, symbols, drop)  # [B, T, D]
        cond_r = cond[:, None].expand(B, R, T, D).reshape(B * R, T, D)
        tmask = band_mask(T, T, self.window)
        pos = torch.arange(T)
        for blk in self.blocks:
            for kind in self.order:
                if kind in skip:
                    continue
                layer = blk[kind]
                if kind == "spatial":
                    x = layer(x.reshape(B * T, R, D)).reshape(B, T, R, D)
                else:
                    xt = x.transpose(1, 2).reshape(B * R, T, D)
                    ctx = cond_r if kind == "cross" else None
                    xt = layer(xt, ctx, tmask, pos, pos)
                    x = xt.reshape(B, R, T, D).transpose(1, 2)
        return self.classify(x)

    # -- incremental path --------------------------------------------
    def open(self) -> FuseState:
        caches = [KVCache(self.window) for _ in self.blocks for k in self.order if k != "spatial"]
        return FuseState(self.fingerprint(), caches, 0)

    def step(self, state: FuseState, h_t: torch.Tensor, audio_t: torch.Tensor, symbol_t=None,
             drop=None, mask_t=None):
        """One step: states ``[B, R, D]``, audio ``[B, d_audio]`` -> logits ``[B, R, K]``."""
        if state.model_fp != self.fingerprint():
            raise StateMismatchError("fusion state belongs to a different model")
        B, R, D = h_t.shape
        if R != N_REGIONS:
            raise ShapeError(f"expected {N_REGIONS} region slots, got {R}")
        x = self.prepare(h_t, mask_t)  # [B, R, D]
        cond = self.conditioning(audio_t, symbol_t, drop)  # [B, D]
        cond_r = cond[:, None].expand(B, R, D).reshape(B * R, 1, D)
        caches = iter(state.caches)
        for blk in self.blocks:
            for kind in self.order:
                layer = blk[kind]
                if kind == "spatial":
                    x = layer(x)
                else:
                    xt = x.reshape(B * R, 1, D)
                    xt = layer.step(xt, next(caches), state.pos, cond_r if kind == "cross" else None)
                    x = xt.reshape(B, R, D)
        state.pos += 1
        return self.classify(x), state


# ---------------------------------------------------------------------------
# masking schedule and mask plans
# ---------------------------------------------------------------------------

def cosine_schedule(s: float, S: float, lam_max: float) -> float:
    """Masking-ratio ramp ``lam_max * (1 - cos(pi s / S)) / 2``."""
    if S <= 0:
        raise ConfigError("total steps must be positive")
    if not 0 <= s <= S:
        raise ConfigError(f"step {s} outside [0, {S}]")
    if s == 0:
        return 0.0
    if s == S:
        return float(lam_max)
    return lam_max * (1.0 - math.cos(math.pi * s / S)) / 2.0


def ugm_mask(confidences: np.ndarray, ratio: float, M_max: int) -> np.ndarray:
    """Mask the ``floor(ratio * M_max)`` least-confident (region, step) positions.

    ``confidences`` is ``[R, T]``; ties go to the lower flat (region, step) index.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("masking ratio must lie in [0, 1]")
    m_eff = int(math.floor(ratio * M_max))
    if m_eff > conf.size:
        warnings.warn(f"M_eff={m_eff} exceeds {conf.size} positions; clamping", RuntimeWarning)
        m_eff = conf.size
    mask = np.zeros(conf.size, dtype=bool)
    mask[np.argsort(conf.reshape(-1), kind="stable")[:m_eff]] = True
    return mask.reshape(conf.shape)


def region_mask(rng: np.random.Generator, p_max: float = 0.2) -> int | None:
    """With probability ``p ~ U(0, p_max)`` pick one region to mask entirely."""
    p = rng.uniform(0.0, p_max) if p_max > 0 else 0.0
    if rng.random() < p:
        return int(rng.integers(N_REGIONS))
    return None


def fuse_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None,
              scope: str = "masked") -> torch.Tensor:
    """Mean NLL over masked (region, step) positions (``scope='all'``: every position)."""
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_t = targets.reshape(-1)
    if scope == "all" or mask is None:
        return softmax_cross_entropy(flat_logits, flat_t)
    w = mask.reshape(-1).to(flat_logits.dtype)
    if float(w.sum()) == 0.0:
        warnings.warn("empty mask: fusion loss is 0", RuntimeWarning)
    return softmax_cross_entropy(flat_logits, flat_t, w)


def combined_loss(l_local, l_fuse, lambda_local: float = 0.3, lambda_fuse: float = 1.0):
    if lambda_local < 0 or lambda_fuse < 0:
        raise ConfigError("loss weights must be non-negative")
    return lambda_local * l_local + lambda_fuse * l_fuse


# ---------------------------------------------------------------------------
# guidance and sampling
# ---------------------------------------------------------------------------

def cfg_combine(l_uncond, l_cond, gamma: float):
    """``l_uncond + gamma * (l_cond - l_uncond)``; gamma == 1 returns ``l_cond`` exactly."""
    if tuple(l_uncond.shape) != tuple(l_cond.shape):
        raise ShapeError("conditional and unconditional logits differ in shape")
    if gamma < 1.0:
        warnings.warn(f"guidance scale {gamma} < 1", RuntimeWarning)
    if gamma == 1.0:
        return l_cond.clone() if hasattr(l_cond, "clone") else np.array(l_cond, copy=True)
    return l_uncond + gamma * (l_cond - l_uncond)


def sample_token(logits, rng: np.random.Generator, temperature: float = 1.0) -> int:
    """Inverse-CDF categorical draw from ``softmax(logits / temperature)``."""
    z = np.asarray(logits.detach().numpy() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits")
    z = z / temperature
    p = np.exp(z - z.max())
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(c) - 1))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FuseData:
    """Frozen-expert outputs for a corpus, conditional and null-conditioned."""

    h_cond: torch.Tensor    # [N, T, R, D]
    h_uncond: torch.Tensor  # [N, T, R, D]
    audio: torch.Tensor     # [N, T, d_audio]
    symbols: torch.Tensor   # [N, T]
    targets: torch.Tensor   # [N, T, R]

    @property
    def n(self) -> int:
        return self.audio.shape[0]


@torch.no_grad()
def expert_states(corpus: TokenCorpus, experts: dict, audio_encoder) -> FuseData:
    audio = audio_encoder(corpus.mels)
    hc, hu = [], []
    for r in REGIONS:
        m = experts[r]
        N = corpus.n
        hc.append(m(corpus.tokens[r], audio, corpus.symbols, torch.zeros(N, dtype=torch.bool))[1])
        hu.append(m(corpus.tokens[r], audio, corpus.symbols, torch.ones(N, dtype=torch.bool))[1])
    targets = torch.stack([corpus.tokens[r] for r in REGIONS], dim=-1)
    return FuseData(torch.stack(hc, 2), torch.stack(hu, 2), audio, corpus.symbols, targets)


def train_fuse(data: FuseData, model: FusionModel, cfg: Config, seed: int | None = None,
               log: Callable | None = None, heldout: FuseData | None = None, eval_every: int = 50,
               loss_scope: str = "all") -> list[float]:
    """Hybrid UGM + region masking, CFG dropout, ``L_AR = l_local L_local + l_fuse L_fuse``."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed + 21)
    gen = torch.Generator().manual_seed(seed + 22)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    S = cfg.fuse_steps
    curve = []
    for step in range(S):
        idx = torch.randint(0, data.n, (min(cfg.ar_batch, data.n),), generator=gen)
        B = len(idx)
        drop = torch.as_tensor(rng.random(B) < cfg.p_cf)
        c0, L, _ = crop_window(data.targets.shape[1], cfg.ar_crop, gen, 0)
        sl = slice(c0, c0 + L)
        h = torch.where(drop[:, None, None, None], data.h_uncond[idx, sl], data.h_cond[idx, sl])
        audio, sym, tgt = data.audio[idx, sl], data.symbols[idx, sl], data.targets[idx, sl]
        T = tgt.shape[1]
        lam = cosine_schedule(step, S, cfg.ugm_lambda_max)
        with torch.no_grad():
            probs = torch.softmax(model(h, audio, sym, drop), -1).gather(-1, tgt[..., None])[..., 0]
        masks, n_rm = [], 0
        for b in range(B):
            ratio = rng.uniform(0.0, lam) if lam > 0 else 0.0
            m = ugm_mask(probs[b].T.numpy(), ratio, N_REGIONS * T).T  # [T, R]
            dropped = region_mask(rng, cfg.rm_p_max)
            if dropped is not None:
                m[:, dropped] = True
                n_rm += 1
            masks.append(torch.as_tensor(m))
        mask = torch.stack(masks)
        logits = model(h, audio, sym, drop, mask)
        l_fuse = fuse_loss(logits, tgt, mask, loss_scope)
        l_local = softmax_cross_entropy(model.local_logits(h).reshape(-1, model.n_codes), tgt.reshape(-1))
        loss = combined_loss(l_local, l_fuse, cfg.lambda_local, cfg.lambda_fuse)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"fusion training: loss {float(loss)} at step {step}")
        opt.zero_grad()
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0))
        opt.step()
        curve.append(loss.item())
        if log and ((step + 1) % eval_every == 0 or step == 0 or step + 1 == S):
            rec = {"stage": "fuse", "step": step, "loss": curve[-1], "l_local": l_local.item(),
                   "l_fuse": l_fuse.item(), "lambda_ugr": lam, "masked": int(mask.sum()),
                   "region_masked": n_rm, "lr": cfg.lr, "grad_norm": gnorm}
            if heldout is not None:
                rec["heldout_masked_nll"] = fuse_nll(heldout, model, seed=seed)
            log(**rec)
    return curve


@torch.no_grad()
def fuse_nll(data: FuseData, model: FusionModel, ratio: float = 0.3, region: int | None = None,
             seed: int = 0) -> float:
    """Held-out masked-token NLL under a fixed evaluation mask.

    With ``region`` set, that region is masked at every step and the NLL is
    measured on it alone; otherwise a seeded uniform ``ratio`` fraction of
    positions is masked.
    """
    drop = torch.zeros(data.n, dtype=torch.bool)
    if region is not None:
        mask = torch.zeros(data.targets.shape, dtype=torch.bool)
        mask[..., region] = True
    else:
        rng = np.random.default_rng(seed)
        mask = torch.as_tensor(rng.random(tuple(data.targets.shape)) < ratio)
    logits = model(data.h_cond, data.audio, data.symbols, drop, mask)
    return float(fuse_loss(logits, data.targets, mask))


@torch.no_grad()
def fuse_next_nll(data: FuseData, model: FusionModel) -> dict[str, float]:
    """Held-out next-token NLL per region with nothing masked."""
    drop = torch.zeros(data.n, dtype=torch.bool)
    logits = model(data.h_cond, data.audio, data.symbols, drop)
    return {r: float(softmax_cross_entropy(logits[..., i, :].reshape(-1, model.n_codes),
                                           data.targets[..., i].reshape(-1)))
            for i, r in enumerate(REGIONS)}


def fusion_fingerprint(model: FusionModel) -> str:
    return fingerprint(model)

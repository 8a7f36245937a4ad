"""Region experts: causal next-token transformers over one region's tokens.

Slot t of the motion stream holds the embedding of token ``x_{t-1}`` (slot 0
holds a learned begin-of-stream vector) and predicts ``x_t``. Each block runs
cross-attention from the motion stream into the conditioning stream (audio
token plus optional symbol, aligned so slot t sees conditioning <= t), then
causal self-attention over the motion stream.

Every attention layer uses a sliding window sized so that the stacked
self-attention layers reach exactly ``history`` past tokens: anything older
cannot influence the output, and per-layer KV caches stay tiny and exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .errors import ConfigError, DataError, StateMismatchError, TrainingDivergedError
from .nncore import (DTYPE, AttnLayer, Frozen, KVCache, MLP, band_mask, fingerprint,
                     seeded_init, softmax_cross_entropy)


def layer_window(history: int, n_layers: int) -> int:
    """Per-layer attention window so ``n_layers`` stacked layers reach ``history`` tokens."""
    if history < 1 or n_layers < 1:
        raise ConfigError("history and layer count must be positive")
    return 1 + (history - 1) // n_layers


@dataclass
class ExpertState:
    model_fp: str
    caches: list
    pos: int = 0

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, c in enumerate(self.caches):
            for k, v in c.tensors().items():
                out[f"{i}.{k}"] = v
        return out


class ExpertModel(Frozen, nn.Module):
    def __init__(self, codes: torch.Tensor, d_audio: int, d_model: int = 256, n_heads: int = 4,
                 ffn_mult: int = 2, n_blocks: int = 2, n_cross: int = 3, n_self: int = 3,
                 history: int = 32, n_symbols: int = 8, region: str = ""):
        super().__init__()
        self.region = region
        self.history = history
        self.window = layer_window(history, n_blocks * n_self)
        self.n_codes, d_code = codes.shape
        self.register_buffer("codes", codes.detach().clone().to(DTYPE))
        self.tok_mlp = MLP(d_code, 2 * d_model, d_model)
        self.bos = nn.Parameter(0.02 * torch.randn(d_model))
        self.audio_proj = nn.Linear(d_audio, d_model)
        self.sym_emb = nn.Embedding(n_symbols + 1, d_model)
        self.null = nn.Parameter(0.02 * torch.randn(d_model))
        self.cond_norm = nn.LayerNorm(d_model)
        self.blocks = nn.ModuleList()
        for _ in range(n_blocks):
            self.blocks.append(nn.ModuleDict({
                "cross": nn.ModuleList(AttnLayer(d_model, n_heads, ffn_mult) for _ in range(n_cross)),
                "self": nn.ModuleList(AttnLayer(d_model, n_heads, ffn_mult) for _ in range(n_self)),
            }))
        self.norm = nn.LayerNorm(d_model)
        self.classifier = nn.Linear(d_model, self.n_codes)

    @classmethod
    def from_config(cls, codes: torch.Tensor, cfg: Config, region: str = "") -> "ExpertModel":
        return cls(codes, cfg.d_audio, cfg.d_model, cfg.n_heads, cfg.ffn_mult, cfg.xar_blocks,
                   cfg.xar_cross_layers, cfg.xar_self_layers, cfg.history, cfg.n_symbols, region)

    def layers(self):
        for blk in self.blocks:
            for layer in blk["cross"]:
                yield "cross", layer
            for layer in blk["self"]:
                yield "self", layer

    # -- embeddings ---------------------------------------------------
    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and (int(tokens.max()) >= self.n_codes or int(tokens.min()) < 0):
            raise DataError(f"token index outside [0, {self.n_codes})")
        return self.tok_mlp(self.codes[tokens.long()])

    def history_slots(self, tokens: torch.Tensor, prev: torch.Tensor | None = None) -> torch.Tensor:
        """``[B, T]`` tokens -> ``[B, T, D]`` slots (BOS, x_0 .. x_{T-2}).

        ``prev`` (``[B]``) replaces BOS with the token preceding a mid-session crop.
        """
        B = tokens.shape[0]
        first = self.bos.expand(B, 1, -1) if prev is None else self.embed_tokens(prev.reshape(B, 1))
        return torch.cat([first, self.embed_tokens(tokens[:, :-1])], dim=1)

    def conditioning(self, audio: torch.Tensor, symbols: torch.Tensor | None = None,
                     drop: torch.Tensor | None = None) -> torch.Tensor:
        """Audio tokens ``[B, T, d_audio]`` (+ symbol ids) -> ``[B, T, D]``.

        Rows flagged in ``drop`` use the learned null vector at every step.
        """
        c = self.audio_proj(audio)
        if symbols is not None:
            c = c + self.sym_emb(symbols.long())
        if drop is not None:
            c = torch.where(drop.reshape(-1, 1, 1), self.null.expand_as(c), c)
        return self.cond_norm(c)

    # -- full-sequence path ------------------------------------------
    def run(self, slots: torch.Tensor, cond: torch.Tensor, offset: int = 0):
        """Slots and conditioning ``[B, T, D]`` -> (logits ``[B, T, K]``, h ``[B, T, D]``)."""
        T = slots.shape[1]
        mask = band_mask(T, T, self.window)
        pos = torch.arange(T) + offset
        x = slots
        for kind, layer in self.layers():
            x = layer(x, cond if kind == "cross" else None, mask, pos, pos)
        h = self.norm(x)
        return self.classifier(h), h

    def forward(self, tokens, audio, symbols=None, drop=None, noise: Callable | None = None,
                prev: torch.Tensor | None = None, offset: int = 0):
        """Teacher-forced logits predicting every token in ``tokens``."""
        slots = self.history_slots(tokens, prev)
        if noise is not None:
            slots = torch.cat([slots[:, :1], noise(slots[:, 1:])], dim=1)
        return self.run(slots, self.conditioning(audio, symbols, drop), offset)

    # -- incremental path --------------------------------------------
    def open(self) -> ExpertState:
        return ExpertState(self.fingerprint(), [KVCache(self.window) for _ in self.layers()], 0)

    def step(self, state: ExpertState, prev: torch.Tensor | None, audio_t: torch.Tensor,
             symbol_t: torch.Tensor | None = None, drop: torch.Tensor | None = None):
        """Advance one slot.

        ``prev`` is the previous token per batch row (None at t=0), ``audio_t``
        is ``[B, d_audio]``. Returns (logits ``[B, K]``, h ``[B, D]``, state).
        """
        if state.model_fp != self.fingerprint():
            raise StateMismatchError("expert state belongs to a different model")
        B = audio_t.shape[0]
        if state.pos == 0:
            if prev is not None:
                raise DataError("first step takes no previous token")
            x = self.bos.expand(B, 1, -1)
        else:
            x = self.embed_tokens(prev.reshape(B, 1))
        cond = self.conditioning(audio_t[:, None], None if symbol_t is None else symbol_t.reshape(B, 1), drop)
        for (kind, layer), cache in zip(self.layers(), state.caches):
            x = layer.step(x, cache, state.pos, cond if kind == "cross" else None)
        h = self.norm(x)[:, 0]
        state.pos += 1
        return self.classifier(h), h, state


# ---------------------------------------------------------------------------
# noise injection and losses
# ---------------------------------------------------------------------------

def sample_noise_p(batch: int, p_max: float, fixed: bool, gen: torch.Generator) -> torch.Tensor:
    if fixed:
        return torch.full((batch,), float(p_max), dtype=DTYPE)
    return torch.rand(batch, generator=gen, dtype=DTYPE) * p_max


def inject_noise(emb: torch.Tensor, p_seq, sigma: float, gen: torch.Generator) -> torch.Tensor:
    """Add N(0, sigma^2) to each history embedding with per-sequence probability."""
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    if sigma == 0:
        return emb
    p = torch.as_tensor(p_seq, dtype=emb.dtype).reshape(-1, *([1] * (emb.dim() - 1)))
    hit = torch.rand(emb.shape[:-1] + (1,), generator=gen, dtype=emb.dtype) < p
    return emb + hit * sigma * torch.randn(emb.shape, generator=gen, dtype=emb.dtype)


def expert_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood."""
    return softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


# ---------------------------------------------------------------------------
# corpus tensors shared by expert and fusion training
# ---------------------------------------------------------------------------

@dataclass
class TokenCorpus:
    """Per-session token, mel and symbol tensors of equal length."""

    tokens: dict[str, torch.Tensor]  # region -> [N, T]
    mels: torch.Tensor               # [N, 16 T, n_mels]
    symbols: torch.Tensor            # [N, T]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.mels.shape[0]

    @property
    def T(self) -> int:
        return self.symbols.shape[1]

    def subset(self, idx) -> "TokenCorpus":
        return TokenCorpus({r: t[idx] for r, t in self.tokens.items()}, self.mels[idx],
                           self.symbols[idx], self.meta)


AUDIO_WARMUP = 2  # tokens of extra mel context so the causal convs see real history at a crop start


def crop_window(T: int, crop: int, gen: torch.Generator, warmup: int = AUDIO_WARMUP):
    """Random training crop ``[s, s + L)`` and the audio warm-up available before it."""
    if not crop or crop >= T:
        return 0, T, 0
    s = int(torch.randint(0, T - crop + 1, (1,), generator=gen))
    return s, crop, min(s, warmup)


def train_experts(corpus: TokenCorpus, experts: dict[str, ExpertModel], audio_encoder, cfg: Config,
                  seed: int | None = None, log: Callable | None = None,
                  heldout: TokenCorpus | None = None, eval_every: int = 50) -> list[float]:
    """Joint training of all region experts and the shared audio encoder."""
    seed = cfg.seed if seed is None else seed
    params = list(audio_encoder.parameters())
    for e in experts.values():
        params += [p for p in e.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed + 11)
    curve = []
    for step in range(cfg.expert_steps):
        idx = torch.randint(0, corpus.n, (min(cfg.ar_batch, corpus.n),), generator=gen)
        batch = corpus.subset(idx)
        B = len(idx)
        s, L, warm = crop_window(corpus.T, cfg.ar_crop, gen)
        g = audio_encoder.group
        audio = audio_encoder(batch.mels[:, (s - warm) * g:(s + L) * g])[:, warm:]
        prev = None if s == 0 else {r: t[:, s - 1] for r, t in batch.tokens.items()}
        batch = TokenCorpus({r: t[:, s:s + L] for r, t in batch.tokens.items()}, batch.mels,
                            batch.symbols[:, s:s + L])
        drop = torch.rand(B, generator=gen) < cfg.p_cf
        p_seq = sample_noise_p(B, cfg.noise_p_max, cfg.noise_p_fixed, gen)
        noise = lambda e: inject_noise(e, p_seq, cfg.noise_sigma, gen)  # noqa: E731
        losses = {}
        for r, model in experts.items():
            logits, _ = model(batch.tokens[r], audio, batch.symbols, drop, noise,
                              None if prev is None else prev[r], s)
            losses[r] = expert_loss(logits, batch.tokens[r])
        loss = sum(losses.values()) / len(losses)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"expert training: loss {float(loss)} at step {step}")
        opt.zero_grad()
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(params, 1.0))
        opt.step()
        curve.append(loss.item())
        if log and ((step + 1) % eval_every == 0 or step + 1 == cfg.expert_steps):
            rec = {"stage": "expert", "step": step + 1, "loss": curve[-1], "lr": cfg.lr, "grad_norm": gnorm}
            rec.update({f"loss_{r}": v.item() for r, v in losses.items()})
            if heldout is not None:
                rec.update({f"heldout_{r}": v for r, v in expert_nll(heldout, experts, audio_encoder).items()})
            log(**rec)
    return curve


@torch.no_grad()
def expert_nll(corpus: TokenCorpus, experts: dict[str, ExpertModel], audio_encoder,
               drop_conditioning: bool = False) -> dict[str, float]:
    audio = audio_encoder(corpus.mels)
    drop = torch.full((corpus.n,), drop_conditioning)
    out = {}
    for r, model in experts.items():
        logits, _ = model(corpus.tokens[r], audio, corpus.symbols, drop)
        out[r] = float(expert_loss(logits, corpus.tokens[r]))
    return out


def build_experts(codebooks: dict[str, torch.Tensor], cfg: Config, seed: int) -> dict[str, ExpertModel]:
    experts = {}
    for i, (r, codes) in enumerate(codebooks.items()):
        with seeded_init(seed + 100 + i):
            experts[r] = ExpertModel.from_config(codes, cfg, r).to(DTYPE)
    return experts


def expert_fingerprints(experts: dict[str, ExpertModel]) -> dict[str, str]:
    return {r: fingerprint(m) for r, m in experts.items()}

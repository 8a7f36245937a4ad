"""Untrained bundles and a look-ahead mock, for tests and probe calibration."""

from __future__ import annotations

import numpy as np
import torch

from .audioenc import AudioEncoder
from .bundle import Bundle, _scaler_from
from .config import REGIONS, Config
from .fuse import FusionModel
from .nncore import DTYPE, seeded_init
from .svq import CodeStage, RegionTokenizer, StreamAutoencoder
from .xar import build_experts


def random_bundle(cfg: Config | None = None, seed: int = 0) -> Bundle:
    """A consistent bundle of freshly initialised (untrained) components.

    Fusion output projections start at zero, so the fusion model would echo
    the experts exactly; they are perturbed here so every code path matters.
    """
    cfg = cfg or Config.desk()
    dims = cfg.region_dims
    scalers, toks = {}, {}
    for i, r in enumerate(REGIONS):
        with seeded_init(seed + i):
            ae = StreamAutoencoder(dims[r], cfg.svq_channels, cfg.latent_dim, cfg.res_blocks, r).to(DTYPE)
            cs = CodeStage(cfg.latent_dim, cfg.code_dim, cfg.n_codes, cfg.ema_decay, cfg.ema_eps).to(DTYPE)
            cs.codebook.codes.copy_(torch.randn(cfg.n_codes, cfg.code_dim, dtype=DTYPE))
        toks[r] = RegionTokenizer(ae.freeze(), cs.freeze(), cfg.window_frames)
        scalers[r] = _scaler_from(np.zeros(dims[r]), np.ones(dims[r]))
    with seeded_init(seed + 50):
        audio = AudioEncoder.from_config(cfg).to(DTYPE)
    experts = build_experts({r: toks[r].cs.codebook.codes for r in REGIONS}, cfg, seed)
    with seeded_init(seed + 300):
        fusion = FusionModel.from_config([experts[r].classifier for r in REGIONS], cfg).to(DTYPE)
        with torch.no_grad():
            for p in fusion.parameters():
                if not p.any():
                    p.normal_(0.0, 0.05)
    for m in experts.values():
        m.freeze()
    return Bundle(cfg, scalers, toks, audio.freeze(), experts, fusion.freeze())


def lookahead_generator(bundle: Bundle, seed: int = 0, chunks: int = 1):
    """A deliberately non-causal generator: chunk j is driven by audio from chunk j + ``chunks``.

    Same return contract as ``stream.streaming_generator`` so the causality
    probe can be pointed at it to confirm that it detects leakage.
    """
    from .stream import stream_generate

    shift = chunks * bundle.cfg.chunk_samples

    def gen(audio, until=None):
        x = np.asarray(audio, dtype=np.float64)
        future = np.concatenate([x[shift:], np.zeros(min(shift, len(x)))])
        poses, stamps, _ = stream_generate(bundle, future, seed, until=until)
        return poses, stamps

    return gen

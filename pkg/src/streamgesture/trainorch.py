"""Four-stage training curriculum.

svq1 -> svq2 (per region) -> experts (joint, with the audio encoder) ->
fusion. Each stage records the fingerprints of what it treats as frozen and
aborts if any of them move.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .audioenc import AudioEncoder, MelFrontEnd
from .bundle import Bundle
from .config import REGIONS, Config
from .errors import ConfigError, DataError, FrozenMutationError
from .fuse import FusionModel, combined_loss, expert_states, fuse_next_nll, fuse_nll, train_fuse
from .nncore import DTYPE, fingerprint, seeded_init
from .svq import RegionTokenizer, train_stage1, train_stage2
from .synthdata import RegionScaler, SynthSession, fit_scalers, gen_corpus, window
from .xar import TokenCorpus, build_experts, expert_nll, train_experts

__all__ = ["STAGES", "TrainPlan", "RunLog", "read_runlog", "split_sessions", "build_corpus",
           "run_plan", "combined_loss"]

STAGES = ("svq1", "svq2", "expert", "fuse")
WINDOW_STRIDE = 8


@dataclass
class TrainPlan:
    config: Config
    stages: tuple = STAGES
    eval_every: int = 50

    def __post_init__(self):
        if tuple(self.stages) != STAGES:
            raise ConfigError(f"stage order is fixed: {' -> '.join(STAGES)}")


class RunLog:
    """Append-only JSONL training log; steps must not go backwards within a stage."""

    def __init__(self, path=None, clock: Callable[[], float] = time.time):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.records: list[dict] = []
        self._last: dict[tuple, int] = {}
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, **rec) -> None:
        key = (rec.get("stage"), rec.get("region"))
        step = rec.get("step", 0)
        if step < self._last.get(key, -1):
            raise DataError(f"runlog step went backwards in {key}")
        self._last[key] = step
        rec["wall_time"] = self.clock()
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_runlog(path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"runlog line {i}: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise DataError(f"runlog line {i}: expected a JSON object")
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def split_sessions(sessions: list, n_heldout: int, seed: int) -> tuple[list, list]:
    if not 0 < n_heldout < len(sessions):
        raise ConfigError(f"cannot hold out {n_heldout} of {len(sessions)} sessions")
    order = np.random.default_rng(seed).permutation(len(sessions))
    held = set(order[:n_heldout].tolist())
    return ([s for i, s in enumerate(sessions) if i not in held],
            [s for i, s in enumerate(sessions) if i in held])


def region_windows(sessions: list[SynthSession], scaler: RegionScaler, region: str, T_w: int,
                   stride: int = WINDOW_STRIDE) -> np.ndarray:
    return np.stack([w[region] for s in sessions
                     for w in window({region: scaler.transform(s.poses[region])}, T_w, stride)])


def build_corpus(sessions: list[SynthSession], scalers: dict, tokenizers: dict, cfg: Config) -> TokenCorpus:
    """Token, mel and symbol tensors for whole sessions (trimmed to whole tokens)."""
    front = MelFrontEnd(cfg)
    fpt, mpt = cfg.frames_per_token, cfg.mels_per_token
    T = min(s.n_frames // fpt for s in sessions)
    if T < 1:
        raise DataError("sessions are shorter than one token")
    toks = {r: [] for r in REGIONS}
    mels, syms = [], []
    for s in sessions:
        for r in REGIONS:
            p = scalers[r].transform(s.poses[r][: T * fpt])
            toks[r].append(tokenizers[r].tokenize(p))
        frames, _ = front(s.waveform[: T * cfg.chunk_samples])
        if len(frames) < T * mpt:
            raise DataError(f"session {s.seed}: audio shorter than its motion")
        mels.append(frames[: T * mpt])
        syms.append(s.symbol_steps(T, cfg.chunk_ms / 1000.0))
    return TokenCorpus({r: torch.as_tensor(np.stack(v)) for r, v in toks.items()},
                       torch.as_tensor(np.stack(mels)), torch.as_tensor(np.stack(syms)),
                       {"seeds": [int(s.seed) for s in sessions]})


def _check_frozen(stage: str, before: dict, after: dict) -> None:
    for k, v in before.items():
        if after.get(k) != v:
            raise FrozenMutationError(f"{k} changed during the {stage} stage")


def _round(d: dict, nd: int = 10) -> dict:
    return {k: (round(v, nd) if isinstance(v, float) else v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def run_plan(plan: TrainPlan | Config, sessions: list[SynthSession] | None = None, out_dir=None,
             log: Callable | None = None) -> Bundle:
    """Run the whole curriculum and (optionally) write the bundle to ``out_dir``.

    Without ``sessions`` the plan's own synthetic corpus is generated.
    Returns the trained bundle; held-out metrics go into its manifest.
    """
    t_start = time.perf_counter()
    plan = plan if isinstance(plan, TrainPlan) else TrainPlan(plan)
    cfg = plan.config
    torch.manual_seed(cfg.seed)
    if log is None:
        log = RunLog(Path(out_dir) / "runlog.jsonl" if out_dir is not None else None)
    if sessions is None:
        sessions = gen_corpus(cfg, cfg.data_sessions, cfg.data_seed)
    train, held = split_sessions(sessions, cfg.data_heldout, cfg.data_seed)
    scalers = fit_scalers(train)
    metrics: dict = {"svq": {}, "expert": {}, "fuse": {}}

    # svq stages, one region at a time
    tokenizers = {}
    for i, r in enumerate(REGIONS):
        X = region_windows(train, scalers[r], r, cfg.window_frames)
        H = torch.as_tensor(region_windows(held, scalers[r], r, cfg.window_frames))
        ae, _ = train_stage1(X, cfg, r, seed=cfg.seed + 10 * i, log=log)
        ae_fp = fingerprint(ae)
        cs, _ = train_stage2(X, ae, cfg, seed=cfg.seed + 10 * i, log=log)
        _check_frozen("svq2", {f"svq1_{r}": ae_fp}, {f"svq1_{r}": fingerprint(ae)})
        with torch.no_grad():
            l1 = float((ae(H) - H).abs().mean())
            tok, _ = cs.quantize(ae.encode(H))
            l2 = float((ae.decode_causal(cs.embed(tok))[0] - H).abs().mean())
        used = len(torch.unique(tok)) / cfg.n_codes
        metrics["svq"][r] = _round({"stage1_l1": l1, "stage2_l1": l2, "ratio": l2 / l1,
                                    "utilization": cs.codebook.utilization(cfg.usage_floor),
                                    "heldout_code_usage": used})
        log(stage="svq_eval", step=0, region=r, **metrics["svq"][r])
        tokenizers[r] = RegionTokenizer(ae, cs, cfg.window_frames)

    # experts + audio encoder
    frozen = {f"svq_{r}": tokenizers[r].fingerprint() for r in REGIONS}
    corpus = build_corpus(train, scalers, tokenizers, cfg)
    held_corpus = build_corpus(held, scalers, tokenizers, cfg)
    with seeded_init(cfg.seed + 50):
        audio = AudioEncoder.from_config(cfg).to(DTYPE)
    audio.fit_normalizer(corpus.mels.reshape(-1, cfg.n_mels).numpy())
    experts = build_experts({r: tokenizers[r].cs.codebook.codes for r in REGIONS}, cfg, cfg.seed)
    train_experts(corpus, experts, audio, cfg, seed=cfg.seed, log=log, heldout=held_corpus,
                  eval_every=plan.eval_every)
    _check_frozen("expert", frozen, {f"svq_{r}": tokenizers[r].fingerprint() for r in REGIONS})
    audio.freeze()
    for m in experts.values():
        m.freeze()
    nll = expert_nll(held_corpus, experts, audio)
    uniform = math.log(cfg.n_codes)
    metrics["expert"] = _round({"uniform_nll": uniform, **{f"heldout_nll_{r}": v for r, v in nll.items()},
                                **{f"gain_{r}": uniform - v for r, v in nll.items()}})
    log(stage="expert_eval", step=0, **metrics["expert"])

    # fusion over frozen experts
    frozen.update({"audio": fingerprint(audio)})
    frozen.update({f"expert_{r}": fingerprint(experts[r]) for r in REGIONS})
    data = expert_states(corpus, experts, audio)
    held_data = expert_states(held_corpus, experts, audio)
    with seeded_init(cfg.seed + 300):
        fusion = FusionModel.from_config([experts[r].classifier for r in REGIONS], cfg).to(DTYPE)
    train_fuse(data, fusion, cfg, seed=cfg.seed, log=log, heldout=held_data, eval_every=plan.eval_every)
    fusion.freeze()
    now = {f"svq_{r}": tokenizers[r].fingerprint() for r in REGIONS}
    now["audio"] = fingerprint(audio)
    now.update({f"expert_{r}": fingerprint(experts[r]) for r in REGIONS})
    _check_frozen("fuse", frozen, now)
    fm = {"uniform_nll": uniform, "heldout_masked_nll": fuse_nll(held_data, fusion, seed=cfg.seed)}
    fm.update({f"heldout_nll_{r}": v for r, v in fuse_next_nll(held_data, fusion).items()})
    for i, r in enumerate(REGIONS):
        fm[f"region_masked_nll_{r}"] = fuse_nll(held_data, fusion, region=i)
    metrics["fuse"] = _round(fm)
    log(stage="fuse_eval", step=0, **metrics["fuse"])

    bundle = Bundle(cfg, scalers, tokenizers, audio, experts, fusion)
    extra = {"heldout_metrics": metrics, "data": {"train_seeds": corpus.meta["seeds"],
                                                  "heldout_seeds": held_corpus.meta["seeds"]},
             "train_seconds": round(time.perf_counter() - t_start, 3)}
    if out_dir is not None:
        bundle.save(out_dir, extra)
    else:
        bundle.manifest = extra
    return bundle

"""Flat, typed configuration shared by every stage.

Paper-scale values are the field defaults; ``Config.desk()`` shrinks the
dimensions so the whole curriculum trains on a laptop CPU in minutes.

The on-disk plan format is flat ``key = value`` text, one entry per line,
``#`` comments allowed. Values are coerced with the dataclass field types and
``schema_version`` must match. Environment variables named ``SG_<KEY>``
override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1
ENV_PREFIX = "SG_"

REGIONS = ("upper_body", "lower_body", "hands", "face")


@dataclass
class Config:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0

    # rates
    frame_rate: int = 20
    sample_rate: int = 16000
    chunk_ms: int = 200
    window_frames: int = 16

    # region parameterisation
    dim_upper_body: int = 78
    dim_lower_body: int = 61
    dim_hands: int = 180
    dim_face: int = 103

    # log-mel front end
    n_mels: int = 64
    win_ms: float = 25.0
    hop_ms: float = 12.5
    n_fft: int = 1024
    fmin: float = 0.0
    fmax: float = 8000.0

    # tokenizer
    svq_channels: int = 256
    latent_dim: int = 256
    code_dim: int = 128
    n_codes: int = 2048
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    res_blocks: int = 2
    usage_floor: float = 1.0
    reset_every: int = 50

    # audio encoder
    audio_channels: int = 96
    d_audio: int = 256
    audio_dilations: tuple = (1, 2, 4, 8)

    # region experts
    d_model: int = 256
    n_heads: int = 4
    ffn_mult: int = 2
    xar_blocks: int = 2
    xar_cross_layers: int = 3
    xar_self_layers: int = 3
    history: int = 32
    n_symbols: int = 8

    # fusion
    fuse_blocks: int = 3
    fuse_layer_order: tuple = ("spatial", "temporal", "cross")

    # objectives and sampling
    lr: float = 1e-4
    batch_size: int = 128
    lambda_ae: float = 1.0
    lambda_rec: float = 1.0
    lambda_cb: float = 0.2
    lambda_local: float = 0.3
    lambda_fuse: float = 1.0
    gamma: float = 1.25
    temperature: float = 1.0
    p_cf: float = 0.1
    noise_sigma: float = 0.1
    noise_p_max: float = 0.2
    noise_p_fixed: bool = False
    ugm_lambda_max: float = 0.5
    rm_p_max: float = 0.2

    # curriculum lengths (optimizer steps per stage)
    svq1_steps: int = 2000
    svq2_steps: int = 2000
    svq_batch: int = 128
    expert_steps: int = 2000
    fuse_steps: int = 2000
    ar_batch: int = 128
    ar_crop: int = 0  # tokens per training crop for experts and fusion; 0 = whole sessions

    # data used when a plan synthesises its own corpus
    data_sessions: int = 64
    data_heldout: int = 8
    data_duration: float = 24.0
    data_seed: int = 1000

    def __post_init__(self) -> None:
        self.audio_dilations = tuple(int(d) for d in self.audio_dilations)
        self.fuse_layer_order = tuple(str(s) for s in self.fuse_layer_order)
        self.validate()

    # -- derived quantities ------------------------------------------------
    @property
    def region_dims(self) -> dict[str, int]:
        return {r: getattr(self, f"dim_{r}") for r in REGIONS}

    @property
    def chunk_samples(self) -> int:
        return self.sample_rate * self.chunk_ms // 1000

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def frames_per_token(self) -> int:
        return self.frame_rate * self.chunk_ms // 1000

    @property
    def mels_per_token(self) -> int:
        return self.chunk_samples // self.hop_samples

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // self.frame_rate

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.frame_rate * self.chunk_ms != 4 * 1000:
            raise ConfigError("one chunk must hold exactly 4 motion frames (tokenizer downsamples by 4)")
        if self.window_frames % 4:
            raise ConfigError("window_frames must be divisible by 4")
        if self.hop_samples > self.win_samples:
            raise ConfigError("hop must not exceed the analysis window")
        if self.chunk_samples % self.hop_samples:
            raise ConfigError("chunk length must be a whole number of mel hops")
        if self.n_fft < self.win_samples:
            raise ConfigError("n_fft must cover the analysis window")
        if self.n_codes < 2:
            raise ConfigError("codebook needs at least 2 entries")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise ConfigError("d_model / n_heads must be an even integer (rotary pairs)")
        if sorted(self.fuse_layer_order) != ["cross", "spatial", "temporal"]:
            raise ConfigError("fuse_layer_order must be a permutation of spatial,temporal,cross")
        for r, d in self.region_dims.items():
            if d <= 0:
                raise ConfigError(f"region {r} needs a positive dim")
        if self.dim_lower_body < 7:
            raise ConfigError("lower body needs >= 7 channels (translation + 4 contacts)")

    # -- presets -----------------------------------------------------------
    @classmethod
    def paper(cls, **overrides) -> "Config":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "Config":
        base = dict(
            dim_upper_body=8, dim_lower_body=8, dim_hands=16, dim_face=6,
            svq_channels=32, latent_dim=16, code_dim=16, n_codes=64, res_blocks=1,
            audio_channels=32, d_audio=32,
            d_model=32, n_heads=4, ffn_mult=2,
            lr=2e-3, svq1_steps=500, svq2_steps=800, svq_batch=64,
            expert_steps=300, fuse_steps=250, ar_batch=16, ar_crop=48,
            data_sessions=256, data_heldout=16, data_duration=24.0,
        )
        base.update(overrides)
        return cls(**base)

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["audio_dilations"] = list(self.audio_dilations)
        d["fuse_layer_order"] = list(self.fuse_layer_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        lines = [f"# streamgesture plan, schema {SCHEMA_VERSION}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(type(default[0])(p) for p in parts) if default else tuple(parts)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from None


def parse_plan(text: str, base: Config | None = None, env: dict | None = None) -> Config:
    """Parse flat key-value plan text on top of ``base`` (desk preset by default)."""
    base = base or Config.desk()
    defaults = base.to_dict()
    proto = {f.name: getattr(base, f.name) for f in fields(base)}
    values = dict(defaults)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in proto:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, proto[key])
    env = os.environ if env is None else env
    for key in proto:
        envkey = ENV_PREFIX + key.upper()
        if envkey in env:
            values[key] = _coerce(key, env[envkey], proto[key])
    return Config.from_dict(values)


def load_plan(path: str | os.PathLike | None, base: Config | None = None) -> Config:
    if path is None:
        return parse_plan("", base)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_plan(p.read_text(), base)


__all__ = ["Config", "REGIONS", "SCHEMA_VERSION", "parse_plan", "load_plan"]

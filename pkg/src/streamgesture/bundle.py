"""A trained model bundle and its on-disk directory layout.

::

    bundle/
      manifest.json        config, per-component file hash, weight fingerprint
                           and the fingerprints of the frozen components it was
                           trained against; held-out metrics per stage
      svq_<region>.sgc     autoencoder + code stage + normaliser of one region
      audio.sgc            audio encoder (incl. mel normaliser)
      expert_<region>.sgc  region expert
      fuse.sgc             fusion model
      runlog.jsonl         training log (the only file with wall-clock times)

Every ``.sgc`` file is a named-array container (see ``container``). Loading
re-hashes every file and every weight set and checks all cross references.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .audioenc import AudioEncoder, MelFrontEnd
from .config import REGIONS, Config
from .errors import BundleError, LineageError
from .fuse import FusionModel
from .nncore import DTYPE, fingerprint
from .svq import RegionTokenizer, _load
from .synthdata import RegionScaler
from .xar import ExpertModel

MANIFEST = "manifest.json"


def _scaler_from(mean, scale) -> RegionScaler:
    s = RegionScaler()
    s.mean_, s.scale_ = np.asarray(mean), np.asarray(scale)
    s.n_features_in_ = len(s.mean_)
    return s


@dataclass
class Bundle:
    cfg: Config
    scalers: dict[str, RegionScaler]
    tokenizers: dict[str, RegionTokenizer]
    audio: AudioEncoder
    experts: dict[str, ExpertModel]
    fusion: FusionModel
    manifest: dict = field(default_factory=dict)

    @property
    def dims(self) -> dict[str, int]:
        return {r: self.tokenizers[r].ae.dim for r in REGIONS}

    def frontend(self) -> MelFrontEnd:
        return MelFrontEnd(self.cfg)

    def fingerprints(self) -> dict[str, str]:
        fp = {f"svq_{r}": self.tokenizers[r].fingerprint() for r in REGIONS}
        fp["audio"] = fingerprint(self.audio)
        fp.update({f"expert_{r}": fingerprint(self.experts[r]) for r in REGIONS})
        fp["fuse"] = fingerprint(self.fusion)
        return fp

    def dependencies(self) -> dict[str, list[str]]:
        deps = {f"svq_{r}": [] for r in REGIONS}
        deps["audio"] = []
        deps.update({f"expert_{r}": [f"svq_{r}", "audio"] for r in REGIONS})
        deps["fuse"] = list(deps)
        return deps

    def check_consistency(self) -> None:
        """Same K, code tables and widths everywhere."""
        for r in REGIONS:
            tok, ex = self.tokenizers[r], self.experts[r]
            if tok.n_codes != ex.n_codes:
                raise BundleError(f"{r}: expert predicts {ex.n_codes} codes, codebook has {tok.n_codes}")
            if not torch.equal(tok.cs.codebook.codes, ex.codes):
                raise BundleError(f"{r}: expert token table differs from the codebook")
            if self.fusion.n_codes != tok.n_codes:
                raise BundleError(f"{r}: fusion classifier width differs from the codebook")
        if self.audio.aggregate.out_channels != self.experts[REGIONS[0]].audio_proj.in_features:
            raise BundleError("audio token width differs from what the experts expect")

    # -- persistence --------------------------------------------------
    def component_arrays(self) -> dict[str, dict[str, np.ndarray]]:
        out = {}
        for r in REGIONS:
            arrays = self.tokenizers[r].to_arrays("")
            arrays["scaler.mean"] = np.asarray(self.scalers[r].mean_, dtype=np.float64)
            arrays["scaler.scale"] = np.asarray(self.scalers[r].scale_, dtype=np.float64)
            out[f"svq_{r}"] = arrays
        out["audio"] = {k: v.numpy() for k, v in self.audio.state_dict().items()}
        for r in REGIONS:
            out[f"expert_{r}"] = {k: v.numpy() for k, v in self.experts[r].state_dict().items()}
        out["fuse"] = {k: v.numpy() for k, v in self.fusion.state_dict().items()}
        return out

    def save(self, out_dir, extra: dict | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.check_consistency()
        fps = self.fingerprints()
        deps = self.dependencies()
        components = {}
        for name, arrays in self.component_arrays().items():
            fname = f"{name}.sgc"
            meta = {"kind": "component", "name": name, "config_hash": self.cfg.hash()}
            if name.startswith("svq_"):
                r = name[4:]
                meta.update(region=r, dim=self.dims[r], K=self.cfg.n_codes, decay=self.cfg.ema_decay)
            sha = container.save(out / fname, arrays, meta)
            components[name] = {"file": fname, "sha256": sha, "fingerprint": fps[name],
                                "frozen_deps": {d: fps[d] for d in deps[name]}}
        manifest = {"schema_version": self.cfg.schema_version, "config": self.cfg.to_dict(),
                    "config_hash": self.cfg.hash(), "regions": list(REGIONS),
                    "dims": self.dims, "components": components}
        manifest.update(extra or {})
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.manifest = manifest
        return manifest

    @classmethod
    def load(cls, path) -> "Bundle":
        root = Path(path)
        mpath = root / MANIFEST
        if not mpath.exists():
            raise BundleError(f"no bundle manifest at {mpath}")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise BundleError(f"unreadable manifest: {exc}") from exc
        cfg = Config.from_dict(manifest["config"])
        comps = manifest["components"]
        arrays = {}
        for name, info in comps.items():
            f = root / info["file"]
            if not f.exists():
                raise BundleError(f"missing component file {f.name}")
            if container.file_sha256(f) != info["sha256"]:
                raise LineageError(f"{f.name} does not match its recorded hash")
            arrays[name] = container.load(f)[0]

        dims = manifest["dims"]
        scalers, tokenizers, experts = {}, {}, {}
        for r in REGIONS:
            a = arrays[f"svq_{r}"]
            scalers[r] = _scaler_from(a["scaler.mean"], a["scaler.scale"])
            tokenizers[r] = RegionTokenizer.from_arrays(a, "", dims[r], cfg, r)
        audio = AudioEncoder.from_config(cfg).to(DTYPE)
        _load(audio, arrays["audio"], "")
        audio.freeze()
        for r in REGIONS:
            m = ExpertModel.from_config(tokenizers[r].cs.codebook.codes, cfg, r).to(DTYPE)
            _load(m, arrays[f"expert_{r}"], "")
            experts[r] = m.freeze()
        fusion = FusionModel.from_config([experts[r].classifier for r in REGIONS], cfg).to(DTYPE)
        _load(fusion, arrays["fuse"], "")
        fusion.freeze()
        b = cls(cfg, scalers, tokenizers, audio, experts, fusion, manifest)
        b.verify_lineage()
        b.check_consistency()
        return b

    def verify_lineage(self) -> None:
        fps = self.fingerprints()
        comps = self.manifest.get("components", {})
        for name, info in comps.items():
            if fps.get(name) != info["fingerprint"]:
                raise LineageError(f"{name}: weights do not match the recorded fingerprint")
            for dep, fp in info.get("frozen_deps", {}).items():
                if fps.get(dep) != fp:
                    raise LineageError(f"{name} was trained against a different {dep}")

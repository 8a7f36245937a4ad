"""scikit-learn style facade over the whole pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_waveform
from .bundle import Bundle
from .config import Config
from .errors import DataError
from .synthdata import SynthSession


class GestureGenerator(BaseEstimator):
    """Train on synthetic sessions, then generate poses from audio.

    ``fit(sessions)`` runs the full curriculum. ``predict(waveform)`` streams
    the waveform chunk by chunk and returns ``{region: [T_f, dim]}``; pass a
    list of waveforms to get a list of such dicts.
    """

    def __init__(self, config: Config | None = None, seed: int = 0, gamma: float | None = None,
                 out_dir=None):
        self.config = config
        self.seed = seed
        self.gamma = gamma
        self.out_dir = out_dir

    def fit(self, X=None, y=None):
        from .trainorch import TrainPlan, run_plan
        cfg = Config.from_dict((self.config or Config.desk()).to_dict())
        cfg.seed = self.seed
        sessions = None
        if X is not None:
            sessions = list(X)
            if not all(isinstance(s, SynthSession) for s in sessions):
                raise DataError("fit expects a list of SynthSession objects")
        self.bundle_ = run_plan(TrainPlan(cfg), sessions, self.out_dir)
        self.heldout_metrics_ = self.bundle_.manifest.get("heldout_metrics", {})
        return self

    @classmethod
    def from_bundle(cls, path, seed: int = 0, gamma: float | None = None) -> "GestureGenerator":
        b = Bundle.load(path)
        est = cls(b.cfg, seed, gamma, path)
        est.bundle_ = b
        est.heldout_metrics_ = b.manifest.get("heldout_metrics", {})
        return est

    def predict(self, X):
        from .stream import stream_generate
        check_fitted(self, "bundle_")
        many = isinstance(X, (list, tuple))
        outs = []
        for x in (X if many else [X]):
            poses, _, _ = stream_generate(self.bundle_, check_waveform(x), self.seed, self.gamma)
            outs.append(poses)
        return outs if many else outs[0]

    def predict_tokens(self, X) -> dict[str, np.ndarray]:
        from .stream import stream_generate
        check_fitted(self, "bundle_")
        _, _, session = stream_generate(self.bundle_, check_waveform(X), self.seed, self.gamma)
        return {r: np.asarray(v) for r, v in session.tokens.items()}

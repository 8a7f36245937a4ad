"""Zero look-ahead streaming co-speech gesture generation at desk scale."""

from .bundle import Bundle
from .config import REGIONS, Config, load_plan, parse_plan
from .errors import (BundleError, ConfigError, DataError, LineageError, NumericError, ShapeError,
                     StateError, StreamGestureError)
from .estimators import GestureGenerator
from .stream import (LatencyReport, StreamSession, causality_probe, generate_offline, latency_report,
                     open_session, stream_generate)
from .trainorch import TrainPlan, run_plan

__version__ = "0.1.0"

__all__ = [
    "Bundle", "Config", "REGIONS", "load_plan", "parse_plan", "GestureGenerator", "LatencyReport",
    "StreamSession", "causality_probe", "generate_offline", "latency_report", "open_session",
    "stream_generate", "TrainPlan", "run_plan", "StreamGestureError", "ConfigError", "DataError",
    "ShapeError", "NumericError", "StateError", "BundleError", "LineageError",
]

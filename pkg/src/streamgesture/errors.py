"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class StreamGestureError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(StreamGestureError, ValueError):
    exit_code = 2
    kind = "config"


class ShapeError(StreamGestureError, ValueError):
    exit_code = 3
    kind = "shape"


class DataError(StreamGestureError, ValueError):
    exit_code = 3
    kind = "data"


class NumericError(StreamGestureError, ArithmeticError):
    exit_code = 4
    kind = "numeric"


class DegenerateAttentionError(NumericError):
    kind = "degenerate_attention"


class ProbeError(NumericError):
    kind = "probe"


class TrainingDivergedError(NumericError):
    kind = "diverged"


class StateError(StreamGestureError, RuntimeError):
    exit_code = 5
    kind = "state"


class StateMismatchError(StateError):
    kind = "state_mismatch"


class FrozenMutationError(StateError):
    kind = "frozen_mutation"


class BundleError(StateError):
    kind = "bundle"


class LineageError(BundleError):
    kind = "lineage"

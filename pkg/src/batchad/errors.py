"""Exception types shared across the engine.

The CLI maps these onto process exit codes: validation failures
(ShapeError, ParameterError, ConfigurationError, bundle errors) exit 1,
I/O failures exit 2, undefined metrics exit 3.
"""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class ShapeError(EngineError):
    """Tensor arguments have incompatible or unexpected shapes."""


class ParameterError(EngineError):
    """A numeric parameter is outside its valid domain."""


class ConfigurationError(EngineError):
    """A configuration key has an unknown or unsupported value."""


class NumericalError(EngineError):
    """An operation produced non-finite values."""


class BundleError(EngineError):
    """Base class for feature-bundle validation and I/O problems."""


class ManifestError(BundleError):
    """The bundle manifest is malformed or violates an invariant."""


class TensorDataError(BundleError):
    """A tensor's on-disk data does not match its manifest record."""

    def __init__(self, tensor, message):
        super().__init__(f"tensor '{tensor}': {message}")
        self.tensor = tensor


class MissingTensorError(TensorDataError):
    """A tensor referenced by the manifest is absent."""


class UndefinedMetricError(EngineError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""

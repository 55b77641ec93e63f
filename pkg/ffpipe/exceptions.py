# ffpipe/exceptions.py
from typing import Optional, Any, Tuple


class FFPipeError(Exception):
    """Base exception for ffpipe errors."""
    def __init__(self,
                 message: str,
                 node_id: Optional[int] = None,
                 chapter: Optional[int] = None,
                 layer_index: Optional[int] = None):
        self.message = message
        self.node_id = node_id
        self.chapter = chapter
        self.layer_index = layer_index
        super().__init__(self.message)

    def with_context(self,
                     node_id: Optional[int] = None,
                     chapter: Optional[int] = None) -> 'FFPipeError':
        """Attach node/chapter context if it is not already set."""
        if self.node_id is None and node_id is not None:
            self.node_id = node_id
            self.message = f"[node {node_id}] {self.message}"
        if self.chapter is None and chapter is not None:
            self.chapter = chapter
            self.message = f"{self.message} (chapter {chapter})"
        self.args = (self.message,)
        return self


class ValidationError(FFPipeError):
    """Raised when input parameters fail validation."""
    pass


class DimensionError(ValidationError):
    """Raised when operand shapes do not agree."""
    def __init__(self, op: str, left_shape: Tuple[int, ...], right_shape: Tuple[int, ...]):
        message = f"Shape mismatch in {op}: {tuple(left_shape)} vs {tuple(right_shape)}"
        super().__init__(message)


class LabelRangeError(ValidationError):
    """Raised when a class index falls outside [0, num_classes)."""
    def __init__(self, label: Any, num_classes: int):
        message = f"Invalid label: {label}. Must be in [0, {num_classes})."
        super().__init__(message)


class NumericError(FFPipeError):
    """Raised when a computation produces NaN or Inf."""
    def __init__(self, what: str):
        super().__init__(f"Non-finite values in {what}")


class ConfigError(FFPipeError):
    """Raised when a run configuration is invalid."""
    pass


class PlanError(ConfigError):
    """Raised when a TrainingPlan invariant is violated."""
    pass


class PartitionError(ConfigError):
    """Raised when a dataset cannot be partitioned as requested."""
    pass


class DatasetError(FFPipeError):
    """Base class for dataset loading errors."""
    pass


class MagicNumberError(DatasetError):
    """Raised when an IDX file header carries the wrong magic number."""
    def __init__(self, path: str, expected: int, got: int):
        message = f"Bad magic number in {path}: expected 0x{expected:08x}, got 0x{got:08x}"
        super().__init__(message)


class TruncatedFileError(DatasetError):
    """Raised when a dataset file is shorter than its header promises."""
    def __init__(self, path: str, expected: int, got: int):
        message = f"Truncated file {path}: expected {expected} bytes, got {got}"
        super().__init__(message)


class CountMismatchError(DatasetError):
    """Raised when image and label files disagree on the record count."""
    def __init__(self, images: int, labels: int):
        message = f"Image/label count mismatch: {images} images vs {labels} labels"
        super().__init__(message)


class TransportError(FFPipeError):
    """Base class for inter-node communication errors."""
    pass


class ProtocolError(TransportError):
    """Raised when a frame or message violates the wire protocol."""
    pass


class ChecksumError(TransportError):
    """Raised when a received frame fails its CRC check."""
    def __init__(self, expected: int, got: int):
        message = f"Checksum mismatch: frame says 0x{expected:016x}, payload hashes to 0x{got:016x}"
        super().__init__(message)


class DependencyTimeoutError(TransportError):
    """Raised when an awaited publication does not arrive in time."""
    def __init__(self,
                 what: str,
                 chapter: int,
                 timeout: float,
                 layer_index: Optional[int] = None,
                 publisher: Optional[int] = None):
        target = f"{what} layer {layer_index} chapter {chapter}" if layer_index is not None \
            else f"{what} chapter {chapter}"
        source = f" from node {publisher}" if publisher is not None else ""
        message = f"Timed out after {timeout:g}s waiting for {target}{source}"
        super().__init__(message, chapter=chapter, layer_index=layer_index)
        self.publisher = publisher


class PipelineAbortedError(TransportError):
    """Raised on every node once any node aborts the run."""
    def __init__(self, node_id: Optional[int], reason: str):
        origin = f"node {node_id}" if node_id is not None else "orchestrator"
        super().__init__(f"Run aborted by {origin}: {reason}")
        self.origin = node_id
        self.reason = reason


class ModelFileError(FFPipeError):
    """Raised when a saved model is missing or corrupt."""
    pass

"""
Error hierarchy shared by every layer.

Each error carries a stable ``code`` so the command line can report failures
as one machine-parsable line.
"""

from typing import Optional


class UTPError(Exception):
    """Base class for all errors raised by the package."""

    code = "utp_error"


# ==================== Tensor / autograd ====================

class ShapeError(UTPError, ValueError):
    code = "shape_mismatch"


class NonScalarError(UTPError, ValueError):
    code = "non_scalar_backward"


class GraphReleasedError(UTPError, RuntimeError):
    code = "graph_released"


class NonDeterministicError(UTPError, RuntimeError):
    code = "non_deterministic_function"


# ==================== Data ====================

class CorpusError(UTPError, ValueError):
    """A corpus line failed validation."""

    code = "corpus_error"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedLineError(CorpusError):
    code = "malformed_line"


class MissingFieldError(CorpusError):
    code = "missing_field"


class RaggedRowError(CorpusError):
    code = "ragged_row"


class DuplicateIdError(CorpusError):
    code = "duplicate_id"


class SplitError(UTPError, ValueError):
    code = "split_error"


# ==================== Encoder ====================

class SerializationError(UTPError, ValueError):
    code = "serialization_error"


class MissingModalityInputError(SerializationError):
    code = "missing_modality_input"


class NoTableBudgetError(SerializationError):
    code = "no_table_budget"


class TableTooLargeError(SerializationError):
    code = "table_too_large"


class ChannelRangeError(UTPError, ValueError):
    code = "channel_out_of_range"


class EmptyPoolError(UTPError, ValueError):
    code = "empty_pool"


# ==================== Training ====================

class NonFiniteGradientError(UTPError, FloatingPointError):
    code = "non_finite_gradient"


class NonFiniteLossError(UTPError, FloatingPointError):
    code = "non_finite_loss"


class HardNegativeError(UTPError, ValueError):
    code = "invalid_hard_negative"


class CorpusTooSmallError(UTPError, ValueError):
    """Fewer training pairs than one full batch."""

    code = "corpus_too_small"


# ==================== Checkpoints ====================

class CheckpointError(UTPError, ValueError):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"

    def __init__(self, path: str):
        super().__init__(f"not a UTP checkpoint: {path}")


class VocabMismatchError(CheckpointError):
    code = "vocab_mismatch"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated_checkpoint"


class MalformedHeaderError(CheckpointError):
    code = "malformed_header"


# ==================== Retrieval / QA ====================

class EmptyIndexError(UTPError, ValueError):
    code = "empty_index"


class MissingGoldError(UTPError, KeyError):
    code = "missing_gold"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else self.code


class GoldCellTruncatedError(UTPError, ValueError):
    code = "gold_cell_truncated"


class LengthMismatchError(UTPError, ValueError):
    code = "length_mismatch"

"""
Checkpoint file layout (all integers little-endian):

    b"UTP1"
    u32 header length, then a UTF-8 JSON header:
        {"config": ModelConfig, "vocab_hash": str, "vocab": [tokens], "meta": {...}}
    u32 tensor count, then per tensor:
        u16 name length, UTF-8 name, u8 ndim, u32 × ndim shape, float64 × prod(shape)
"""

import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional

import numpy as np

from utp.autograd.tensor import Tensor
from utp.core.exceptions import (
    BadMagicError,
    CheckpointError,
    MalformedHeaderError,
    TruncatedCheckpointError,
    VocabMismatchError,
)
from utp.models.config_models import ModelConfig
from utp.services.encoder_service import EncoderParams, parameter_shapes
from utp.services.tokenizer_service import Vocab

logger = logging.getLogger(__name__)

MAGIC = b"UTP1"
HEADER_KEYS = ("config", "vocab_hash", "vocab")


@dataclass
class Checkpoint:
    """Model configuration, vocabulary and every parameter tensor."""

    config: ModelConfig
    vocab: Vocab
    params: EncoderParams
    meta: Dict[str, Any] = field(default_factory=dict)
    # Task heads trained on top of the encoder, e.g. "qa_head.weight".
    extra: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    @property
    def similarity(self) -> str:
        return self.meta.get("similarity", "dot")

    def fingerprint(self) -> str:
        """sha256 over config, vocab hash and raw parameter bytes."""
        h = hashlib.sha256()
        h.update(self.config.model_dump_json().encode("utf-8"))
        h.update(self.vocab.hash().encode("utf-8"))
        for name, t in list(self.params.items()) + list(self.extra.items()):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _write_tensor(f: BinaryIO, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def save_checkpoint(
    params: EncoderParams,
    cfg: ModelConfig,
    path,
    vocab: Vocab,
    meta: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Tensor]] = None,
) -> Path:
    """
    Write a checkpoint atomically (temporary file, then rename).

    Args:
        params: Encoder parameters
        cfg: Model configuration
        path: Destination file
        vocab: Vocabulary the token ids refer to
        meta: Training metadata (similarity, tau, phase, ...)
        extra: Task-head tensors stored alongside the encoder

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {
            "config": cfg.model_dump(),
            "vocab_hash": vocab.hash(),
            "vocab": vocab.tokens,
            "meta": meta or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    tensors = list(params.items()) + list((extra or {}).items())
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(struct.pack("<I", len(tensors)))
            for name, t in tensors:
                _write_tensor(f, name, t.data)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    logger.info(f"Checkpoint written to {path} ({len(tensors)} tensors)")
    return path


def save(ckpt: Checkpoint, path) -> Path:
    return save_checkpoint(ckpt.params, ckpt.config, path, ckpt.vocab, ckpt.meta, ckpt.extra)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"checkpoint {self.path} ends unexpectedly at byte {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_vocab: Optional[Vocab] = None) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        BadMagicError: the file does not start with the UTP1 magic
        TruncatedCheckpointError: the file ends before all records are read
        MalformedHeaderError: the JSON config block is unreadable or lacks a required key
        VocabMismatchError: the stored vocabulary does not match its hash or ``expected_vocab``
    """
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if len(raw) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(path)

    (header_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"checkpoint {path}: unreadable config block ({e})")
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"checkpoint {path}: config block is not a JSON object")
    absent = [k for k in HEADER_KEYS if k not in header]
    if absent:
        raise MalformedHeaderError(f"checkpoint {path}: config block lacks {absent}")

    try:
        vocab = Vocab(header["vocab"])
    except (TypeError, ValueError) as e:
        raise MalformedHeaderError(f"checkpoint {path}: bad vocabulary ({e})")
    if vocab.hash() != header["vocab_hash"]:
        raise VocabMismatchError(f"checkpoint {path}: stored vocabulary does not match its hash")
    if expected_vocab is not None and expected_vocab.hash() != header["vocab_hash"]:
        raise VocabMismatchError(
            f"checkpoint {path} was trained with vocabulary {header['vocab_hash'][:12]}, "
            f"got {expected_vocab.hash()[:12]}"
        )
    try:
        cfg = ModelConfig(**header["config"])
    except (TypeError, ValueError) as e:
        raise MalformedHeaderError(f"checkpoint {path}: bad model configuration ({e})")

    (count,) = r.unpack("<I")
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True)
    if r.pos != len(raw):
        raise CheckpointError(f"checkpoint {path}: {len(raw) - r.pos} trailing bytes")

    encoder_names = list(parameter_shapes(cfg))
    missing = [n for n in encoder_names if n not in tensors]
    if missing:
        raise TruncatedCheckpointError(f"checkpoint {path} is missing tensors: {missing[:3]}")
    params = EncoderParams(cfg, OrderedDict((n, tensors.pop(n)) for n in encoder_names))
    logger.info(f"Loaded checkpoint {path}")
    return Checkpoint(config=cfg, vocab=vocab, params=params, meta=header.get("meta", {}), extra=tensors)

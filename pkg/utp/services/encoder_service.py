"""
Input serialization for the three modalities and the transformer encoder.

    X_W  = [CLS] w [SEP]
    X_T  = [CLS] t [SEP]
    X_WT = [CLS] w [SEP] t [SEP]

The flattened table t is the header followed by the data rows, row-major.
Table structure enters the model only through seven per-token channels:
segment, column, row, rank, inverse rank, cell-token index and format.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utp.autograd import functional as F
from utp.autograd.tensor import Tensor
from utp.core.exceptions import (
    ChannelRangeError,
    MissingModalityInputError,
    NoTableBudgetError,
    SerializationError,
    TableTooLargeError,
)
from utp.core.seeding import stream
from utp.models.config_models import ModelConfig
from utp.models.table_models import Table, TableTextPair
from utp.services.tokenizer_service import CLS, PAD, SEP, Vocab, encode, tokenize

logger = logging.getLogger(__name__)

FORMAT_IDS = {"W": 0, "T": 1, "WT": 2}
CHANNELS = ("segment", "column", "row", "rank", "inv_rank", "cell_token", "format")
MASK_VALUE = -1e9
INIT_STD = 0.02

CellKey = Tuple[int, int]


@dataclass
class SerializedInput:
    """Token ids, the seven structural channels and the attention mask, each of length l."""

    modality: str
    token_ids: np.ndarray
    segment: np.ndarray
    column: np.ndarray
    row: np.ndarray
    rank: np.ndarray
    inv_rank: np.ndarray
    cell_token: np.ndarray
    format: np.ndarray
    attention_mask: np.ndarray
    # (row, column) -> sequence positions of that cell's tokens; row 0 is the header.
    cell_spans: Dict[CellKey, List[int]] = field(default_factory=dict)
    dropped_cells: int = 0

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def with_token_ids(self, token_ids: Sequence[int]) -> "SerializedInput":
        return replace(self, token_ids=np.asarray(token_ids, dtype=np.int64))


# ==================== Ranks ====================

def _parse_number(cell: str) -> Optional[Decimal]:
    try:
        value = Decimal(cell.strip())
    except (InvalidOperation, ValueError):
        return None
    return value if value.is_finite() else None


def _dense_rank(values: List[Optional[Decimal]], descending: bool) -> List[int]:
    distinct = sorted({v for v in values if v is not None}, reverse=descending)
    position = {v: i + 1 for i, v in enumerate(distinct)}
    return [position[v] if v is not None else 0 for v in values]


def compute_ranks(table: Table, column: int) -> Tuple[List[int], List[int]]:
    """
    Dense ranks of a column's numeric cells (``column`` is 0-based).

    Ascending rank 1..k over the distinct numeric values, ties sharing a
    rank; the inverse rank counts from the largest value. Cells that do not
    parse as decimal numbers get 0 in both.
    """
    if not 0 <= column < table.n_columns:
        raise IndexError(f"column {column} outside table of {table.n_columns} columns")
    values = [_parse_number(c) for c in table.column(column)]
    return _dense_rank(values, descending=False), _dense_rank(values, descending=True)


# ==================== Serialization ====================

@dataclass
class _Cell:
    row: int
    column: int
    ids: List[int]
    rank: int
    inv_rank: int


def _flatten_table(table: Table, vocab: Vocab) -> List[_Cell]:
    ranks = [compute_ranks(table, c) for c in range(table.n_columns)]
    cells = [_Cell(0, c + 1, encode(tokenize(h), vocab), 0, 0) for c, h in enumerate(table.header)]
    for r, row in enumerate(table.rows):
        for c, text in enumerate(row):
            cells.append(_Cell(r + 1, c + 1, encode(tokenize(text), vocab), ranks[c][0][r], ranks[c][1][r]))
    return cells


def serialize(
    text: Optional[Sequence[int]],
    table: Optional[Table],
    modality: str,
    v: Vocab,
    cfg: ModelConfig,
) -> SerializedInput:
    """
    Lay out one input of the given modality and fill all channels.

    Text is kept whole (W truncates it to l−2); table cells are dropped whole,
    from the last row backwards, until the sequence fits l.
    """
    if modality not in FORMAT_IDS:
        raise SerializationError(f"unknown modality {modality!r}")
    if modality in ("W", "WT") and text is None:
        raise MissingModalityInputError(f"modality {modality} needs text")
    if modality in ("T", "WT") and table is None:
        raise MissingModalityInputError(f"modality {modality} needs a table")
    if table is not None and modality != "W" and table.n_columns >= cfg.n_columns:
        raise TableTooLargeError(
            f"table has {table.n_columns} columns; column channel holds at most {cfg.n_columns - 1}"
        )

    l = cfg.l  # noqa: E741
    tokens, seg, col, row, rank, inv, cti = [CLS], [0], [0], [0], [0], [0], [0]
    spans: Dict[CellKey, List[int]] = {}
    dropped = 0

    def push(tok: int, s: int = 0, c: int = 0, r: int = 0, rk: int = 0, ir: int = 0, ct: int = 0) -> None:
        tokens.append(tok)
        seg.append(s)
        col.append(c)
        row.append(r)
        rank.append(rk)
        inv.append(ir)
        cti.append(ct)

    if modality in ("W", "WT"):
        text = list(text)
        if modality == "W":
            text = text[: l - 2]
        elif len(text) > l - 3:
            raise NoTableBudgetError(
                f"no table budget: text of {len(text)} tokens leaves no room for a table within l={l}"
            )
        for tok in text:
            push(tok)
        if modality == "W":
            push(SEP)

    if modality in ("T", "WT"):
        if modality == "WT":
            push(SEP)
        budget = l - len(tokens) - 1
        cells = [c for c in _flatten_table(table, v) if c.row < cfg.n_rows]
        dropped = len(table.header) + table.n_rows * table.n_columns - len(cells)
        total = sum(len(c.ids) for c in cells)
        keep = len(cells)
        while total > budget:
            keep -= 1
            total -= len(cells[keep].ids)
        dropped += len(cells) - keep
        if modality == "WT" and keep == 0 and any(c.ids for c in cells):
            raise NoTableBudgetError(f"no table budget: no whole cell fits after {len(text)} text tokens")
        top_rank = cfg.n_ranks - 1
        for cell in cells[:keep]:
            positions = []
            for k, tok in enumerate(cell.ids):
                positions.append(len(tokens))
                push(tok, 1, cell.column, cell.row, min(cell.rank, top_rank),
                     min(cell.inv_rank, top_rank), min(k + 1, cfg.n_cell_tokens - 1))
            if positions:
                spans[(cell.row, cell.column)] = positions
        push(SEP)

    n = len(tokens)
    pad = l - n

    def arr(values: List[int]) -> np.ndarray:
        return np.asarray(values + [0] * pad, dtype=np.int64)

    return SerializedInput(
        modality=modality,
        token_ids=np.asarray(tokens + [PAD] * pad, dtype=np.int64),
        segment=arr(seg),
        column=arr(col),
        row=arr(row),
        rank=arr(rank),
        inv_rank=arr(inv),
        cell_token=arr(cti),
        format=np.full(l, FORMAT_IDS[modality], dtype=np.int64),
        attention_mask=np.asarray([1] * n + [0] * pad, dtype=np.int64),
        cell_spans=spans,
        dropped_cells=dropped,
    )


def serialize_pair(pair: TableTextPair, modality: str, v: Vocab, cfg: ModelConfig) -> SerializedInput:
    """Tokenize the pair's text and serialize the requested modality."""
    text = encode(tokenize(pair.text), v) if modality in ("W", "WT") else None
    table = pair.table if modality in ("T", "WT") else None
    try:
        return serialize(text, table, modality, v, cfg)
    except SerializationError as e:
        raise type(e)(f"pair {pair.id}: {e}")


# ==================== Parameters ====================

def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Normal(0, INIT_STD) draws, redrawn until every value lies within two std."""
    out = rng.normal(0.0, INIT_STD, size=shape)
    bad = np.abs(out) > 2 * INIT_STD
    while bad.any():
        out[bad] = rng.normal(0.0, INIT_STD, size=int(bad.sum()))
        bad = np.abs(out) > 2 * INIT_STD
    return out


def _channel_cardinality(cfg: ModelConfig, name: str) -> int:
    return {
        "segment": cfg.n_segments,
        "column": cfg.n_columns,
        "row": cfg.n_rows,
        "rank": cfg.n_ranks,
        "inv_rank": cfg.n_ranks,
        "cell_token": cfg.n_cell_tokens,
        "format": cfg.n_formats,
    }[name]


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every encoder parameter name with its shape, in initialization order."""
    d, f = cfg.d, cfg.d_ff
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embeddings.token"] = (cfg.V, d)
    shapes["embeddings.position"] = (cfg.l, d)
    for name in CHANNELS:
        shapes[f"embeddings.{name}"] = (_channel_cardinality(cfg, name), d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{w}"] = (d, d)
            shapes[f"{p}.attn.b{w}"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["mlm.bias"] = (cfg.V,)
    return shapes


def is_decay_exempt(name: str) -> bool:
    """Biases and layernorm parameters are excluded from weight decay."""
    return name.rsplit(".", 1)[-1] in ("gain", "bias", "bq", "bk", "bv", "bo", "b1", "b2")


class EncoderParams:
    """Named parameter tensors of the encoder; the MLM head is tied to the token embeddings."""

    def __init__(self, cfg: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = parameter_shapes(cfg)
        if list(tensors) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.cfg = cfg
        self._tensors = tensors

    @classmethod
    def init(cls, cfg: ModelConfig) -> "EncoderParams":
        """Truncated-normal(0, 0.02) weights; layernorm gain 1, biases 0. Deterministic in cfg.seed."""
        rng = stream(cfg.seed, "init")
        tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif is_decay_exempt(name):
                data = np.zeros(shape)
            else:
                data = truncated_normal(rng, shape)
            tensors[name] = Tensor(data, requires_grad=True)
        logger.debug(f"Initialized encoder with {sum(t.size for t in tensors.values())} parameters")
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def parameters(self) -> List[Tensor]:
        return list(self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def clone(self) -> "EncoderParams":
        return EncoderParams(
            self.cfg, OrderedDict((n, Tensor(t.data, requires_grad=True)) for n, t in self._tensors.items())
        )

    def numpy(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def structural_tables(self) -> Dict[str, Tensor]:
        return {c: self._tensors[f"embeddings.{c}"] for c in CHANNELS}


# ==================== Forward ====================

def _check_channels(params: EncoderParams, x: SerializedInput) -> None:
    cfg = params.cfg
    if x.token_ids.shape != (cfg.l,):
        raise ChannelRangeError(f"input length {x.token_ids.shape[0]} != configured l={cfg.l}")
    if x.token_ids.min() < 0 or x.token_ids.max() >= cfg.V:
        raise ChannelRangeError(f"token id outside vocabulary of {cfg.V}")
    for name in CHANNELS:
        values = x.channel(name)
        card = _channel_cardinality(cfg, name)
        if values.min() < 0 or values.max() >= card:
            raise ChannelRangeError(f"{name} channel value {int(values.max())} outside cardinality {card}")


def embed(params: EncoderParams, x: SerializedInput) -> Tensor:
    """Token + absolute position + the seven structural embeddings."""
    h = F.take_rows(params["embeddings.token"], x.token_ids)
    h = h + F.take_rows(params["embeddings.position"], np.arange(params.cfg.l))
    for name in CHANNELS:
        h = h + F.take_rows(params[f"embeddings.{name}"], x.channel(name))
    return h


def _attention(params: EncoderParams, prefix: str, a: Tensor, key_mask: Tensor,
               rng: Optional[np.random.Generator], p_drop: float) -> Tensor:
    cfg = params.cfg
    q = F.linear(a, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = F.linear(a, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = F.linear(a, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    dh = cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(cfg.n_heads):
        s, e = h * dh, (h + 1) * dh
        qh, kh, vh = F.slice_cols(q, s, e), F.slice_cols(k, s, e), F.slice_cols(v, s, e)
        scores = F.matmul(qh, F.transpose(kh)) * scale + key_mask
        probs = F.dropout(F.softmax(scores, axis=-1), p_drop, rng)
        heads.append(F.matmul(probs, vh))
    merged = heads[0] if len(heads) == 1 else F.concat(heads, axis=1)
    return F.linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def forward(
    params: EncoderParams,
    x: SerializedInput,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Contextualized representations H [l×d].

    Pre-layernorm blocks; pad keys receive an additive −1e9 before the
    softmax. Dropout applies only when ``train_mode`` and ``rng`` is given.
    """
    _check_channels(params, x)
    cfg = params.cfg
    p_drop = cfg.dropout if train_mode else 0.0
    rng = rng if train_mode else None
    key_mask = Tensor(np.where(x.attention_mask == 1, 0.0, MASK_VALUE))
    eps = cfg.layernorm_eps

    h = F.dropout(embed(params, x), p_drop, rng)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a = F.layernorm(h, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], eps)
        h = h + F.dropout(_attention(params, f"{p}.attn", a, key_mask, rng, p_drop), p_drop, rng)
        f = F.layernorm(h, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], eps)
        f = F.gelu(F.linear(f, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]))
        f = F.linear(f, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"])
        h = h + F.dropout(f, p_drop, rng)
    return F.layernorm(h, params["final_ln.gain"], params["final_ln.bias"], eps)


def mlm_logits(params: EncoderParams, hidden_rows: Tensor) -> Tensor:
    """Vocabulary logits for selected rows of H, through the tied token embeddings."""
    return F.matmul(hidden_rows, F.transpose(params["embeddings.token"])) + params["mlm.bias"]

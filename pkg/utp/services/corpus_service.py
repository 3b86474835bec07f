import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from utp.core.exceptions import (
    DuplicateIdError,
    MalformedLineError,
    MissingFieldError,
    RaggedRowError,
    SplitError,
)
from utp.core.seeding import stream
from utp.models.table_models import Corpus, QAExample, Table, TableTextPair
from utp.services.tokenizer_service import table_tokens, tokenize

logger = logging.getLogger(__name__)

ATTRIBUTE_NAMES = [
    "population", "area", "elevation", "founded", "rank", "score",
    "color", "league", "region", "status", "height", "capacity",
]
# Attributes at even positions of ATTRIBUTE_NAMES take numbers, odd ones take words.
CATEGORY_WORDS = [
    "red", "blue", "green", "amber", "north", "south", "east", "west",
    "alpha", "beta", "gamma", "delta", "open", "closed", "major", "minor",
]
SYLLABLES = [
    "ka", "lo", "mi", "ra", "zu", "ven", "tor", "el", "qui", "dar",
    "sa", "bel", "no", "vik", "ru", "tam", "ori", "pex", "gal", "une",
]
TEXT_TEMPLATES = [
    "{entity} has a {attribute} of {value} .",
    "the {attribute} of {entity} is {value} .",
    "{entity} is recorded with {attribute} {value} .",
]
QUESTION_TEMPLATE = "what is the {attribute} of {entity} ?"


# ==================== JSONL ingestion ====================

def _decode_line(raw: bytes, line_no: int) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedLineError(f"invalid UTF-8 at byte {e.start}: {e.reason}", line=line_no)


def _parse_pair(raw: str, line_no: int) -> TableTextPair:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise MalformedLineError(f"invalid JSON: {e.msg}", line=line_no)
    if not isinstance(obj, dict):
        raise MalformedLineError("expected a JSON object", line=line_no)
    for key in ("id", "text", "table"):
        if key not in obj:
            raise MissingFieldError(f"missing field '{key}'", line=line_no)
    table = obj["table"]
    if not isinstance(table, dict):
        raise MalformedLineError("'table' must be an object", line=line_no)
    for key in ("header", "rows"):
        if key not in table:
            raise MissingFieldError(f"missing field 'table.{key}'", line=line_no)
    header, rows = table["header"], table["rows"]
    if isinstance(header, list) and isinstance(rows, list):
        for i, row in enumerate(rows):
            if isinstance(row, list) and len(row) != len(header):
                raise RaggedRowError(
                    f"row {i + 1} has {len(row)} cells but the header has {len(header)}", line=line_no
                )
    try:
        return TableTextPair.model_validate(obj)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise MalformedLineError(f"{where}: {first['msg']}", line=line_no)


def read_corpus(path, split_seed: int = 0) -> Corpus:
    """
    Load a corpus JSONL file, one pair per line.

    Args:
        path: Corpus file
        split_seed: Seed recorded on the corpus for later splitting

    Returns:
        Corpus with pairs in file order
    """
    pairs: List[TableTextPair] = []
    seen: Dict[str, int] = {}
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            text = _decode_line(raw, line_no)
            pair = _parse_pair(text, line_no)
            if pair.id in seen:
                raise DuplicateIdError(f"id '{pair.id}' already used on line {seen[pair.id]}", line=line_no)
            seen[pair.id] = line_no
            pairs.append(pair)
    logger.info(f"Read {len(pairs)} pairs from {path}")
    return Corpus(pairs=pairs, split_seed=split_seed)


def write_corpus(corpus: Corpus, path) -> None:
    """Write one pair per line, keys in id/text/table(header, rows) order."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in corpus.pairs:
            f.write(pair.model_dump_json() + "\n")
    logger.info(f"Wrote {len(corpus)} pairs to {path}")


def read_qa_corpus(path) -> List[QAExample]:
    """QA JSONL: the pair schema plus ``gold_cells``."""
    examples: List[QAExample] = []
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            text = _decode_line(raw, line_no)
            pair = _parse_pair(text, line_no)
            obj = json.loads(text)
            if "gold_cells" not in obj:
                raise MissingFieldError("missing field 'gold_cells'", line=line_no)
            try:
                examples.append(QAExample(pair=pair, gold_cells=[tuple(c) for c in obj["gold_cells"]]))
            except (ValidationError, TypeError) as e:
                raise MalformedLineError(f"gold_cells: {e}", line=line_no)
    ids = [ex.pair.id for ex in examples]
    if len(ids) != len(set(ids)):
        raise DuplicateIdError("QA corpus contains duplicate ids")
    logger.info(f"Read {len(examples)} QA examples from {path}")
    return examples


def write_qa_corpus(examples: List[QAExample], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


# ==================== Splitting ====================

def _split_key(seed: int, pair_id: str) -> str:
    return hashlib.sha256(f"{seed}:{pair_id}".encode("utf-8")).hexdigest()


def split_corpus(c: Corpus, dev_fraction: float = 0.10, seed: Optional[int] = None) -> Tuple[Corpus, Corpus]:
    """
    Partition a corpus into train and dev.

    Membership depends only on the pair ids and the seed, so re-reading the
    same file gives the same split. |dev| = round-half-up(dev_fraction * |c|).
    """
    if not 0.0 < dev_fraction < 1.0:
        raise SplitError(f"dev_fraction must lie in (0, 1), got {dev_fraction}")
    if len(c) < 2:
        raise SplitError(f"cannot split a corpus of {len(c)} pairs")
    seed = c.split_seed if seed is None else seed
    n_dev = int(np.floor(dev_fraction * len(c) + 0.5))
    ranked = sorted(c.ids(), key=lambda pid: _split_key(seed, pid))
    dev_ids = set(ranked[:n_dev])
    train = Corpus(pairs=[p for p in c.pairs if p.id not in dev_ids], split_seed=seed)
    dev = Corpus(pairs=[p for p in c.pairs if p.id in dev_ids], split_seed=seed)
    logger.info(f"Split {len(c)} pairs into {len(train)} train / {len(dev)} dev (seed={seed})")
    return train, dev


# ==================== Synthetic generation ====================

def _entity_pool(n_entities: int, seed: int) -> List[str]:
    rng = stream(seed, "entities")
    names: List[str] = []
    seen = set()
    while len(names) < n_entities:
        n_syl = int(rng.integers(2, 4))
        name = "".join(SYLLABLES[int(i)] for i in rng.integers(0, len(SYLLABLES), size=n_syl))
        if name in seen:
            # Pool exhausted at this length; widen with a numeric suffix.
            name = f"{name}{len(names)}"
        seen.add(name)
        names.append(name)
    return names


def _attribute_pool(n_attributes: int) -> List[str]:
    names = list(ATTRIBUTE_NAMES[:n_attributes])
    names += [f"attribute{k}" for k in range(len(names), n_attributes)]
    return names


def _attribute_value(attr_index: int, rng: np.random.Generator) -> str:
    if attr_index % 2 == 0:
        return str(int(rng.integers(1, 1000)))
    return CATEGORY_WORDS[int(rng.integers(0, len(CATEGORY_WORDS)))]


def _synthetic_table(
    rng: np.random.Generator, entities: List[str], attributes: List[str], max_rows: int
) -> Tuple[Table, List[int]]:
    n_rows = int(rng.integers(1, min(max_rows, len(entities)) + 1))
    n_cols = int(rng.integers(1, len(attributes) + 1))
    attr_idx = sorted(int(i) for i in rng.choice(len(attributes), size=n_cols, replace=False))
    row_entities = [entities[int(i)] for i in rng.choice(len(entities), size=n_rows, replace=False)]
    header = ["name"] + [attributes[i] for i in attr_idx]
    rows = [[ent] + [_attribute_value(i, rng) for i in attr_idx] for ent in row_entities]
    return Table(header=header, rows=rows), attr_idx


def _fit_table(table: Table, keep_row: int, budget: int) -> Table:
    """Drop data rows (never ``keep_row``, 1-based) from the bottom until the flat table fits ``budget`` tokens."""
    rows = list(table.rows)
    while len(table_tokens(Table(header=table.header, rows=rows))) > budget and len(rows) > 1:
        drop = len(rows) if len(rows) != keep_row else len(rows) - 1
        rows.pop(drop - 1)
        if drop < keep_row:
            keep_row -= 1
    return Table(header=table.header, rows=rows)


def _pick_target(rng: np.random.Generator, table: Table) -> Tuple[int, int]:
    row = int(rng.integers(1, table.n_rows + 1))
    col = int(rng.integers(2, table.n_columns + 1)) if table.n_columns > 1 else 1
    return row, col


def generate_synthetic(
    n_pairs: int,
    n_entities: int,
    n_attributes: int,
    max_rows: int,
    seed: int,
    max_seq_len: Optional[int] = 64,
) -> Corpus:
    """
    Generate entity/attribute tables, each with a sentence naming one row's
    entity and one of its attribute values.

    Every pair serializes into all three modalities within ``max_seq_len``
    tokens (text + flat table + 3 framing tokens); rows other than the
    mentioned one are dropped until it fits.
    """
    if min(n_pairs, n_entities, n_attributes, max_rows) < 1:
        raise ValueError("n_pairs, n_entities, n_attributes and max_rows must all be positive")
    entities = _entity_pool(n_entities, seed)
    attributes = _attribute_pool(n_attributes)
    pairs: List[TableTextPair] = []
    for i in range(n_pairs):
        rng = stream(seed, "pair", i)
        table, _ = _synthetic_table(rng, entities, attributes, max_rows)
        row, col = _pick_target(rng, table)
        template = TEXT_TEMPLATES[int(rng.integers(0, len(TEXT_TEMPLATES)))]
        text = template.format(
            entity=table.cell(row, 1), attribute=table.header[col - 1], value=table.cell(row, col)
        )
        if max_seq_len is not None:
            table = _fit_table(table, row, max_seq_len - 3 - len(tokenize(text)))
        pairs.append(TableTextPair(id=f"syn-{i:05d}", text=text, table=table))
    logger.info(f"Generated {n_pairs} synthetic pairs (entities={n_entities}, attributes={n_attributes}, seed={seed})")
    return Corpus(pairs=pairs, split_seed=seed)


def generate_synthetic_qa(
    n_examples: int,
    n_entities: int,
    n_attributes: int,
    max_rows: int,
    seed: int,
    max_seq_len: Optional[int] = 64,
) -> List[QAExample]:
    """Questions naming an entity and an attribute; the gold cell holds that value."""
    if min(n_examples, n_entities, n_attributes, max_rows) < 1:
        raise ValueError("all counts must be positive")
    entities = _entity_pool(n_entities, seed)
    attributes = _attribute_pool(n_attributes)
    examples: List[QAExample] = []
    for i in range(n_examples):
        rng = stream(seed, "qa", i)
        table, _ = _synthetic_table(rng, entities, attributes, max_rows)
        if table.n_columns == 1:
            # A question needs an attribute column to point at.
            table = Table(header=table.header + [attributes[0]],
                          rows=[r + [_attribute_value(0, rng)] for r in table.rows])
        row, col = _pick_target(rng, table)
        question = QUESTION_TEMPLATE.format(attribute=table.header[col - 1], entity=table.cell(row, 1))
        if max_seq_len is not None:
            before = table.rows[row - 1]
            table = _fit_table(table, row, max_seq_len - 3 - len(tokenize(question)))
            row = table.rows.index(before) + 1
        pair = TableTextPair(id=f"qa-{i:05d}", text=question, table=table)
        examples.append(QAExample(pair=pair, gold_cells=[(row, col)]))
    logger.info(f"Generated {n_examples} synthetic QA examples (seed={seed})")
    return examples

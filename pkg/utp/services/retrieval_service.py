import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from utp.core.config import settings
from utp.core.exceptions import EmptyIndexError, MissingGoldError, SerializationError
from utp.models.run_models import HardNegativeSet, QueryRanking, RankedTable, RetrievalRun
from utp.models.table_models import Table, TableTextPair
from utp.services.checkpoint_service import Checkpoint
from utp.services.encoder_service import EncoderParams, serialize, serialize_pair
from utp.services.objective_service import represent
from utp.services.tokenizer_service import Vocab, table_tokens, tokenize

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 10, 50)


@dataclass
class TableIndex:
    """Pooled X_T representations, one row per table id, in input order."""

    table_ids: List[str]
    embeddings: np.ndarray
    checkpoint_hash: str
    similarity: str = "dot"

    def __len__(self) -> int:
        return len(self.table_ids)


# ==================== Encoding ====================

def parallel_map(fn, items: Sequence, threads: Optional[int] = None) -> List:
    threads = settings.UTP_DEVICE_THREADS if threads is None else threads
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def encode_tables(
    params: EncoderParams,
    vocab: Vocab,
    tables: Sequence[Tuple[str, Table]],
    threads: Optional[int] = None,
) -> np.ndarray:
    """Eval-mode pooled X_T representation of each table, [M×d]."""

    def one(item: Tuple[str, Table]) -> np.ndarray:
        table_id, table = item
        try:
            x = serialize(None, table, "T", vocab, params.cfg)
        except SerializationError as e:
            raise type(e)(f"table {table_id}: {e}")
        return represent(params, x).data

    if not tables:
        return np.zeros((0, params.cfg.d))
    return np.stack(parallel_map(one, list(tables), threads))


def encode_queries(
    params: EncoderParams,
    vocab: Vocab,
    pairs: Sequence[TableTextPair],
    threads: Optional[int] = None,
) -> np.ndarray:
    """Eval-mode pooled X_W representation of each pair's text, [Q×d]."""

    def one(pair: TableTextPair) -> np.ndarray:
        return represent(params, serialize_pair(pair, "W", vocab, params.cfg)).data

    if not pairs:
        return np.zeros((0, params.cfg.d))
    return np.stack(parallel_map(one, list(pairs), threads))


def build_index(ckpt: Checkpoint, tables: Sequence[Tuple[str, Table]], threads: Optional[int] = None) -> TableIndex:
    """
    Encode a table collection with a frozen checkpoint.

    Args:
        ckpt: Checkpoint whose encoder and similarity are used
        tables: (table id, table) in the order the index keeps

    Returns:
        TableIndex with one row per table
    """
    ids = [tid for tid, _ in tables]
    if len(set(ids)) != len(ids):
        raise ValueError("table ids in an index must be unique")
    try:
        embeddings = encode_tables(ckpt.params, ckpt.vocab, tables, threads)
    except SerializationError as e:
        logger.error(f"Index build failed: {e}")
        raise
    index = TableIndex(ids, embeddings, ckpt.fingerprint(), ckpt.similarity)
    logger.info(f"Built index of {len(index)} tables ({index.similarity} similarity)")
    return index


# ==================== Search ====================

def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / (np.sqrt((m * m).sum(axis=-1, keepdims=True)) + 1e-12)


def score_all(index: TableIndex, query_embedding: np.ndarray, similarity: Optional[str] = None) -> np.ndarray:
    similarity = similarity or index.similarity
    emb, q = index.embeddings, np.asarray(query_embedding, dtype=np.float64)
    if similarity == "cosine":
        emb, q = _normalize_rows(emb), _normalize_rows(q)
    return (emb * q).sum(axis=1)


def search(index: TableIndex, query_embedding, k: int, similarity: Optional[str] = None) -> List[RankedTable]:
    """Top-k tables by similarity, exhaustively; ties go to the lower table id."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if len(index) == 0:
        raise EmptyIndexError("cannot search an empty index")
    if hasattr(query_embedding, "data") and not isinstance(query_embedding, np.ndarray):
        query_embedding = query_embedding.data
    scores = score_all(index, query_embedding, similarity)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.table_ids[i]))[:k]
    return [RankedTable(table_id=index.table_ids[i], score=float(scores[i])) for i in order]


def dense_run(
    ckpt: Checkpoint,
    queries: Sequence[TableTextPair],
    index: TableIndex,
    k: int,
    threads: Optional[int] = None,
) -> RetrievalRun:
    """Encode each query as X_W and rank the index."""
    q = encode_queries(ckpt.params, ckpt.vocab, queries, threads)
    return RetrievalRun(queries=[
        QueryRanking(query_id=pair.id, ranking=search(index, q[i], k))
        for i, pair in enumerate(queries)
    ])


def recall_at_k(run: RetrievalRun, gold: Mapping[str, str], ks: Sequence[int] = DEFAULT_KS) -> Dict[str, float]:
    """R@K = fraction of queries whose gold table is in the top K."""
    if not run.queries:
        return {f"R@{k}": 0.0 for k in ks}
    hits = {k: 0 for k in ks}
    for q in run.queries:
        if q.query_id not in gold:
            raise MissingGoldError(f"no gold table for query {q.query_id}")
        ids = q.table_ids()
        target = gold[q.query_id]
        rank = ids.index(target) + 1 if target in ids else None
        for k in ks:
            if rank is not None and rank <= k:
                hits[k] += 1
    n = len(run.queries)
    return {f"R@{k}": hits[k] / n for k in ks}


def metrics_record(metrics: Dict[str, float], n_queries: int) -> Dict[str, float]:
    record = dict(metrics)
    record["n_queries"] = n_queries
    return record


def evaluate_dense(
    params: EncoderParams,
    vocab: Vocab,
    pairs: Sequence[TableTextPair],
    ks: Sequence[int] = DEFAULT_KS,
    similarity: str = "dot",
    table_pool: Optional[Sequence[Tuple[str, Table]]] = None,
) -> Dict[str, float]:
    """R@K of text queries against the pairs' own tables (plus an optional wider pool)."""
    tables = list(table_pool) if table_pool is not None else [(p.id, p.table) for p in pairs]
    index = TableIndex([t for t, _ in tables], encode_tables(params, vocab, tables), "", similarity)
    q = encode_queries(params, vocab, pairs)
    k_max = max(ks)
    run = RetrievalRun(queries=[
        QueryRanking(query_id=p.id, ranking=search(index, q[i], k_max)) for i, p in enumerate(pairs)
    ])
    return recall_at_k(run, {p.id: p.id for p in pairs}, ks)


# ==================== Hard negatives ====================

def mine_hard_negatives(
    ckpt: Checkpoint,
    pairs: Sequence[TableTextPair],
    per_query: int,
    table_pool: Optional[Sequence[Tuple[str, Table]]] = None,
) -> HardNegativeSet:
    """
    For each query, the ``per_query`` highest-scoring tables other than its gold.

    The gold table of a pair is the table stored under the pair's id.
    Queries with fewer candidates get all of them and are listed in
    ``short_queries``.
    """
    if per_query < 1:
        raise ValueError(f"per_query must be at least 1, got {per_query}")
    tables = list(table_pool) if table_pool is not None else [(p.id, p.table) for p in pairs]
    index = build_index(ckpt, tables)
    q = encode_queries(ckpt.params, ckpt.vocab, pairs)
    negatives: Dict[str, List[str]] = {}
    short: List[str] = []
    for i, pair in enumerate(pairs):
        ranked = [r.table_id for r in search(index, q[i], len(index)) if r.table_id != pair.id]
        negatives[pair.id] = ranked[:per_query]
        if len(ranked) < per_query:
            short.append(pair.id)
    if short:
        logger.warning(f"{len(short)} queries have fewer than {per_query} non-gold tables")
    logger.info(f"Mined up to {per_query} hard negatives for {len(pairs)} queries")
    return HardNegativeSet(per_query=per_query, negatives=negatives, short_queries=short)


# ==================== BM25 ====================

@dataclass
class CorpusStats:
    """Document frequencies and average length over a pool of token bags."""

    n_docs: int
    doc_freq: Dict[str, int]
    avgdl: float

    @classmethod
    def from_docs(cls, docs: Sequence[Sequence[str]]) -> "CorpusStats":
        df: Counter = Counter()
        for d in docs:
            df.update(set(d))
        avgdl = sum(len(d) for d in docs) / max(len(docs), 1)
        return cls(n_docs=len(docs), doc_freq=dict(df), avgdl=avgdl)

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def bm25_score(
    query_tokens: Sequence[str],
    doc_tokens: Sequence[str],
    stats: CorpusStats,
    k1: float = 1.2,
    b: float = 0.75,
) -> float:
    """Okapi BM25 of one document for a query."""
    tf = Counter(doc_tokens)
    dl = len(doc_tokens)
    norm = k1 * (1.0 - b + b * dl / stats.avgdl) if stats.avgdl > 0 else k1
    score = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += stats.idf(term) * f * (k1 + 1.0) / (f + norm)
    return score


class BM25Index:
    """Tables rendered as token bags (header + cells) and ranked by BM25."""

    def __init__(self, tables: Sequence[Tuple[str, Table]], k1: float = 1.2, b: float = 0.75):
        self.table_ids = [tid for tid, _ in tables]
        self.docs = [table_tokens(t) for _, t in tables]
        self.stats = CorpusStats.from_docs(self.docs)
        self.k1 = k1
        self.b = b
        logger.info(f"BM25 index over {len(self.docs)} tables (k1={k1}, b={b})")

    def search(self, query_tokens: Sequence[str], k: int) -> List[RankedTable]:
        if not self.docs:
            raise EmptyIndexError("cannot search an empty index")
        scores = [bm25_score(query_tokens, d, self.stats, self.k1, self.b) for d in self.docs]
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], self.table_ids[i]))[:k]
        return [RankedTable(table_id=self.table_ids[i], score=scores[i]) for i in order]


def bm25_run(queries: Sequence[TableTextPair], tables: Sequence[Tuple[str, Table]], k: int) -> RetrievalRun:
    index = BM25Index(tables)
    return RetrievalRun(queries=[
        QueryRanking(query_id=p.id, ranking=index.search(tokenize(p.text), k)) for p in queries
    ])


# ==================== Files ====================

def write_run(run: RetrievalRun, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in run.queries:
            f.write(q.model_dump_json() + "\n")


def write_metrics(metrics: Dict[str, float], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")


def write_hard_negatives(negatives: HardNegativeSet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(negatives.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_hard_negatives(path) -> HardNegativeSet:
    return HardNegativeSet.model_validate_json(Path(path).read_text(encoding="utf-8"))

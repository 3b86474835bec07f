import hashlib
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import regex

from utp.models.table_models import Corpus, Table

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
N_SPECIAL = len(SPECIAL_TOKENS)

# A punctuation character, or a maximal run of anything that is neither punctuation nor space.
_TOKEN_RE = regex.compile(r"\p{P}|[^\p{P}\s]+")


def tokenize(s: str) -> List[str]:
    """Lowercase, split on Unicode whitespace, and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(s.lower())


def table_tokens(table: Table) -> List[str]:
    """Header then cells, row-major, as one flat token list."""
    tokens: List[str] = []
    for cell in table.header:
        tokens.extend(tokenize(cell))
    for row in table.rows:
        for cell in row:
            tokens.extend(tokenize(cell))
    return tokens


class Vocab:
    """
    Token <-> id map with the fixed reserved layout
    [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3, [MASK]=4.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:N_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError(f"Vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary contains duplicate tokens")
        self._itos: List[str] = tokens
        self._stoi: Dict[str, int] = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    @property
    def tokens(self) -> List[str]:
        return list(self._itos)

    def id_of(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._itos[idx]

    def hash(self) -> str:
        """sha256 over the newline-joined token list; identifies the id assignment."""
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()


def build_vocab(corpus: Corpus, min_freq: int = 1) -> Vocab:
    """
    Build a vocabulary from every text and table cell of a corpus.

    Tokens with frequency >= min_freq are kept, ordered by frequency
    descending then lexicographically.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be at least 1, got {min_freq}")
    counts: Counter = Counter()
    for pair in corpus.pairs:
        counts.update(tokenize(pair.text))
        counts.update(table_tokens(pair.table))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    kept = [t for t in kept if t not in SPECIAL_TOKENS]
    vocab = Vocab(SPECIAL_TOKENS + kept)
    logger.info(f"Built vocabulary of {len(vocab)} tokens from {len(corpus)} pairs (min_freq={min_freq})")
    return vocab


def encode(tokens: Iterable[str], v: Vocab) -> List[int]:
    """Map tokens to ids; unknown tokens and literal special-token strings become [UNK]."""
    ids = (v.id_of(t) for t in tokens)
    return [i if i >= N_SPECIAL else UNK for i in ids]


def decode(ids: Iterable[int], v: Vocab) -> List[str]:
    return [v.token_of(i) for i in ids]


def write_vocab(v: Vocab, path) -> None:
    """One token per line; line number is the id."""
    Path(path).write_text("".join(t + "\n" for t in v.tokens), encoding="utf-8")


def read_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    return Vocab(lines)

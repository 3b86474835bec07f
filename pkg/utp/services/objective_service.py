"""
Universal MLM over the three modalities and cross-modal contrastive
regularization (CMCR) among the pooled representations r_w, r_t, r_wt.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utp.autograd import functional as F
from utp.autograd.tensor import Tensor
from utp.core.exceptions import EmptyPoolError, ShapeError
from utp.models.config_models import LossConfig
from utp.models.table_models import TableTextPair
from utp.services.encoder_service import (
    EncoderParams,
    SerializedInput,
    forward,
    mlm_logits,
    serialize_pair,
)
from utp.services.tokenizer_service import CLS, MASK, N_SPECIAL, PAD, SEP, Vocab

logger = logging.getLogger(__name__)

MODALITIES = ("W", "T", "WT")


# ==================== Masking ====================

class MaskAction(IntEnum):
    KEEP = 0
    MASK = 1
    RANDOM = 2
    UNCHANGED = 3


@dataclass
class MaskingPlan:
    """Per-position actions plus the original ids at the selected positions."""

    actions: np.ndarray
    positions: np.ndarray
    original_ids: np.ndarray
    replacement_ids: np.ndarray

    @property
    def is_empty(self) -> bool:
        return self.positions.size == 0

    def apply(self, x: SerializedInput) -> SerializedInput:
        """The corrupted input the model sees."""
        ids = x.token_ids.copy()
        ids[self.positions] = self.replacement_ids
        return x.with_token_ids(ids)


def maskable_positions(x: SerializedInput) -> np.ndarray:
    """Real tokens other than [CLS]/[SEP]/[PAD]."""
    ids = x.token_ids
    ok = (x.attention_mask == 1) & (ids != CLS) & (ids != SEP) & (ids != PAD)
    return np.nonzero(ok)[0]


def n_to_mask(n_maskable: int, rate: float = 0.15) -> int:
    """round-half-up(rate · n), at least 1 when anything is maskable."""
    if n_maskable == 0:
        return 0
    return max(1, int(np.floor(rate * n_maskable + 0.5)))


def make_masking_plan(
    x: SerializedInput,
    rng: np.random.Generator,
    vocab_size: int,
    mask_rate: float = 0.15,
) -> MaskingPlan:
    """
    Select positions uniformly without replacement; each selected position
    independently becomes [MASK] (80%), a random real-vocabulary id (10%)
    or stays unchanged (10%).
    """
    candidates = maskable_positions(x)
    k = n_to_mask(candidates.size, mask_rate)
    actions = np.zeros(x.token_ids.shape[0], dtype=np.int64)
    if k == 0:
        empty = np.zeros(0, dtype=np.int64)
        return MaskingPlan(actions, empty, empty, empty)

    positions = np.sort(rng.choice(candidates, size=k, replace=False))
    original = x.token_ids[positions].copy()
    replacement = original.copy()
    draws = rng.random(k)
    has_real_vocab = vocab_size > N_SPECIAL
    for j, (pos, u) in enumerate(zip(positions, draws)):
        if u < 0.8 or not has_real_vocab:
            actions[pos] = MaskAction.MASK
            replacement[j] = MASK
        elif u < 0.9:
            actions[pos] = MaskAction.RANDOM
            replacement[j] = int(rng.integers(N_SPECIAL, vocab_size))
        else:
            actions[pos] = MaskAction.UNCHANGED
    return MaskingPlan(actions, positions, original, replacement)


# ==================== MLM ====================

def mlm_loss(
    params: EncoderParams,
    x: SerializedInput,
    plan: MaskingPlan,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Cross-entropy of the MLM head at masked positions of the corrupted input; 0 for an empty plan."""
    if plan.is_empty:
        return Tensor.scalar(0.0)
    H = forward(params, plan.apply(x), train_mode=train_mode, rng=rng)
    logits = mlm_logits(params, F.take_rows(H, plan.positions))
    return F.cross_entropy(logits, plan.original_ids)


def universal_mlm_terms(
    params: EncoderParams,
    pair: TableTextPair,
    vocab: Vocab,
    rng: np.random.Generator,
    modalities: Sequence[str] = MODALITIES,
    train_mode: bool = False,
    mask_rate: float = 0.15,
) -> Dict[str, Tensor]:
    """One MLM loss per modality, each with its own plan drawn from ``rng`` in W, T, WT order."""
    terms: Dict[str, Tensor] = {}
    for modality in MODALITIES:
        if modality not in modalities:
            continue
        x = serialize_pair(pair, modality, vocab, params.cfg)
        plan = make_masking_plan(x, rng, params.cfg.V, mask_rate)
        terms[modality] = mlm_loss(params, x, plan, train_mode=train_mode, rng=rng)
    return terms


def universal_mlm_loss(
    params: EncoderParams,
    pair: TableTextPair,
    vocab: Vocab,
    rng: np.random.Generator,
    modalities: Sequence[str] = MODALITIES,
    train_mode: bool = False,
    mask_rate: float = 0.15,
) -> Tensor:
    """L_mlm = mlm(X_W) + mlm(X_T) + mlm(X_WT)."""
    total = Tensor.scalar(0.0)
    for term in universal_mlm_terms(params, pair, vocab, rng, modalities, train_mode, mask_rate).values():
        total = total + term
    return total


# ==================== Pooling / similarity ====================

def pool(H: Tensor, attention_mask: np.ndarray) -> Tensor:
    """Mean of the rows of H where attention_mask is 1."""
    mask = np.asarray(attention_mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise EmptyPoolError("cannot pool an input with no real positions")
    return F.weighted_row_sum(H, mask / count)


def represent(
    params: EncoderParams,
    x: SerializedInput,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """r = pool(M(x))."""
    return pool(forward(params, x, train_mode=train_mode, rng=rng), x.attention_mask)


def similarity(a: Tensor, b: Tensor, kind: str = "dot") -> Tensor:
    """[N×M] similarities between the rows of a and the rows of b."""
    if kind == "cosine":
        a, b = F.l2_normalize(a), F.l2_normalize(b)
    elif kind != "dot":
        raise ValueError(f"unknown similarity {kind!r}")
    return F.matmul(a, F.transpose(b))


# ==================== Contrastive ====================

def infonce(
    anchor: Tensor,
    positive: Tensor,
    cfg: LossConfig,
    extra_negatives: Optional[List[Optional[Tensor]]] = None,
) -> Tensor:
    """
    Mean over anchors of −log softmax_j(sim(a_i, p_j)/τ)[i].

    ``extra_negatives[i]``, when given, is a [h_i×d] matrix appended to
    anchor i's denominator only.
    """
    if anchor.ndim != 2 or anchor.shape != positive.shape:
        raise ShapeError(f"infonce: anchor {anchor.shape} and positive {positive.shape} must be equal [N×d]")
    n = anchor.shape[0]
    if n == 0:
        raise ShapeError("infonce needs at least one anchor")
    inv_tau = 1.0 / cfg.tau

    if not extra_negatives or all(e is None for e in extra_negatives):
        logits = similarity(anchor, positive, cfg.similarity) * inv_tau
        return F.cross_entropy(logits, list(range(n)))

    if len(extra_negatives) != n:
        raise ShapeError(f"infonce: {len(extra_negatives)} hard-negative blocks for {n} anchors")
    total = Tensor.scalar(0.0)
    for i in range(n):
        a_i = F.take_rows(anchor, [i])
        columns = positive if extra_negatives[i] is None else F.concat([positive, extra_negatives[i]], axis=0)
        logits = similarity(a_i, columns, cfg.similarity) * inv_tau
        total = total + F.cross_entropy(logits, [i])
    return total * (1.0 / n)


@dataclass
class BatchRepresentations:
    """Row-aligned pooled representations for a batch of N pairs."""

    r_w: Tensor
    r_t: Tensor
    r_wt: Tensor

    def __post_init__(self):
        if not (self.r_w.shape == self.r_t.shape == self.r_wt.shape) or self.r_w.ndim != 2:
            raise ShapeError(
                f"representations must share [N×d]: {self.r_w.shape}, {self.r_t.shape}, {self.r_wt.shape}"
            )


CMCR_TERMS = {
    "t_w": ("r_t", "r_w"),
    "t_wt": ("r_t", "r_wt"),
    "wt_w": ("r_wt", "r_w"),
}


def cmcr_terms(b: BatchRepresentations, cfg: LossConfig) -> Dict[str, Tensor]:
    terms: Dict[str, Tensor] = {}
    for name, (first, second) in CMCR_TERMS.items():
        if name not in cfg.cmcr_terms:
            continue
        x, y = getattr(b, first), getattr(b, second)
        if cfg.symmetric_cmcr:
            terms[name] = (infonce(x, y, cfg) + infonce(y, x, cfg)) * 0.5
        else:
            terms[name] = infonce(x, y, cfg)
    return terms


def cmcr_loss(b: BatchRepresentations, cfg: LossConfig) -> Tensor:
    """L_cmcr = L(r_t, r_w) + L(r_t, r_wt) + L(r_wt, r_w)."""
    total = Tensor.scalar(0.0)
    for term in cmcr_terms(b, cfg).values():
        total = total + term
    return total


def batch_representations(
    params: EncoderParams,
    pairs: Sequence[TableTextPair],
    vocab: Vocab,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> BatchRepresentations:
    """Pooled representations of the uncorrupted X_W, X_T and X_WT of each pair."""
    reps: Dict[str, List[Tensor]] = {m: [] for m in MODALITIES}
    for pair in pairs:
        for m in MODALITIES:
            x = serialize_pair(pair, m, vocab, params.cfg)
            reps[m].append(represent(params, x, train_mode=train_mode, rng=rng))
    return BatchRepresentations(r_w=F.stack(reps["W"]), r_t=F.stack(reps["T"]), r_wt=F.stack(reps["WT"]))


# ==================== Multi-task ====================

@dataclass
class LossComponents:
    L: Tensor
    L_mlm: Tensor
    L_cmcr: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {"L": self.L.item(), "L_mlm": self.L_mlm.item(), "L_cmcr": self.L_cmcr.item()}


def total_loss(
    params: EncoderParams,
    batch: Sequence[TableTextPair],
    cfg: LossConfig,
    rng: np.random.Generator,
    vocab: Vocab,
    train_mode: bool = True,
) -> Tuple[Tensor, LossComponents]:
    """
    L = L_cmcr + L_mlm.

    L_mlm is the batch mean of the universal MLM loss; L_cmcr uses pooled
    representations of uncorrupted inputs.
    """
    if not batch:
        raise ValueError("total_loss needs a non-empty batch")

    l_mlm = Tensor.scalar(0.0)
    if cfg.use_mlm:
        for pair in batch:
            l_mlm = l_mlm + universal_mlm_loss(
                params, pair, vocab, rng, cfg.mlm_modalities, train_mode, cfg.mask_rate
            )
        l_mlm = l_mlm * (1.0 / len(batch))

    l_cmcr = Tensor.scalar(0.0)
    if cfg.use_cmcr:
        reps = batch_representations(params, batch, vocab, train_mode=train_mode, rng=rng)
        l_cmcr = cmcr_loss(reps, cfg)

    L = l_cmcr + l_mlm
    return L, LossComponents(L=L, L_mlm=l_mlm, L_cmcr=l_cmcr)

"""
Cell-selection table QA over joint X_WT inputs.

A linear head scores every token of H; a data cell's probability is the
sigmoid of the mean score over the cell's surviving tokens. Header cells
and text tokens are not candidates.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

from utp.autograd import functional as F
from utp.autograd.tensor import Tensor
from utp.core.exceptions import CheckpointError, CorpusTooSmallError, GoldCellTruncatedError, LengthMismatchError
from utp.core.seeding import stream
from utp.models.config_models import ModelConfig, TrainConfig, qa_finetune_defaults
from utp.models.run_models import QAPrediction, StepRecord, TrainLog
from utp.models.table_models import QAExample
from utp.services.checkpoint_service import Checkpoint, save
from utp.services.encoder_service import EncoderParams, SerializedInput, forward, serialize_pair, truncated_normal
from utp.services.retrieval_service import parallel_map
from utp.services.tokenizer_service import Vocab
from utp.services.training_service import (
    AdamState,
    TrainLogWriter,
    _check_finite_loss,
    _progress_enabled,
    adamw_step,
)

logger = logging.getLogger(__name__)

HEAD_WEIGHT = "qa_head.weight"
HEAD_BIAS = "qa_head.bias"
THRESHOLD = 0.5

Cell = Tuple[int, int]


class CellSelectionHead:
    """Projection vector [d] and scalar bias giving one selection logit per token."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 1 or bias.size != 1:
            raise ValueError(f"head needs a [d] weight and a scalar bias, got {weight.shape} and {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, d: int, seed: int = 0) -> "CellSelectionHead":
        rng = stream(seed, "qa_head")
        weight = truncated_normal(rng, (d,))
        return cls(Tensor(weight, requires_grad=True), Tensor(0.0, requires_grad=True))

    @classmethod
    def zeros(cls, d: int) -> "CellSelectionHead":
        return cls(Tensor(np.zeros(d), requires_grad=True), Tensor(0.0, requires_grad=True))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CellSelectionHead":
        if HEAD_WEIGHT not in ckpt.extra or HEAD_BIAS not in ckpt.extra:
            raise CheckpointError("checkpoint carries no QA head; run finetune-qa first")
        return cls(ckpt.extra[HEAD_WEIGHT], ckpt.extra[HEAD_BIAS])

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(HEAD_WEIGHT, self.weight), (HEAD_BIAS, self.bias)]

    def clone(self) -> "CellSelectionHead":
        return CellSelectionHead(Tensor(self.weight.data, requires_grad=True),
                                 Tensor(self.bias.data, requires_grad=True))

    def to_extra(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.items())


@dataclass
class CellProbabilities:
    """Selection probability per candidate cell, aligned with ``cells``."""

    cells: List[Cell]
    probs: Tensor

    def as_dict(self) -> Dict[Cell, float]:
        return {c: float(p) for c, p in zip(self.cells, self.probs.data)}

    def selected(self, threshold: float = THRESHOLD) -> Set[Cell]:
        return {c for c, p in zip(self.cells, self.probs.data) if p >= threshold}


# ==================== Forward / loss ====================

def candidate_cells(x: SerializedInput) -> List[Cell]:
    """Data cells with at least one token in the sequence, in row-major order."""
    return sorted(cell for cell in x.cell_spans if cell[0] >= 1)


def serialize_example(ex: QAExample, vocab: Vocab, cfg: ModelConfig) -> SerializedInput:
    """X_WT of the example; every gold cell must survive truncation."""
    x = serialize_pair(ex.pair, "WT", vocab, cfg)
    lost = [cell for cell in ex.gold_set if cell not in x.cell_spans]
    if lost:
        raise GoldCellTruncatedError(f"example {ex.pair.id}: gold cells {sorted(lost)} do not fit in l={cfg.l}")
    return x


def check_examples(examples: Sequence[QAExample], vocab: Vocab, cfg: ModelConfig) -> None:
    for ex in examples:
        serialize_example(ex, vocab, cfg)


def qa_forward(
    params: EncoderParams,
    head: CellSelectionHead,
    ex: QAExample,
    vocab: Vocab,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> CellProbabilities:
    """Per-cell selection probabilities over the example's surviving data cells."""
    x = serialize_example(ex, vocab, params.cfg)
    H = forward(params, x, train_mode=train_mode, rng=rng)
    token_logits = F.matmul(H, F.reshape(head.weight, (params.cfg.d, 1)))
    cells = candidate_cells(x)
    averaging = np.zeros((len(cells), params.cfg.l))
    for i, cell in enumerate(cells):
        span = x.cell_spans[cell]
        averaging[i, span] = 1.0 / len(span)
    cell_logits = F.reshape(F.matmul(Tensor(averaging), token_logits), (len(cells),)) + head.bias
    return CellProbabilities(cells=cells, probs=F.sigmoid(cell_logits))


def qa_loss(probs: CellProbabilities, gold_cells) -> Tensor:
    """Mean binary cross-entropy over candidate cells; gold cells are the positives."""
    gold = {tuple(c) for c in gold_cells}
    targets = [1.0 if cell in gold else 0.0 for cell in probs.cells]
    return F.binary_cross_entropy(probs.probs, targets)


def denotation_accuracy(predictions: Sequence[Set[Cell]], golds: Sequence[Set[Cell]]) -> float:
    """Fraction of examples whose predicted cell set equals the gold set exactly."""
    if len(predictions) != len(golds):
        raise LengthMismatchError(f"{len(predictions)} predictions for {len(golds)} gold sets")
    if not golds:
        return 0.0
    hits = sum(1 for p, g in zip(predictions, golds) if {tuple(c) for c in p} == {tuple(c) for c in g})
    return hits / len(golds)


def predict_cells(params: EncoderParams, head: CellSelectionHead, ex: QAExample, vocab: Vocab) -> Set[Cell]:
    return qa_forward(params, head, ex, vocab).selected(THRESHOLD)


# ==================== Fine-tuning / evaluation ====================

def finetune_qa_run(
    ckpt: Checkpoint,
    examples: Sequence[QAExample],
    train_cfg: Optional[TrainConfig] = None,
    out_path=None,
    log_path=None,
    progress: bool = False,
) -> Tuple[Checkpoint, TrainLog]:
    """
    Train a fresh cell-selection head together with the encoder.

    Stops after ``max_steps`` steps when set. The returned checkpoint stores
    the head as extra tensors next to the encoder.

    Raises:
        NonFiniteLossError: the loss diverged; nothing is written to ``out_path``
    """
    train_cfg = train_cfg or qa_finetune_defaults()
    examples = list(examples)
    if not examples:
        raise CorpusTooSmallError("QA fine-tuning needs at least one example")
    check_examples(examples, ckpt.vocab, ckpt.config)

    params = ckpt.params.clone()
    head = CellSelectionHead.init(ckpt.config.d, train_cfg.seed)
    named = OrderedDict(list(params.items()) + head.items())
    state = AdamState()
    N = train_cfg.batch_size
    n_batches = (len(examples) + N - 1) // N
    total_steps = n_batches * train_cfg.epochs
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps)
    logger.info(f"QA fine-tuning on {len(examples)} examples for {total_steps} steps")

    def snapshot(step: int) -> Checkpoint:
        meta = dict(ckpt.meta, phase="finetune_qa", step=step)
        out = Checkpoint(config=ckpt.config, vocab=ckpt.vocab, params=params.clone(), meta=meta,
                         extra=head.clone().to_extra())
        if out_path is not None:
            save(out, out_path)
        return out

    step = 0
    bar = tqdm(total=total_steps, desc="finetune-qa", disable=not _progress_enabled(progress))
    with TrainLogWriter(log_path) as writer:
        try:
            for epoch in range(train_cfg.epochs):
                if step >= total_steps:
                    break
                order = stream(train_cfg.seed, "qa-shuffle", epoch).permutation(len(examples))
                for b in range(n_batches):
                    if step >= total_steps:
                        break
                    batch = [examples[i] for i in order[b * N:(b + 1) * N]]
                    rng = stream(train_cfg.seed, "qa-step", step + 1)
                    for _, t in named.items():
                        t.zero_grad()
                    L = Tensor.scalar(0.0)
                    for ex in batch:
                        L = L + qa_loss(qa_forward(params, head, ex, ckpt.vocab, True, rng), ex.gold_cells)
                    L = L * (1.0 / len(batch))
                    value = L.item()
                    _check_finite_loss(value, step + 1)
                    L.backward()
                    adamw_step(named, state=state, lr=train_cfg.learning_rate,
                               weight_decay=train_cfg.weight_decay)
                    step += 1
                    writer.step(StepRecord(step=step, L=value, L_qa=value, lr=train_cfg.learning_rate))
                    bar.update(1)
        finally:
            bar.close()

    out = snapshot(step)
    logger.info(f"QA fine-tuning finished after {step} steps")
    return out, writer.log


def finetune_qa(ckpt: Checkpoint, examples: Sequence[QAExample], train_cfg: Optional[TrainConfig] = None,
                **kwargs) -> Checkpoint:
    return finetune_qa_run(ckpt, examples, train_cfg, **kwargs)[0]


def evaluate_qa(
    ckpt: Checkpoint,
    examples: Sequence[QAExample],
    threads: Optional[int] = None,
) -> Tuple[Dict[str, float], List[QAPrediction]]:
    """Denotation accuracy of the checkpoint's head, with per-example predictions."""
    head = CellSelectionHead.from_checkpoint(ckpt)
    examples = list(examples)
    check_examples(examples, ckpt.vocab, ckpt.config)
    predicted = parallel_map(lambda ex: predict_cells(ckpt.params, head, ex, ckpt.vocab), examples, threads)
    golds = [ex.gold_set for ex in examples]
    accuracy = denotation_accuracy(predicted, golds)
    predictions = [
        QAPrediction(
            example_id=ex.pair.id,
            predicted_cells=[list(c) for c in sorted(p)],
            gold_cells=[list(c) for c in sorted(g)],
        )
        for ex, p, g in zip(examples, predicted, golds)
    ]
    logger.info(f"Denotation accuracy {accuracy:.4f} over {len(examples)} examples")
    return {"denotation_accuracy": accuracy, "n_examples": len(examples)}, predictions


def write_predictions(predictions: Sequence[QAPrediction], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in predictions:
            f.write(json.dumps(p.model_dump()) + "\n")

"""
Optimizer and training loops.

Pretraining minimizes L = L_cmcr + L_mlm over shuffled batches of pairs.
Retrieval fine-tuning trains the encoder as a bi-encoder: queries as X_W,
tables as X_T, in-batch InfoNCE with optional per-query hard negatives.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from utp.autograd import functional as F
from utp.autograd.tensor import Tensor
from utp.core.exceptions import (
    CorpusTooSmallError,
    HardNegativeError,
    NonFiniteGradientError,
    NonFiniteLossError,
)
from utp.core.seeding import stream
from utp.models.config_models import LossConfig, ModelConfig, TrainConfig, retrieval_finetune_defaults
from utp.models.run_models import EvalRecord, HardNegativeSet, StepRecord, TrainLog
from utp.models.table_models import Corpus, Table, TableTextPair
from utp.services.checkpoint_service import Checkpoint, save
from utp.services.encoder_service import EncoderParams, is_decay_exempt, serialize, serialize_pair
from utp.services.objective_service import infonce, represent, total_loss
from utp.services.retrieval_service import evaluate_dense
from utp.services.tokenizer_service import Vocab, build_vocab

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.utp"
TRAIN_LOG_NAME = "train_log.jsonl"
EVAL_KS = (1, 10, 50)


# ==================== AdamW ====================

@dataclass
class AdamState:
    """Step counter and first/second moment estimates per parameter name."""

    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params,
    grads: Optional[Mapping[str, np.ndarray]] = None,
    state: Optional[AdamState] = None,
    lr: float = 5e-5,
    weight_decay: float = 0.01,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """
    One AdamW update, in place on ``params``.

    Args:
        params: Anything with ``items()`` yielding (name, Tensor)
        grads: Gradients by name; defaults to each tensor's ``grad``
        state: Moments from previous steps; a fresh state on the first step
        lr: Learning rate
        weight_decay: Decoupled decay, skipped for biases and layernorm parameters

    Returns:
        The updated state

    Raises:
        NonFiniteGradientError: Some gradient holds NaN or inf; nothing is updated
    """
    state = state if state is not None else AdamState()
    named = list(params.items())
    resolved: Dict[str, np.ndarray] = {}
    for name, p in named:
        g = grads[name] if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            logger.error(f"Non-finite gradient in {name}")
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name}")
        resolved[name] = g

    beta1, beta2 = betas
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in named:
        g = resolved[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        if weight_decay and not is_decay_exempt(name):
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ==================== Logging ====================

class TrainLogWriter:
    """Streams step and eval records as JSONL while keeping them in a TrainLog."""

    def __init__(self, path=None):
        self.log = TrainLog()
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8", newline="\n")

    def step(self, record: StepRecord) -> None:
        self.log.steps.append(record)
        self._write(record.model_dump())

    def eval(self, record: EvalRecord) -> None:
        self.log.evals.append(record)
        self._write(record.model_dump())

    def _write(self, row: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TrainLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_train_log(path) -> TrainLog:
    log = TrainLog()
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            if "metrics" in row:
                log.evals.append(EvalRecord(**row))
            else:
                log.steps.append(StepRecord(**row))
    return log


def _progress_enabled(progress: bool) -> bool:
    return progress and logging.getLogger("utp").getEffectiveLevel() <= logging.INFO


# ==================== Pretraining ====================

def _check_finite_loss(value: float, step: int) -> None:
    if not np.isfinite(value):
        logger.error(f"Loss became {value} at step {step}")
        raise NonFiniteLossError(f"non-finite loss {value} at step {step}")


def pretrain(
    corpus: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    vocab: Optional[Vocab] = None,
    out_dir=None,
    dev: Optional[Corpus] = None,
    log_path=None,
    progress: bool = False,
) -> Tuple[Checkpoint, TrainLog]:
    """
    Multi-task pretraining of a freshly initialized encoder.

    Batches are drawn from a seeded per-epoch shuffle; incomplete trailing
    batches are dropped. With ``out_dir`` set, a checkpoint is written every
    ``eval_every`` steps and at the end, and the step log streams to
    ``train_log.jsonl`` there unless ``log_path`` says otherwise.

    Returns:
        (final checkpoint, training log)

    Raises:
        CorpusTooSmallError: fewer pairs than one batch
        NonFiniteLossError: the loss diverged; the last checkpoint written (initial or
            eval_every) is left in place
    """
    loss_cfg = (loss_cfg or LossConfig()).model_copy(update={"tau": train_cfg.tau})
    vocab = vocab if vocab is not None else build_vocab(corpus)
    if model_cfg.V != len(vocab):
        model_cfg = model_cfg.model_copy(update={"V": len(vocab)})
    pairs = corpus.pairs
    n_batches = len(pairs) // train_cfg.batch_size
    if n_batches == 0:
        raise CorpusTooSmallError(
            f"corpus of {len(pairs)} pairs is smaller than one batch of {train_cfg.batch_size}"
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    if log_path is None and out_dir is not None:
        log_path = out_dir / TRAIN_LOG_NAME
    params = EncoderParams.init(model_cfg)
    state = AdamState()
    total_steps = n_batches * train_cfg.epochs
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps)
    logger.info(
        f"Pretraining on {len(pairs)} pairs: {n_batches} batches x {train_cfg.epochs} epochs, "
        f"lr={train_cfg.learning_rate}, tau={loss_cfg.tau}"
    )

    def snapshot(step: int) -> Checkpoint:
        meta = {"phase": "pretrain", "similarity": loss_cfg.similarity, "tau": loss_cfg.tau, "step": step}
        ckpt = Checkpoint(config=model_cfg, vocab=vocab, params=params.clone(), meta=meta)
        if out_dir is not None:
            save(ckpt, out_dir / CHECKPOINT_NAME)
        return ckpt

    step = 0
    if out_dir is not None:
        snapshot(step)
    bar = tqdm(total=total_steps, desc="pretrain", disable=not _progress_enabled(progress))
    with TrainLogWriter(log_path) as writer:
        try:
            for epoch in range(train_cfg.epochs):
                order = stream(train_cfg.seed, "shuffle", epoch).permutation(len(pairs))
                for b in range(n_batches):
                    if train_cfg.max_steps and step >= train_cfg.max_steps:
                        break
                    batch = [pairs[i] for i in order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
                    rng = stream(train_cfg.seed, "step", step + 1)
                    params.zero_grad()
                    L, parts = total_loss(params, batch, loss_cfg, rng, vocab, train_mode=True)
                    values = parts.as_floats()
                    _check_finite_loss(values["L"], step + 1)
                    L.backward()
                    adamw_step(params, state=state, lr=train_cfg.learning_rate,
                               weight_decay=train_cfg.weight_decay)
                    step += 1
                    writer.step(StepRecord(step=step, lr=train_cfg.learning_rate, **values))
                    logger.debug(f"step {step}: L={values['L']:.6f}")
                    bar.update(1)
                    bar.set_postfix(L=f"{values['L']:.4f}")

                    if train_cfg.eval_every and step % train_cfg.eval_every == 0:
                        if dev is not None and len(dev):
                            metrics = evaluate_dense(params, vocab, dev.pairs, EVAL_KS, loss_cfg.similarity)
                            writer.eval(EvalRecord(step=step, metrics=metrics))
                            logger.info(f"step {step}: dev {metrics}")
                        snapshot(step)
                logger.info(f"Epoch {epoch + 1}/{train_cfg.epochs} finished at step {step}")
        finally:
            bar.close()

    ckpt = snapshot(step)
    logger.info(f"Pretraining finished after {step} steps")
    return ckpt, writer.log


# ==================== Retrieval fine-tuning ====================

def _negatives_map(hard_negatives) -> Dict[str, List[str]]:
    if hard_negatives is None:
        return {}
    if isinstance(hard_negatives, HardNegativeSet):
        return dict(hard_negatives.negatives)
    return {q: list(ids) for q, ids in hard_negatives.items()}


def validate_hard_negatives(
    hard_negatives,
    train_pairs: Sequence[TableTextPair],
    table_ids: Iterable[str],
) -> Dict[str, List[str]]:
    """
    Check mined negatives against the table pool.

    Raises:
        HardNegativeError: a negative is unknown or equals its query's gold table
    """
    negatives = _negatives_map(hard_negatives)
    known = set(table_ids)
    query_ids = {p.id for p in train_pairs}
    for qid, ids in negatives.items():
        if qid not in query_ids:
            continue
        for tid in ids:
            if tid == qid:
                raise HardNegativeError(f"hard negative {tid} for query {qid} is its gold table")
            if tid not in known:
                raise HardNegativeError(f"hard negative {tid} for query {qid} is not in the table pool")
    return negatives


def retrieval_loss(
    params: EncoderParams,
    vocab: Vocab,
    batch: Sequence[TableTextPair],
    loss_cfg: LossConfig,
    negatives: Mapping[str, List[str]],
    tables: Mapping[str, Table],
    rng: Optional[np.random.Generator] = None,
    train_mode: bool = True,
) -> Tensor:
    """In-batch InfoNCE of r_w against r_t, each query's hard negatives appended to its own row."""
    rng = rng if train_mode else None
    r_w = F.stack([
        represent(params, serialize_pair(p, "W", vocab, params.cfg), train_mode=train_mode, rng=rng)
        for p in batch
    ])
    r_t = F.stack([
        represent(params, serialize_pair(p, "T", vocab, params.cfg), train_mode=train_mode, rng=rng)
        for p in batch
    ])
    extras: List[Optional[Tensor]] = []
    for p in batch:
        ids = negatives.get(p.id, [])
        if ids:
            extras.append(F.stack([
                represent(params, serialize(None, tables[t], "T", vocab, params.cfg), train_mode=train_mode, rng=rng)
                for t in ids
            ]))
        else:
            extras.append(None)
    return infonce(r_w, r_t, loss_cfg, extra_negatives=extras)


def finetune_retrieval_run(
    ckpt: Checkpoint,
    train_pairs: Sequence[TableTextPair],
    train_cfg: Optional[TrainConfig] = None,
    hard_negatives: Union[HardNegativeSet, Mapping[str, Sequence[str]], None] = None,
    loss_cfg: Optional[LossConfig] = None,
    table_pool: Optional[Sequence[Tuple[str, Table]]] = None,
    dev_pairs: Optional[Sequence[TableTextPair]] = None,
    out_path=None,
    log_path=None,
    progress: bool = False,
) -> Tuple[Checkpoint, TrainLog]:
    """
    Bi-encoder fine-tuning of a pretrained checkpoint; MLM is off.

    ``table_pool`` supplies the tables hard negatives refer to; it defaults
    to the training pairs' own tables. Partial final batches are kept.
    ``hard_negatives_per_query`` > 0 caps the negatives used per query.
    On a non-finite loss the checkpoint at ``out_path`` keeps the last saved
    parameters and NonFiniteLossError propagates.
    """
    train_cfg = train_cfg or retrieval_finetune_defaults()
    loss_cfg = (loss_cfg or LossConfig(similarity=ckpt.similarity)).model_copy(update={"tau": train_cfg.tau})
    pairs = list(train_pairs)
    if not pairs:
        raise CorpusTooSmallError("retrieval fine-tuning needs at least one pair")
    pool = list(table_pool) if table_pool is not None else [(p.id, p.table) for p in pairs]
    tables = dict(pool)
    negatives = validate_hard_negatives(hard_negatives, pairs, tables)
    if train_cfg.hard_negatives_per_query:
        negatives = {q: ids[:train_cfg.hard_negatives_per_query] for q, ids in negatives.items()}

    params = ckpt.params.clone()
    state = AdamState()
    N = train_cfg.batch_size
    n_batches = (len(pairs) + N - 1) // N
    total_steps = n_batches * train_cfg.epochs
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps)
    logger.info(
        f"Retrieval fine-tuning on {len(pairs)} pairs, {sum(len(v) for v in negatives.values())} hard negatives, "
        f"{total_steps} steps"
    )

    def snapshot(step: int) -> Checkpoint:
        meta = {"phase": "finetune_retrieval", "similarity": loss_cfg.similarity, "tau": loss_cfg.tau,
                "step": step}
        out = Checkpoint(config=ckpt.config, vocab=ckpt.vocab, params=params.clone(), meta=meta)
        if out_path is not None:
            save(out, out_path)
        return out

    step = 0
    if out_path is not None:
        snapshot(step)
    bar = tqdm(total=total_steps, desc="finetune", disable=not _progress_enabled(progress))
    with TrainLogWriter(log_path) as writer:
        try:
            for epoch in range(train_cfg.epochs):
                if train_cfg.max_steps and step >= train_cfg.max_steps:
                    break
                order = stream(train_cfg.seed, "finetune-shuffle", epoch).permutation(len(pairs))
                for b in range(n_batches):
                    if train_cfg.max_steps and step >= train_cfg.max_steps:
                        break
                    batch = [pairs[i] for i in order[b * N:(b + 1) * N]]
                    rng = stream(train_cfg.seed, "finetune-step", step + 1)
                    params.zero_grad()
                    L = retrieval_loss(params, ckpt.vocab, batch, loss_cfg, negatives, tables, rng)
                    value = L.item()
                    _check_finite_loss(value, step + 1)
                    L.backward()
                    adamw_step(params, state=state, lr=train_cfg.learning_rate,
                               weight_decay=train_cfg.weight_decay)
                    step += 1
                    writer.step(StepRecord(step=step, L=value, L_retrieval=value, lr=train_cfg.learning_rate))
                    bar.update(1)

                    if train_cfg.eval_every and step % train_cfg.eval_every == 0:
                        if dev_pairs:
                            metrics = evaluate_dense(params, ckpt.vocab, dev_pairs, EVAL_KS, loss_cfg.similarity)
                            writer.eval(EvalRecord(step=step, metrics=metrics))
                            logger.info(f"step {step}: dev {metrics}")
                        snapshot(step)
        finally:
            bar.close()

    out = snapshot(step)
    logger.info(f"Retrieval fine-tuning finished after {step} steps")
    return out, writer.log


def finetune_retrieval(
    ckpt: Checkpoint,
    train_pairs: Sequence[TableTextPair],
    train_cfg: Optional[TrainConfig] = None,
    hard_negatives=None,
    **kwargs,
) -> Checkpoint:
    """Fine-tuned checkpoint; see ``finetune_retrieval_run`` for the options."""
    return finetune_retrieval_run(ckpt, train_pairs, train_cfg, hard_negatives, **kwargs)[0]

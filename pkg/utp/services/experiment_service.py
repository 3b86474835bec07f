"""Multi-run experiments: temperature sweep, objective ablations and the hard-negative comparison."""

import logging
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from utp.models.config_models import LossConfig, ModelConfig, TrainConfig, retrieval_finetune_defaults
from utp.models.table_models import Corpus
from utp.services.checkpoint_service import Checkpoint
from utp.services.retrieval_service import evaluate_dense, mine_hard_negatives
from utp.services.tokenizer_service import build_vocab
from utp.services.training_service import finetune_retrieval, pretrain

logger = logging.getLogger(__name__)

DEFAULT_TAUS = (0.01, 0.05, 0.1, 1.0)
EVAL_KS = (1, 10, 50)

# Loss-config overrides per ablation variant; "full" is the multi-task objective.
ABLATIONS: Dict[str, Dict] = {
    "full": {},
    "mlm_only": {"use_cmcr": False},
    "cmcr_only": {"use_mlm": False},
    "no_t_w": {"cmcr_terms": ["t_wt", "wt_w"]},
    "no_t_wt": {"cmcr_terms": ["t_w", "wt_w"]},
    "no_wt_w": {"cmcr_terms": ["t_w", "t_wt"]},
    "mlm_wt_only": {"mlm_modalities": ["WT"]},
}


class ExperimentRow(BaseModel):
    """Dev metrics of one pretrain + fine-tune run."""

    variant: str = Field(..., description="Ablation variant or temperature label")
    tau: float = Field(..., description="Temperature used in both phases")
    seed: int = Field(..., description="Seed of this run")
    metrics: Dict[str, float] = Field(default_factory=dict)

    def flat(self) -> Dict:
        row = {"variant": self.variant, "tau": self.tau, "seed": self.seed}
        row.update(self.metrics)
        return row


def _finetune_and_eval(ckpt: Checkpoint, train: Corpus, dev: Corpus, cfg: TrainConfig, loss_cfg: LossConfig,
                       hard_negatives=None) -> Dict[str, float]:
    tuned = finetune_retrieval(ckpt, train.pairs, cfg, hard_negatives,
                               loss_cfg=loss_cfg.model_copy(update={"tau": cfg.tau}))
    return evaluate_dense(tuned.params, tuned.vocab, dev.pairs, EVAL_KS, tuned.similarity)


def pretrain_finetune_eval(
    train: Corpus,
    dev: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    finetune_cfg: Optional[TrainConfig] = None,
) -> Dict[str, float]:
    """
    Pretrain on ``train``, optionally fine-tune for retrieval, and report dev R@K.

    The vocabulary covers train and dev so dev queries are not all [UNK].
    """
    vocab = build_vocab(Corpus(pairs=list(train.pairs) + list(dev.pairs)))
    ckpt, _ = pretrain(train, model_cfg, train_cfg, loss_cfg, vocab=vocab)
    if finetune_cfg is not None:
        return _finetune_and_eval(ckpt, train, dev, finetune_cfg, loss_cfg)
    return evaluate_dense(ckpt.params, ckpt.vocab, dev.pairs, EVAL_KS, ckpt.similarity)


def _finetune_cfg(epochs: int, seed: int, tau: float) -> Optional[TrainConfig]:
    if epochs <= 0:
        return None
    return retrieval_finetune_defaults(epochs=epochs, seed=seed, tau=tau, batch_size=16, learning_rate=1e-3)


def tau_sweep(
    train: Corpus,
    dev: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    taus: Sequence[float] = DEFAULT_TAUS,
    loss_cfg: Optional[LossConfig] = None,
    finetune_epochs: int = 0,
) -> List[ExperimentRow]:
    """One model per temperature, identical in everything else."""
    loss_cfg = loss_cfg or LossConfig()
    rows: List[ExperimentRow] = []
    for tau in taus:
        cfg = train_cfg.model_copy(update={"tau": tau})
        metrics = pretrain_finetune_eval(
            train, dev, model_cfg, cfg, loss_cfg, _finetune_cfg(finetune_epochs, cfg.seed, tau)
        )
        rows.append(ExperimentRow(variant=f"tau={tau:g}", tau=tau, seed=cfg.seed, metrics=metrics))
        logger.info(f"tau={tau:g}: dev R@1={metrics['R@1']:.4f}")
    return rows


def ablate(
    train: Corpus,
    dev: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = tuple(ABLATIONS),
    loss_cfg: Optional[LossConfig] = None,
    finetune_epochs: int = 0,
) -> List[ExperimentRow]:
    """Each variant under each seed with the same budget; the seed drives init, shuffling and masking."""
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {sorted(ABLATIONS)}")
    base = loss_cfg or LossConfig()
    rows: List[ExperimentRow] = []
    for seed in seeds:
        mcfg = model_cfg.model_copy(update={"seed": seed})
        tcfg = train_cfg.model_copy(update={"seed": seed})
        for variant in variants:
            lcfg = base.model_copy(update=ABLATIONS[variant])
            metrics = pretrain_finetune_eval(
                train, dev, mcfg, tcfg, lcfg, _finetune_cfg(finetune_epochs, seed, tcfg.tau)
            )
            rows.append(ExperimentRow(variant=variant, tau=tcfg.tau, seed=seed, metrics=metrics))
            logger.info(f"seed={seed} {variant}: dev R@1={metrics['R@1']:.4f}")
    return rows


def directional_wins(rows: Sequence[ExperimentRow], variant: str, baseline: str, metric: str = "R@1") -> int:
    """Number of seeds where ``variant`` scores at least as high as ``baseline``."""
    by_seed: Dict[int, Dict[str, float]] = {}
    for row in rows:
        by_seed.setdefault(row.seed, {})[row.variant] = row.metrics[metric]
    return sum(1 for scores in by_seed.values()
               if variant in scores and baseline in scores and scores[variant] >= scores[baseline])


def hard_negative_comparison(
    train: Corpus,
    dev: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int],
    per_query: int = 8,
    loss_cfg: Optional[LossConfig] = None,
    finetune_epochs: int = 20,
) -> List[ExperimentRow]:
    """
    Retrieval fine-tuning with and without mined hard negatives.

    Per seed, one pretrained checkpoint mines ``per_query`` negatives over
    the training tables and is then fine-tuned twice on the same budget:
    variant "no_hn" without negatives, "hn" with them.
    """
    if finetune_epochs < 1:
        raise ValueError("the comparison needs at least one fine-tuning epoch")
    loss_cfg = loss_cfg or LossConfig()
    vocab = build_vocab(Corpus(pairs=list(train.pairs) + list(dev.pairs)))
    rows: List[ExperimentRow] = []
    for seed in seeds:
        mcfg = model_cfg.model_copy(update={"seed": seed})
        tcfg = train_cfg.model_copy(update={"seed": seed})
        ckpt, _ = pretrain(train, mcfg, tcfg, loss_cfg, vocab=vocab)
        negatives = mine_hard_negatives(ckpt, train.pairs, per_query)
        ft_plain = _finetune_cfg(finetune_epochs, seed, tcfg.tau)
        ft_hard = ft_plain.model_copy(update={"hard_negatives_per_query": per_query})
        for variant, cfg, hn in (("no_hn", ft_plain, None), ("hn", ft_hard, negatives)):
            metrics = _finetune_and_eval(ckpt, train, dev, cfg, loss_cfg, hn)
            rows.append(ExperimentRow(variant=variant, tau=tcfg.tau, seed=seed, metrics=metrics))
            logger.info(f"seed={seed} {variant}: dev R@1={metrics['R@1']:.4f}")
    return rows

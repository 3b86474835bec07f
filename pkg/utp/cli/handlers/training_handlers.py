import logging
from pathlib import Path

import click

from utp.cli.utils.runs import (
    MANIFEST_NAME,
    RunRecorder,
    default_out,
    echo_json,
    load_config,
    manifest_for_file,
    override,
    parse_floats,
    parse_ints,
    resolve_seed,
)
from utp.models.config_models import qa_finetune_defaults, retrieval_finetune_defaults
from utp.services.checkpoint_service import load_checkpoint
from utp.services.corpus_service import read_corpus, read_qa_corpus, split_corpus
from utp.services.experiment_service import (
    ABLATIONS,
    DEFAULT_TAUS,
    ablate as run_ablation,
    directional_wins,
    hard_negative_comparison,
    tau_sweep as run_sweep,
)
from utp.services.qa_service import finetune_qa_run
from utp.services.retrieval_service import read_hard_negatives, write_metrics
from utp.services.tokenizer_service import build_vocab, write_vocab
from utp.services.training_service import (
    CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    finetune_retrieval_run,
    pretrain as run_pretrain,
)

logger = logging.getLogger(__name__)

VOCAB_NAME = "vocab.txt"


def _train_log_for(out: Path) -> Path:
    return out.with_name(out.stem + ".train_log.jsonl")


def _split(corpus, dev_fraction: float, seed: int):
    if dev_fraction <= 0:
        return corpus, None
    return split_corpus(corpus, dev_fraction, seed)


@click.command("pretrain")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON with model/loss/train sections; flags override it")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--tau", type=float, default=None, help="InfoNCE temperature (default 0.05)")
@click.option("--similarity", type=click.Choice(["dot", "cosine"]), default=None)
@click.option("--eval-every", type=click.IntRange(min=0), default=None)
@click.option("--max-steps", type=click.IntRange(min=0), default=None)
@click.option("--dev-fraction", type=float, default=0.0, show_default=True,
              help="Hold out this share of pairs for dev evaluation")
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
@click.option("--progress/--no-progress", default=True)
def pretrain(corpus_path, config_path, out, batch_size, learning_rate, epochs, weight_decay, tau, similarity,
             eval_every, max_steps, dev_fraction, seed, progress):
    """Pretrain an encoder with universal MLM and cross-modal contrastive regularization."""
    seed = resolve_seed(seed)
    cfg = load_config(config_path)
    train_cfg = override(cfg.train, batch_size=batch_size, learning_rate=learning_rate, epochs=epochs,
                         weight_decay=weight_decay, tau=tau, eval_every=eval_every, max_steps=max_steps, seed=seed)
    loss_cfg = override(cfg.loss, similarity=similarity, tau=train_cfg.tau)
    out_dir = default_out(out, "pretrain")
    run = RunRecorder("pretrain", seed, [corpus_path, config_path])

    corpus = read_corpus(corpus_path, split_seed=seed)
    vocab = build_vocab(corpus)
    model_cfg = cfg.model.model_copy(update={"V": len(vocab)})
    train, dev = _split(corpus, dev_fraction, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vocab(vocab, out_dir / VOCAB_NAME)

    ckpt, log = run_pretrain(train, model_cfg, train_cfg, loss_cfg, vocab=vocab, out_dir=out_dir, dev=dev,
                             progress=progress)
    run.finish(
        out_dir / MANIFEST_NAME,
        config={"model": model_cfg.model_dump(), "loss": loss_cfg.model_dump(), "train": train_cfg.model_dump(),
                "dev_fraction": dev_fraction},
        outputs=[out_dir / CHECKPOINT_NAME, out_dir / TRAIN_LOG_NAME, out_dir / VOCAB_NAME],
        extra={"steps": len(log.steps), "final_loss": log.steps[-1].L if log.steps else None},
    )
    echo_json({"checkpoint": str(out_dir / CHECKPOINT_NAME), "steps": len(log.steps),
               "final_loss": log.steps[-1].L if log.steps else None})


@click.command("finetune-retrieval")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pairs", "pairs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--hard-negatives", "negatives_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Output of mine-negatives")
@click.option("--tables", "tables_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Corpus whose tables the hard negatives refer to (default: --pairs)")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Fine-tuned checkpoint path")
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--negatives-per-query", "hard_negatives_per_query", type=click.IntRange(min=0), default=None)
@click.option("--max-steps", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
@click.option("--progress/--no-progress", default=True)
def finetune_retrieval(ckpt_path, pairs_path, negatives_path, tables_path, config_path, out, batch_size,
                       learning_rate, epochs, weight_decay, tau, hard_negatives_per_query, max_steps, seed, progress):
    """Fine-tune a checkpoint as a text-to-table bi-encoder."""
    seed = resolve_seed(seed)
    base = load_config(config_path).train if config_path else retrieval_finetune_defaults()
    train_cfg = override(base, batch_size=batch_size, learning_rate=learning_rate, epochs=epochs,
                         weight_decay=weight_decay, tau=tau, hard_negatives_per_query=hard_negatives_per_query,
                         max_steps=max_steps, seed=seed)
    out_path = Path(out) if out else default_out(None, "finetune-retrieval") / CHECKPOINT_NAME
    run = RunRecorder("finetune-retrieval", seed, [ckpt_path, pairs_path, negatives_path, tables_path, config_path])

    ckpt = load_checkpoint(ckpt_path)
    pairs = read_corpus(pairs_path).pairs
    pool_pairs = read_corpus(tables_path).pairs if tables_path else pairs
    negatives = read_hard_negatives(negatives_path) if negatives_path else None
    log_path = _train_log_for(out_path)

    tuned, log = finetune_retrieval_run(
        ckpt, pairs, train_cfg, negatives, table_pool=[(p.id, p.table) for p in pool_pairs],
        out_path=out_path, log_path=log_path, progress=progress,
    )
    run.finish(
        manifest_for_file(out_path),
        config={"train": train_cfg.model_dump(), "similarity": tuned.similarity},
        outputs=[out_path, log_path],
        extra={"steps": len(log.steps)},
    )
    echo_json({"checkpoint": str(out_path), "steps": len(log.steps)})


@click.command("finetune-qa")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--qa", "qa_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Checkpoint with QA head")
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--max-steps", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
@click.option("--progress/--no-progress", default=True)
def finetune_qa(ckpt_path, qa_path, out, batch_size, learning_rate, max_steps, seed, progress):
    """Train a cell-selection head (and the encoder) on QA examples."""
    seed = resolve_seed(seed)
    train_cfg = override(qa_finetune_defaults(), batch_size=batch_size, learning_rate=learning_rate,
                         max_steps=max_steps, seed=seed)
    out_path = Path(out) if out else default_out(None, "finetune-qa") / CHECKPOINT_NAME
    run = RunRecorder("finetune-qa", seed, [ckpt_path, qa_path])

    ckpt = load_checkpoint(ckpt_path)
    examples = read_qa_corpus(qa_path)
    log_path = _train_log_for(out_path)
    _, log = finetune_qa_run(ckpt, examples, train_cfg, out_path=out_path, log_path=log_path, progress=progress)
    run.finish(manifest_for_file(out_path), config={"train": train_cfg.model_dump()},
               outputs=[out_path, log_path], extra={"steps": len(log.steps)})
    echo_json({"checkpoint": str(out_path), "steps": len(log.steps)})


def _experiment_inputs(corpus_path, config_path, dev_fraction, seed):
    cfg = load_config(config_path)
    corpus = read_corpus(corpus_path, split_seed=seed)
    train, dev = split_corpus(corpus, dev_fraction, seed)
    return cfg, train, dev


@click.command("tau-sweep")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--taus", default=",".join(f"{t:g}" for t in DEFAULT_TAUS), show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--finetune-epochs", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--dev-fraction", type=float, default=0.2, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
def tau_sweep(corpus_path, taus, config_path, epochs, finetune_epochs, dev_fraction, out, seed):
    """Train one small model per temperature and tabulate dev R@1."""
    seed = resolve_seed(seed)
    tau_values = parse_floats(taus)
    if not tau_values or any(t <= 0 for t in tau_values):
        raise click.BadParameter("temperatures must be positive", param_hint="--taus")
    out_dir = default_out(out, "tau-sweep")
    run = RunRecorder("tau-sweep", seed, [corpus_path, config_path])
    cfg, train, dev = _experiment_inputs(corpus_path, config_path, dev_fraction, seed)
    train_cfg = override(cfg.train, epochs=epochs, seed=seed)

    rows = run_sweep(train, dev, cfg.model, train_cfg, tau_values, cfg.loss, finetune_epochs)
    table = [row.flat() for row in rows]
    metrics_path = out_dir / "tau_sweep.json"
    write_metrics({"rows": table}, metrics_path)
    run.finish(
        out_dir / MANIFEST_NAME,
        config={"model": cfg.model.model_dump(), "loss": cfg.loss.model_dump(), "train": train_cfg.model_dump(),
                "taus": tau_values, "finetune_epochs": finetune_epochs, "dev_fraction": dev_fraction},
        outputs=[metrics_path],
        extra={"seeds": {f"{r.tau:g}": r.seed for r in rows}},
    )
    for row in table:
        click.echo(f"tau={row['tau']:<6g} R@1={row['R@1']:.4f} R@10={row['R@10']:.4f} R@50={row['R@50']:.4f}")


@click.command("ablate")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--variants", default=",".join(ABLATIONS), show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--finetune-epochs", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--dev-fraction", type=float, default=0.2, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def ablate(corpus_path, seeds, variants, config_path, epochs, finetune_epochs, dev_fraction, out):
    """Pretrain the full objective and each ablation on the same budget; report dev R@K."""
    seed_list = parse_ints(seeds)
    variant_list = [v.strip() for v in variants.split(",") if v.strip()]
    unknown = [v for v in variant_list if v not in ABLATIONS]
    if unknown:
        raise click.BadParameter(f"unknown variants {unknown}", param_hint="--variants")
    out_dir = default_out(out, "ablate")
    run = RunRecorder("ablate", seed_list[0], [corpus_path, config_path])
    cfg, train, dev = _experiment_inputs(corpus_path, config_path, dev_fraction, seed_list[0])
    train_cfg = override(cfg.train, epochs=epochs)

    rows = run_ablation(train, dev, cfg.model, train_cfg, seed_list, variant_list, cfg.loss, finetune_epochs)
    table = [row.flat() for row in rows]
    metrics_path = out_dir / "ablation.json"
    write_metrics({"rows": table}, metrics_path)
    run.finish(
        out_dir / MANIFEST_NAME,
        config={"model": cfg.model.model_dump(), "loss": cfg.loss.model_dump(), "train": train_cfg.model_dump(),
                "seeds": seed_list, "variants": variant_list, "finetune_epochs": finetune_epochs,
                "dev_fraction": dev_fraction},
        outputs=[metrics_path],
    )
    for row in table:
        click.echo(f"seed={row['seed']} {row['variant']:<12} R@1={row['R@1']:.4f} R@10={row['R@10']:.4f}")
    if "full" in variant_list and "mlm_only" in variant_list:
        wins = directional_wins(rows, "full", "mlm_only")
        click.echo(f"full >= mlm_only on R@1 in {wins}/{len(seed_list)} seeds")


@click.command("hn-compare")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--negatives", "per_query", type=click.IntRange(min=1), default=8, show_default=True,
              help="Mined negatives per query")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None, help="Pretraining epochs")
@click.option("--finetune-epochs", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--dev-fraction", type=float, default=0.2, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def hn_compare(corpus_path, seeds, per_query, config_path, epochs, finetune_epochs, dev_fraction, out):
    """Fine-tune with and without mined hard negatives per seed; report dev R@K."""
    seed_list = parse_ints(seeds)
    out_dir = default_out(out, "hn-compare")
    run = RunRecorder("hn-compare", seed_list[0], [corpus_path, config_path])
    cfg, train, dev = _experiment_inputs(corpus_path, config_path, dev_fraction, seed_list[0])
    train_cfg = override(cfg.train, epochs=epochs)

    rows = hard_negative_comparison(train, dev, cfg.model, train_cfg, seed_list, per_query, cfg.loss,
                                    finetune_epochs)
    wins = directional_wins(rows, "hn", "no_hn")
    table = [row.flat() for row in rows]
    metrics_path = out_dir / "hard_negatives.json"
    write_metrics({"rows": table, "hn_wins": wins, "n_seeds": len(seed_list)}, metrics_path)
    run.finish(
        out_dir / MANIFEST_NAME,
        config={"model": cfg.model.model_dump(), "loss": cfg.loss.model_dump(), "train": train_cfg.model_dump(),
                "seeds": seed_list, "negatives_per_query": per_query, "finetune_epochs": finetune_epochs,
                "dev_fraction": dev_fraction},
        outputs=[metrics_path],
    )
    for row in table:
        click.echo(f"seed={row['seed']} {row['variant']:<6} R@1={row['R@1']:.4f} R@10={row['R@10']:.4f}")
    click.echo(f"hn >= no_hn on R@1 in {wins}/{len(seed_list)} seeds")

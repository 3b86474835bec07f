import logging
from pathlib import Path

import click

from utp.autograd.gradcheck import gradcheck as run_gradcheck
from utp.cli.utils.runs import (
    MANIFEST_NAME,
    RunRecorder,
    default_out,
    echo_json,
    load_config,
    manifest_for_file,
    override,
    parse_ints,
    resolve_seed,
)
from utp.core.seeding import stream
from utp.models.config_models import LossConfig, ModelConfig
from utp.services.checkpoint_service import Checkpoint, load_checkpoint
from utp.services.corpus_service import generate_synthetic, read_corpus, read_qa_corpus
from utp.services.encoder_service import EncoderParams
from utp.services.objective_service import total_loss
from utp.services.qa_service import evaluate_qa, write_predictions
from utp.services.retrieval_service import (
    bm25_run,
    build_index,
    dense_run,
    metrics_record,
    mine_hard_negatives,
    recall_at_k,
    write_hard_negatives,
    write_metrics,
    write_run,
)
from utp.services.tokenizer_service import build_vocab

logger = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-4
# Entries with |a| + |n| below the floor are compared against the floor instead.
GRADCHECK_FLOOR = 1e-4
# Tensors up to this size (biases, layernorm) are checked entry by entry.
GRADCHECK_EXHAUSTIVE = 64
# Small enough for a full finite-difference pass over every sampled entry.
GRADCHECK_MODEL = dict(d=16, n_layers=2, n_heads=2, d_ff=32, l=32, n_columns=8, n_rows=8, n_ranks=8,
                       n_cell_tokens=8, dropout=0.0)


@click.command("eval-retrieval")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--pairs", "pairs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tables", "tables_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Corpus providing the table pool (default: the tables of --pairs)")
@click.option("--k", "ks", default="1,10,50", show_default=True, help="Comma-separated cutoffs")
@click.option("--bm25", is_flag=True, help="Rank with BM25 instead of the encoder")
@click.option("--untrained", is_flag=True, help="Evaluate a freshly initialized encoder")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Model config for --untrained")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for metrics and run files")
@click.option("--seed", type=int, default=None, help="Init seed for --untrained; defaults to UTP_SEED")
def eval_retrieval(ckpt_path, pairs_path, tables_path, ks, bm25, untrained, config_path, out, seed):
    """Rank tables for every text query and report R@K."""
    seed = resolve_seed(seed)
    cutoffs = parse_ints(ks)
    if any(k < 1 for k in cutoffs):
        raise click.BadParameter("cutoffs must be at least 1", param_hint="--k")
    if not (bm25 or untrained or ckpt_path):
        raise click.UsageError("give --ckpt, or use --bm25 or --untrained")
    out_dir = default_out(out, "eval-retrieval")
    run = RunRecorder("eval-retrieval", seed, [ckpt_path, pairs_path, tables_path, config_path])

    pairs = read_corpus(pairs_path).pairs
    pool = read_corpus(tables_path).pairs if tables_path else pairs
    tables = [(p.id, p.table) for p in pool]
    k_max = max(cutoffs)

    if bm25:
        scorer = "bm25"
        ranking = bm25_run(pairs, tables, k_max)
    else:
        if untrained:
            scorer = "untrained"
            vocab = build_vocab(read_corpus(pairs_path))
            model_cfg = override(load_config(config_path).model, V=len(vocab), seed=seed)
            ckpt = Checkpoint(config=model_cfg, vocab=vocab, params=EncoderParams.init(model_cfg),
                              meta={"phase": "untrained", "similarity": "dot"})
        else:
            scorer = "dense"
            ckpt = load_checkpoint(ckpt_path)
        index = build_index(ckpt, tables)
        ranking = dense_run(ckpt, pairs, index, k_max)

    metrics = metrics_record(recall_at_k(ranking, {p.id: p.id for p in pairs}, cutoffs), len(pairs))
    metrics_path = out_dir / "metrics.json"
    run_path = out_dir / "run.jsonl"
    write_metrics(metrics, metrics_path)
    write_run(ranking, run_path)
    run.finish(out_dir / MANIFEST_NAME, config={"k": cutoffs, "scorer": scorer},
               outputs=[metrics_path, run_path])
    echo_json(metrics)


@click.command("mine-negatives")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pairs", "pairs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tables", "tables_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n", "per_query", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Hard-negative JSON path")
def mine_negatives(ckpt_path, pairs_path, tables_path, per_query, out):
    """Mine the top-scoring non-gold tables per query with a checkpoint."""
    out_path = Path(out) if out else default_out(None, "mine-negatives") / "hard_negatives.json"
    run = RunRecorder("mine-negatives", resolve_seed(None), [ckpt_path, pairs_path, tables_path])
    ckpt = load_checkpoint(ckpt_path)
    pairs = read_corpus(pairs_path).pairs
    pool = read_corpus(tables_path).pairs if tables_path else pairs
    negatives = mine_hard_negatives(ckpt, pairs, per_query, [(p.id, p.table) for p in pool])
    write_hard_negatives(negatives, out_path)
    run.finish(manifest_for_file(out_path), config={"n": per_query}, outputs=[out_path],
               extra={"short_queries": len(negatives.short_queries)})
    echo_json({"queries": len(negatives.negatives), "short_queries": len(negatives.short_queries),
               "out": str(out_path)})


@click.command("eval-qa")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--qa", "qa_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def eval_qa(ckpt_path, qa_path, out):
    """Denotation accuracy of a checkpoint's cell-selection head."""
    out_dir = default_out(out, "eval-qa")
    run = RunRecorder("eval-qa", resolve_seed(None), [ckpt_path, qa_path])
    ckpt = load_checkpoint(ckpt_path)
    metrics, predictions = evaluate_qa(ckpt, read_qa_corpus(qa_path))
    metrics_path = out_dir / "metrics.json"
    predictions_path = out_dir / "predictions.jsonl"
    write_metrics(metrics, metrics_path)
    write_predictions(predictions, predictions_path)
    run.finish(out_dir / MANIFEST_NAME, outputs=[metrics_path, predictions_path])
    echo_json(metrics)


@click.command("gradcheck")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Model/loss config; defaults to a 2-layer d=16 encoder")
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
@click.option("--pairs", "n_pairs", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--entries", type=click.IntRange(min=1), default=6, show_default=True,
              help=f"Entries sampled per parameter tensor above {GRADCHECK_EXHAUSTIVE} entries; smaller tensors "
                   "are checked in full")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_context
def gradcheck(ctx, config_path, seed, n_pairs, entries, out):
    """Compare autodiff and finite-difference gradients of the full pretraining loss.

    Per-entry relative error is |a - n| / max(|a| + |n|, 1e-4); the run passes
    when the largest one is below 1e-4.
    """
    seed = resolve_seed(seed)
    out_dir = default_out(out, "gradcheck")
    run = RunRecorder("gradcheck", seed, [config_path])
    cfg = load_config(config_path)
    model_cfg = cfg.model if config_path else ModelConfig(**GRADCHECK_MODEL)
    loss_cfg: LossConfig = cfg.loss
    corpus = generate_synthetic(n_pairs, 8, 3, 2, seed, model_cfg.l)
    vocab = build_vocab(corpus)
    model_cfg = model_cfg.model_copy(update={"V": len(vocab), "seed": seed})
    params = EncoderParams.init(model_cfg)

    def loss(*_):
        L, _ = total_loss(params, corpus.pairs, loss_cfg, stream(seed, "gradcheck"), vocab, train_mode=False)
        return L

    report = run_gradcheck(loss, params.parameters(), h=1e-5, tol=GRADCHECK_TOL, floor=GRADCHECK_FLOOR,
                           max_entries_per_tensor=entries, seed=seed,
                           exhaustive_below=GRADCHECK_EXHAUSTIVE)
    report_path = out_dir / "gradcheck.json"
    write_metrics(report.model_dump(), report_path)
    run.finish(out_dir / MANIFEST_NAME,
               config={"model": model_cfg.model_dump(), "loss": loss_cfg.model_dump(), "pairs": n_pairs,
                       "entries": entries, "floor": GRADCHECK_FLOOR,
                       "exhaustive_below": GRADCHECK_EXHAUSTIVE},
               outputs=[report_path])
    verdict = "PASS" if report.passed else "FAIL"
    click.echo(f"max_relative_error={report.max_relative_error:.3e} checked={report.checked_entries} {verdict}")
    if not report.passed:
        logger.error(f"Gradient check failed at {report.worst_entry}")
        ctx.exit(1)

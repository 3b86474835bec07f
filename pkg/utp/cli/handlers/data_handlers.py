import logging
from pathlib import Path
from typing import Optional

import click

from utp.cli.utils.runs import (
    MANIFEST_NAME,
    RunRecorder,
    default_out,
    echo_json,
    load_config,
    manifest_for_file,
    resolve_seed,
)
from utp.models.config_models import ModelConfig
from utp.models.table_models import Corpus
from utp.services.corpus_service import (
    generate_synthetic,
    generate_synthetic_qa,
    read_corpus,
    read_qa_corpus,
    split_corpus,
    write_corpus,
    write_qa_corpus,
)
from utp.services.encoder_service import serialize_pair
from utp.services.objective_service import MODALITIES
from utp.services.retrieval_service import write_metrics
from utp.services.tokenizer_service import build_vocab

logger = logging.getLogger(__name__)


@click.command("gen-synthetic")
@click.option("--pairs", "n_pairs", type=click.IntRange(min=1), required=True, help="Number of pairs")
@click.option("--entities", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--attributes", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--max-rows", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--max-seq-len", type=click.IntRange(min=8), default=64, show_default=True,
              help="Every modality of every pair fits this length")
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Corpus JSONL path")
def gen_synthetic(n_pairs: int, entities: int, attributes: int, max_rows: int, max_seq_len: int,
                  seed: Optional[int], out: Optional[str]):
    """Generate a synthetic entity/attribute table-text corpus."""
    seed = resolve_seed(seed)
    out_path = Path(out) if out else default_out(None, "gen-synthetic") / "corpus.jsonl"
    run = RunRecorder("gen-synthetic", seed)
    corpus = generate_synthetic(n_pairs, entities, attributes, max_rows, seed, max_seq_len)
    write_corpus(corpus, out_path)
    run.finish(
        manifest_for_file(out_path),
        config=dict(pairs=n_pairs, entities=entities, attributes=attributes, max_rows=max_rows,
                    max_seq_len=max_seq_len),
        outputs=[out_path],
    )
    echo_json({"pairs": len(corpus), "out": str(out_path)})


@click.command("gen-qa")
@click.option("--examples", "n_examples", type=click.IntRange(min=1), required=True, help="Number of examples")
@click.option("--entities", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--attributes", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--max-rows", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--max-seq-len", type=click.IntRange(min=8), default=64, show_default=True)
@click.option("--seed", type=int, default=None, help="Defaults to UTP_SEED")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="QA JSONL path")
def gen_qa(n_examples: int, entities: int, attributes: int, max_rows: int, max_seq_len: int,
           seed: Optional[int], out: Optional[str]):
    """Generate synthetic cell-selection QA examples."""
    seed = resolve_seed(seed)
    out_path = Path(out) if out else default_out(None, "gen-qa") / "qa.jsonl"
    run = RunRecorder("gen-qa", seed)
    examples = generate_synthetic_qa(n_examples, entities, attributes, max_rows, seed, max_seq_len)
    write_qa_corpus(examples, out_path)
    run.finish(
        manifest_for_file(out_path),
        config=dict(examples=n_examples, entities=entities, attributes=attributes, max_rows=max_rows,
                    max_seq_len=max_seq_len),
        outputs=[out_path],
    )
    echo_json({"examples": len(examples), "out": str(out_path)})


@click.command("validate")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--qa", is_flag=True, help="Read the file as a QA corpus")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--dev-fraction", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=None, help="Split seed; defaults to UTP_SEED")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def validate(corpus_path: str, qa: bool, config_path: Optional[str], dev_fraction: float, seed: Optional[int],
             out: Optional[str]):
    """Check a corpus file and that every pair serializes under the model config."""
    seed = resolve_seed(seed)
    run = RunRecorder("validate", seed, [corpus_path, config_path])
    model_cfg: ModelConfig = load_config(config_path).model
    if qa:
        pairs = [ex.pair for ex in read_qa_corpus(corpus_path)]
    else:
        pairs = read_corpus(corpus_path, split_seed=seed).pairs
    corpus = Corpus(pairs=pairs, split_seed=seed)
    vocab = build_vocab(corpus)
    cfg = model_cfg.model_copy(update={"V": len(vocab)})

    lengths = {m: 0 for m in MODALITIES}
    dropped = 0
    for pair in pairs:
        for m in MODALITIES:
            x = serialize_pair(pair, m, vocab, cfg)
            lengths[m] = max(lengths[m], x.length)
            dropped += x.dropped_cells

    summary = {
        "ok": True,
        "pairs": len(pairs),
        "vocab_size": len(vocab),
        "max_length": lengths,
        "dropped_cells": dropped,
    }
    if len(pairs) >= 2 and 0.0 < dev_fraction < 1.0:
        train, dev = split_corpus(corpus, dev_fraction, seed)
        summary["train"] = len(train)
        summary["dev"] = len(dev)
    out_dir = default_out(out, "validate")
    summary_path = out_dir / "validate.json"
    write_metrics(summary, summary_path)
    run.finish(out_dir / MANIFEST_NAME, config={"model": cfg.model_dump(), "qa": qa, "dev_fraction": dev_fraction},
               outputs=[summary_path])
    echo_json(summary)

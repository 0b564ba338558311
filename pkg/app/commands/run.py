import argparse
import logging

import numpy as np

from app.commands.common import (
    add_model_arguments,
    add_output_arguments,
    add_prompt_arguments,
    open_session,
    prompt_records,
    record_pair,
    run_config,
)
from app.models import AnswerLabels, DatasetRecord, LogitTable
from app.repository.results import save_logit_table
from app.services.gpt2 import ModelWeights, forward
from app.services.metrics import logit_record
from app.services.tokenizer import BPETokenizer

logger = logging.getLogger(__name__)


def build_logit_table(records: list[DatasetRecord], tokenizer: BPETokenizer,
                      weights: ModelWeights, prepend_bos: bool) -> LogitTable:
    rows = []
    for record in records:
        tokens = tokenizer.encode(record.text, prepend_bos=prepend_bos)
        pair = record_pair(tokenizer, record)
        cache = forward(tokens, weights, weights.config, final_only=True)
        rows.append(logit_record(record.text, cache.logits, pair, len(tokens), prepend_bos))
        logger.debug("[run] %d tokens, logit diff %.4f", len(tokens), rows[-1].logit_diff)

    first = records[0]
    return LogitTable(
        answers=AnswerLabels(correct=first.correct, incorrect=first.incorrect),
        records=rows,
        mean_logit_diff=float(np.mean([r.logit_diff for r in rows])),
        mean_prob_ratio=float(np.mean([r.prob_ratio for r in rows])),
    )


def corrupted_records(records: list[DatasetRecord]) -> list[DatasetRecord]:
    """The corrupted side of every pair record, scored against the same answers."""
    return [r.model_copy(update={"text": r.corrupted_text, "corrupted_text": None})
            for r in records if r.corrupted_text is not None]


def cmd_run(args: argparse.Namespace) -> int:
    session = open_session(run_config(args))
    config = session.config
    records = prompt_records(config)
    batches = [("clean", "", records)]
    corrupted = corrupted_records(records)
    if corrupted:
        batches.append(("corrupted", "_corrupted", corrupted))

    settings_to_run = [config.prepend_bos]
    if config.both_bos:
        settings_to_run.append(not config.prepend_bos)

    for bos in settings_to_run:
        stem = "logits" if bos == config.prepend_bos else ("logits_bos" if bos else "logits_no_bos")
        for side, suffix, batch in batches:
            table = build_logit_table(batch, session.tokenizer, session.weights, bos)
            save_logit_table(config.out_dir, table, stem + suffix)
            print(f"[run] {len(batch)} {side} prompts (bos={bos}): "
                  f"mean logit diff {table.mean_logit_diff:.4f}, mean prob ratio {table.mean_prob_ratio:.4f}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="final-token logits, probabilities and ranks per prompt")
    add_model_arguments(parser)
    add_prompt_arguments(parser)
    add_output_arguments(parser)
    parser.add_argument("--both-bos", action="store_true",
                        help="also run with the opposite BOS setting and write both tables")
    parser.set_defaults(func=cmd_run)

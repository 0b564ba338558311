"""Flags and setup shared by every command."""
import argparse
import logging
import os
from dataclasses import dataclass
from typing import Optional

from pydantic import ValidationError

from app import dependencies
from app.config import settings
from app.errors import UsageError
from app.models import AnswerLabels, DatasetRecord, RunConfig
from app.repository.templates import get_template, read_prompts
from app.services.gpt2 import ModelWeights
from app.services.metrics import answer_pair
from app.services.prompt_factory import make_records
from app.services.tokenizer import BPETokenizer
from app.utils.startup_validation import StartupValidator

logger = logging.getLogger(__name__)


def add_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--weights", help=f"safetensors checkpoint (default {settings.weights_path})")
    parser.add_argument("--vocab", help=f"vocab.json (default {settings.vocab_path})")
    parser.add_argument("--merges", help=f"merges.txt (default {settings.merges_path})")


def add_prompt_arguments(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--prompts", help="JSON-lines prompt file")
    source.add_argument("--family", choices=["FL", "TCPA", "UDAAP", "IOI"],
                        help="generate prompts from this template family")
    parser.add_argument("--template", help="template name inside the family (default: the first)")
    parser.add_argument("--n", type=int, default=4, help="number of generated prompts")
    parser.add_argument("--seed", type=int, default=settings.SEED)
    parser.add_argument("--answers", help='answer labels overriding the prompt records, e.g. "Yes,No"')
    parser.add_argument("--no-bos", action="store_true", help="do not prepend <|endoftext|>")


def add_output_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default=settings.OUTPUT_DIR, help="output directory")


def run_config(args: argparse.Namespace) -> RunConfig:
    answers = None
    if getattr(args, "answers", None):
        try:
            answers = AnswerLabels.parse(args.answers)
        except ValueError as e:
            raise UsageError(str(e)) from e

    values = {
        "weights_path": getattr(args, "weights", None),
        "vocab_path": getattr(args, "vocab", None),
        "merges_path": getattr(args, "merges", None),
        "prompts_path": getattr(args, "prompts", None),
        "family": getattr(args, "family", None),
        "template": getattr(args, "template", None),
        "n_prompts": getattr(args, "n", None),
        "answers": answers,
        "sweep_path": getattr(args, "sweep", None),
        "direction": getattr(args, "direction", None),
        "pattern_mode": getattr(args, "pattern_mode", None),
        "out_dir": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "both_bos": getattr(args, "both_bos", False),
        "workers": getattr(args, "workers", None),
    }
    if getattr(args, "no_bos", False):
        values["prepend_bos"] = False
    try:
        config = RunConfig(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        raise UsageError(f"invalid arguments: {e}") from e
    if config.n_prompts < 1:
        raise UsageError("--n must be at least 1")
    return config


@dataclass
class Session:
    """Validated config plus the loaded model resources of one command."""
    config: RunConfig
    tokenizer: BPETokenizer
    weights: Optional[ModelWeights] = None


def open_session(config: RunConfig, need_weights: bool = True) -> Session:
    StartupValidator.validate(config, need_weights)
    config = config.model_copy(update={"sweep": StartupValidator.load_sweep(config)})
    tokenizer = dependencies.get_tokenizer(config.vocab_path, config.merges_path)
    weights = dependencies.get_weights(config.weights_path) if need_weights else None
    os.makedirs(config.out_dir, exist_ok=True)
    return Session(config=config, tokenizer=tokenizer, weights=weights)


def prompt_records(config: RunConfig) -> list[DatasetRecord]:
    if config.prompts_path:
        records = read_prompts(config.prompts_path)
    elif config.family:
        template = get_template(config.family, config.template)
        records = make_records(template, config.n_prompts, config.seed)
    else:
        raise UsageError("give either --prompts or --family")
    if not records:
        raise UsageError("no prompts to run")
    if config.answers is not None:
        records = [r.model_copy(update={"correct": config.answers.correct,
                                        "incorrect": config.answers.incorrect}) for r in records]
    return records


def record_pair(tokenizer: BPETokenizer, record: DatasetRecord):
    return answer_pair(tokenizer, record.correct, record.incorrect)

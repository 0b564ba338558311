import argparse
import logging
import os

from app import dependencies
from app.commands.common import add_model_arguments, add_output_arguments, open_session, run_config
from app.config import settings
from app.errors import UsageError
from app.repository.templates import get_pair_template, get_template, write_prompts
from app.services.prompt_factory import (
    make_pair_dataset,
    pair_records,
    record_from_bindings,
    sample_bindings,
    slot_coverage,
)

logger = logging.getLogger(__name__)


def cmd_dataset(args: argparse.Namespace) -> int:
    config = run_config(args)
    if not config.family:
        raise UsageError("dataset needs --family")

    if args.pairs:
        session = open_session(config, need_weights=False)
        template = get_pair_template(config.family, config.template)
        registry = dependencies.pair_registry(template, session.tokenizer)
        pairs = make_pair_dataset(template, registry, session.tokenizer, config.n_prompts,
                                  config.seed, config.prepend_bos)
        records = pair_records(pairs, template)
        print(f"[dataset] {len(pairs)} aligned pairs of {len(pairs[0].clean_tokens)} tokens")
    else:
        template = get_template(config.family, config.template)
        bindings = sample_bindings(template, config.n_prompts, config.seed)
        records = [record_from_bindings(template, b) for b in bindings]
        for slot, used in slot_coverage(template, bindings).items():
            print(f"[dataset] slot [{slot}]: {used}/{len(template.slot_vocabs[slot])} fillers used")

    path = os.path.join(config.out_dir, f"dataset_{template.name}_n{config.n_prompts}_s{config.seed}.jsonl")
    write_prompts(path, records)
    print(f"[dataset] {len(records)} prompts from {template.name} -> {path}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("dataset", help="generate a JSON-lines prompt dataset from a template")
    add_model_arguments(parser)
    add_output_arguments(parser)
    parser.add_argument("--family", choices=["FL", "TCPA", "UDAAP", "IOI"], required=True)
    parser.add_argument("--template", help="template name inside the family (default: the first)")
    parser.add_argument("--n", type=int, default=4)
    parser.add_argument("--seed", type=int, default=settings.SEED)
    parser.add_argument("--pairs", action="store_true",
                        help="generate token-aligned clean/corrupted pairs (needs the tokenizer)")
    parser.add_argument("--no-bos", action="store_true")
    parser.set_defaults(func=cmd_dataset)

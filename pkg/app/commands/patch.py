import argparse
import logging

from app import dependencies
from app.commands.common import (
    add_model_arguments,
    add_output_arguments,
    add_prompt_arguments,
    open_session,
    run_config,
)
from app.errors import UsageError
from app.models import PatchGrid, RunConfig, SweepSpec
from app.repository.results import (
    render_patch_grid,
    save_component_dominance,
    save_head_comparison,
    save_patch_grid,
)
from app.repository.templates import get_pair_template, load_reference_heads, read_prompts
from app.services.attribution import compare_to_reference
from app.services.gpt2 import ModelWeights
from app.services.metrics import answer_pair
from app.services.patching import (
    PatchingBaseline,
    PatchJob,
    average_grids,
    component_dominance,
    head_scores,
    patch_block_sweep,
    patch_head_component_sweep,
    patch_head_sweep,
    patch_path_sweep,
    patch_resid_sweep,
)
from app.services.prompt_factory import PromptPair, make_pair_dataset, pair_from_texts
from app.services.sweep_runner import SweepRunner
from app.services.tokenizer import BPETokenizer

logger = logging.getLogger(__name__)

# the dominance check covers heads in the last LATE_LAYERS layers
LATE_LAYERS = 3


def load_pairs(config: RunConfig, tokenizer: BPETokenizer) -> list[PromptPair]:
    """Every pair is built and aligned before any forward pass runs."""
    if config.prompts_path:
        pairs = []
        for number, record in enumerate(read_prompts(config.prompts_path), start=1):
            if record.corrupted_text is None:
                raise UsageError(f"{config.prompts_path}:{number} has no corrupted_text")
            labels = config.answers or record
            pairs.append(pair_from_texts(record.text, record.corrupted_text, tokenizer,
                                         answer_pair(tokenizer, labels.correct, labels.incorrect),
                                         config.prepend_bos, f"{config.prompts_path}:{number}"))
        return pairs
    if config.family:
        template = get_pair_template(config.family, config.template)
        registry = dependencies.pair_registry(template, tokenizer)
        return make_pair_dataset(template, registry, tokenizer, config.n_prompts, config.seed,
                                 config.prepend_bos)
    raise UsageError("give either --prompts or --family")


def run_sweep(baseline: PatchingBaseline, spec: SweepSpec, runner: SweepRunner,
              position_labels: list[str]) -> list[PatchGrid]:
    if spec.site == "resid":
        return [patch_resid_sweep(baseline, spec, runner, position_labels)]
    if spec.site == "block":
        return [patch_block_sweep(baseline, spec, runner)]
    if spec.site == "head":
        return [patch_head_sweep(baseline, spec, runner)]
    if spec.site == "path":
        return [patch_path_sweep(baseline, spec, runner)]
    # the z grid ranks the heads whose components are compared
    return [patch_head_sweep(baseline, spec, runner),
            *patch_head_component_sweep(baseline, spec, runner).values()]


def sweep_pairs(pairs: list[PromptPair], weights: ModelWeights, spec: SweepSpec,
                tokenizer: BPETokenizer, workers: int) -> list[PatchGrid]:
    position_labels = [f"{i}:{t}" for i, t in enumerate(tokenizer.to_str_tokens(pairs[0].clean_tokens.ids))]
    per_pair: list[list[PatchGrid]] = []
    for index, pair in enumerate(pairs):
        job = PatchJob(clean=pair.clean_tokens.ids, corrupted=pair.corrupted_tokens.ids,
                       pair=pair.answers, direction=spec.direction, spec=spec)
        baseline = PatchingBaseline(job, weights, weights.config)
        runner = SweepRunner(workers=workers, desc=f"{spec.site} sweep {index + 1}/{len(pairs)}")
        per_pair.append(run_sweep(baseline, spec, runner, position_labels))
    return [average_grids([grids[i] for grids in per_pair]) for i in range(len(per_pair[0]))]


def cmd_patch(args: argparse.Namespace) -> int:
    session = open_session(run_config(args))
    config, tokenizer = session.config, session.tokenizer
    spec = config.resolved_sweep()
    pairs = load_pairs(config, tokenizer)
    logger.info("[patch] %d pair(s), %d tokens each, diff positions %s",
                len(pairs), len(pairs[0].clean_tokens), pairs[0].diff_positions)

    grids = sweep_pairs(pairs, session.weights, spec, tokenizer, config.workers)
    for grid in grids:
        save_patch_grid(config.out_dir, grid)
        render_patch_grid(config.out_dir, grid)
        print(f"[patch] {grid.name}: {len(grid.values)}x{len(grid.values[0])} grid, {grid.n_pairs} pair(s)")

    if spec.site in ("head", "head_components"):
        reference = load_reference_heads()
        by_name = {g.name: g for g in grids}
        comparison = compare_to_reference(head_scores(by_name["attn_z"]), reference.patch_positive,
                                          reference.patch_negative, reference.top_k, "patch attn_z")
        save_head_comparison(config.out_dir, comparison, "head_comparison_patch")
        if spec.site == "head_components":
            min_layer = max(0, session.weights.config.n_layers - LATE_LAYERS)
            report = component_dominance(by_name["attn_z"], by_name, reference.top_k, min_layer)
            save_component_dominance(config.out_dir, report)
            print(f"[patch] value dominates query and key for {len(report.heads) - len(report.violations)}"
                  f"/{len(report.heads)} late-layer heads")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("patch", help="activation patching sweeps over clean/corrupted pairs")
    add_model_arguments(parser)
    add_prompt_arguments(parser)
    add_output_arguments(parser)
    parser.add_argument("--sweep", help="JSON sweep spec (default: residual stream sweep)")
    parser.add_argument("--direction", choices=["denoise", "noise"])
    parser.add_argument("--pattern-mode", choices=["all", "end"],
                        help="patch every query row of the pattern, or only the final one")
    parser.add_argument("--workers", type=int, help="threads running sweep cells")
    parser.set_defaults(func=cmd_patch)

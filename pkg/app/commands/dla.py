import argparse
import logging
import os

from app.commands.common import (
    add_model_arguments,
    add_output_arguments,
    add_prompt_arguments,
    open_session,
    prompt_records,
    record_pair,
    run_config,
)
from app.models import AttributionGrid
from app.repository.results import save_attribution_grid, save_head_comparison, save_svg
from app.repository.templates import load_reference_heads
from app.services.attribution import (
    accumulated_logit_lens,
    attention_patterns,
    compare_to_reference,
    grid_scores,
    logit_diff_direction,
    mean_grid,
    per_head_attribution,
    per_layer_attribution,
    top_heads,
)
from app.services.gpt2 import ActivationCache, forward
from app.services.metrics import logit_diff
from app.utils import charts

logger = logging.getLogger(__name__)

ADDITIVITY_TOLERANCE = 1e-3


def _head(label: str) -> tuple[int, int]:
    layer, head = label.split(".")
    return int(layer), int(head)


def _pattern_heatmaps(out_dir: str, cache: ActivationCache, labels: list[str], str_tokens: list[str]) -> list[str]:
    paths = []
    for label, pattern in zip(labels, attention_patterns(cache, [_head(lb) for lb in labels])):
        paths.append(save_svg(out_dir, f"attn_pattern_{label}",
                              charts.heatmap(pattern.tolist(), str_tokens, str_tokens,
                                             f"attention pattern of head {label}", "query", "key")))
    return paths


def cmd_dla(args: argparse.Namespace) -> int:
    session = open_session(run_config(args))
    config, tokenizer, weights = session.config, session.tokenizer, session.weights
    records = prompt_records(config)

    grids: dict[str, list[AttributionGrid]] = {"accumulated": [], "per_layer": [], "per_head": []}
    first_cache = None
    first_tokens: list[str] = []
    for index, record in enumerate(records):
        tokens = tokenizer.encode(record.text, prepend_bos=config.prepend_bos)
        cache = forward(tokens, weights, weights.config)
        direction = logit_diff_direction(weights, record_pair(tokenizer, record))
        prompt_grids = {
            "accumulated": accumulated_logit_lens(cache, weights, direction),
            "per_layer": per_layer_attribution(cache, weights, direction),
            "per_head": per_head_attribution(cache, weights, direction),
        }
        target = logit_diff(cache.logits, direction.pair)
        total = sum(prompt_grids["per_layer"].values)
        if abs(total - target) > ADDITIVITY_TOLERANCE:
            logger.warning("[dla] prompt %d: per-layer sum %.5f differs from logit diff %.5f",
                           index, total, target)
        for kind, grid in prompt_grids.items():
            grid = grid.model_copy(update={"prompt": record.text})
            grids[kind].append(grid)
            save_attribution_grid(config.out_dir, f"prompt_{index:02d}_{kind}", grid)
        if first_cache is None:
            first_cache = cache
            first_tokens = tokenizer.to_str_tokens(tokens.ids)

    means = {kind: mean_grid(items) for kind, items in grids.items()}
    for kind, grid in means.items():
        save_attribution_grid(config.out_dir, f"{kind}_mean", grid)

    accumulated, per_layer, per_head = means["accumulated"], means["per_layer"], means["per_head"]
    footer = (f"per-layer sum {sum(per_layer.values):.4f}, "
              f"final accumulated {accumulated.values[-1]:.4f} (mean over {len(records)} prompt(s))")
    save_svg(config.out_dir, "accumulated_mean",
             charts.line_chart(accumulated.labels, accumulated.values,
                               "logit difference of the accumulated residual stream", footer))
    save_svg(config.out_dir, "per_layer_mean",
             charts.line_chart(per_layer.labels, per_layer.values, "per-layer logit attribution", footer))
    n_layers, n_heads = per_head.shape
    save_svg(config.out_dir, "per_head_mean",
             charts.heatmap(per_head.as_matrix(), [str(layer) for layer in range(n_layers)],
                            [str(h) for h in range(n_heads)], "per-head logit attribution", "layer", "head"))

    scores = grid_scores(per_head)
    shown = top_heads(scores, 3, "positive") + top_heads(scores, 3, "negative")
    _pattern_heatmaps(config.out_dir, first_cache, shown, first_tokens)

    reference = load_reference_heads()
    comparison = compare_to_reference(scores, reference.dla_positive, reference.dla_negative,
                                      reference.top_k, "dla")
    save_head_comparison(config.out_dir, comparison, "head_comparison_dla")
    print(f"[dla] {len(records)} prompt(s) -> {os.path.abspath(config.out_dir)}; {footer}")
    print(f"[dla] top positive heads {comparison.top_positive[:3]}, top negative {comparison.top_negative[:3]}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("dla", help="direct logit attribution: logit lens, per layer, per head")
    add_model_arguments(parser)
    add_prompt_arguments(parser)
    add_output_arguments(parser)
    parser.set_defaults(func=cmd_dla)

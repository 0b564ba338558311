"""Activation patching between a clean and a corrupted prompt.

Denoising (default) runs the corrupted prompt and restores activations from
the clean run; noising runs the clean prompt and injects corrupted
activations. Scores are normalized so that each direction's untouched run
scores 0 and its fully patched run scores 1:

    denoise: (patched - corrupted) / (clean - corrupted)
    noise:   (clean - patched)     / (clean - corrupted)

Every cell is a fresh forward pass over the base prompt with the chosen
overrides.
"""
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from app.errors import AlignmentError, BaselineError, ComputeError, ConfigError, PathOrderError
from app.models import AnswerPair, ComponentCheck, ComponentDominance, Direction, PatchGrid, SweepSpec
from app.services.attribution import top_heads
from app.services.gpt2 import (
    ActivationCache,
    HookOverride,
    HookPoint,
    ModelConfig,
    ModelWeights,
    forward,
    head_output,
    project_head_input,
)
from app.services.metrics import logit_diff
from app.services.sweep_runner import SweepRunner

logger = logging.getLogger(__name__)

BASELINE_EPS = 1e-6
COMPONENT_SITES = ("attn_q", "attn_k", "attn_v", "attn_pattern")


def normalized_score(patched_ld: float, clean_ld: float, corrupted_ld: float) -> float:
    if abs(clean_ld - corrupted_ld) < BASELINE_EPS:
        raise BaselineError(
            f"clean and corrupted logit differences coincide ({clean_ld:.6g}); nothing to recover")
    return (patched_ld - corrupted_ld) / (clean_ld - corrupted_ld)


def noised_score(patched_ld: float, clean_ld: float, corrupted_ld: float) -> float:
    return 1.0 - normalized_score(patched_ld, clean_ld, corrupted_ld)


@dataclass(frozen=True)
class PatchJob:
    clean: list[int]
    corrupted: list[int]
    pair: AnswerPair
    direction: Direction = "denoise"
    spec: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        if len(self.clean) != len(self.corrupted):
            raise AlignmentError(
                f"clean prompt has {len(self.clean)} tokens, corrupted has {len(self.corrupted)}")


class PatchingBaseline:
    """Both unpatched runs of a job plus the helpers every sweep cell needs."""

    def __init__(self, job: PatchJob, weights: ModelWeights, config: ModelConfig):
        self.job = job
        self.weights = weights
        self.config = config
        self.clean_cache = forward(job.clean, weights, config)
        self.corrupted_cache = forward(job.corrupted, weights, config)
        # scored in final-only mode, the same way every sweep cell is
        self.clean_ld = self._final_ld(job.clean)
        self.corrupted_ld = self._final_ld(job.corrupted)
        if abs(self.clean_ld - self.corrupted_ld) < BASELINE_EPS:
            raise BaselineError(
                f"clean and corrupted logit differences coincide ({self.clean_ld:.6g}); nothing to recover")
        logger.info("[baseline] clean ld %.4f, corrupted ld %.4f, direction %s",
                    self.clean_ld, self.corrupted_ld, job.direction)

    def _final_ld(self, tokens: list[int], overrides: Sequence[HookOverride] = ()) -> float:
        cache = forward(tokens, self.weights, self.config, overrides, final_only=True)
        return logit_diff(cache.logits, self.job.pair)

    @property
    def seq_len(self) -> int:
        return len(self.job.clean)

    @property
    def base_tokens(self) -> list[int]:
        return self.job.corrupted if self.job.direction == "denoise" else self.job.clean

    @property
    def base_cache(self) -> ActivationCache:
        return self.corrupted_cache if self.job.direction == "denoise" else self.clean_cache

    @property
    def source_cache(self) -> ActivationCache:
        return self.clean_cache if self.job.direction == "denoise" else self.corrupted_cache

    def score(self, patched_ld: float) -> float:
        if self.job.direction == "denoise":
            return normalized_score(patched_ld, self.clean_ld, self.corrupted_ld)
        return noised_score(patched_ld, self.clean_ld, self.corrupted_ld)

    def source_override(self, hook: HookPoint, positions: Optional[Sequence[int]] = None) -> HookOverride:
        value = self.source_cache[hook]
        replacement = value if positions is None else value[list(positions)]
        return HookOverride(target=hook, replacement=replacement, positions=positions)

    def run_overrides(self, overrides: Sequence[HookOverride]) -> float:
        return self.score(self._final_ld(self.base_tokens, overrides))

    def patch(self, hooks: Sequence[HookPoint], positions: Optional[Sequence[int]] = None) -> float:
        return self.run_overrides([self.source_override(h, positions) for h in hooks])


def patch_joint(baseline: PatchingBaseline, hooks: Sequence[HookPoint],
                positions: Optional[Sequence[int]] = None) -> float:
    """Score of one run with every hook in ``hooks`` patched at once."""
    return baseline.patch(hooks, positions)


def _range(bounds: Optional[tuple[int, int]], size: int, what: str) -> list[int]:
    if bounds is None:
        return list(range(size))
    start, stop = bounds
    if stop > size:
        raise ConfigError(f"{what} range {bounds} exceeds {size}")
    return list(range(start, stop))


def _grid(name: str, row_axis: str, rows: list[str], col_axis: str, cols: list[str],
          values: list[float], direction: Direction) -> PatchGrid:
    if not np.all(np.isfinite(values)):
        raise ComputeError(f"{name} sweep produced non-finite scores")
    width = len(cols)
    matrix = [values[r * width:(r + 1) * width] for r in range(len(rows))]
    return PatchGrid(name=name, axes={row_axis: rows, col_axis: cols}, values=matrix, direction=direction)


def patch_resid_sweep(baseline: PatchingBaseline, spec: Optional[SweepSpec] = None,
                      runner: Optional[SweepRunner] = None,
                      position_labels: Optional[Sequence[str]] = None) -> PatchGrid:
    """Patch resid_pre(L) at one position at a time; optional extra column
    patching every position of the layer at once."""
    spec = spec or baseline.job.spec
    runner = runner or SweepRunner(desc="resid sweep")
    layers = _range(spec.layers, baseline.config.n_layers, "layer")
    positions = _range(spec.positions, baseline.seq_len, "position")

    cells = []
    for layer in layers:
        hook = HookPoint(layer, "resid_pre")
        cells += [lambda h=hook, p=p: baseline.patch([h], [p]) for p in positions]
        if spec.full_row:
            cells.append(lambda h=hook: baseline.patch([h]))

    labels = [position_labels[p] if position_labels else str(p) for p in positions]
    if spec.full_row:
        labels.append("all")
    return _grid("resid_pre", "layer", [str(layer) for layer in layers], "position", labels,
                 runner.run(cells), baseline.job.direction)


def patch_block_sweep(baseline: PatchingBaseline, spec: Optional[SweepSpec] = None,
                      runner: Optional[SweepRunner] = None) -> PatchGrid:
    """Patch each layer's attention output and MLP output at every position."""
    spec = spec or baseline.job.spec
    runner = runner or SweepRunner(desc="block sweep")
    layers = _range(spec.layers, baseline.config.n_layers, "layer")
    sites = ("attn_out", "mlp_out")
    cells = [lambda h=HookPoint(layer, site): baseline.patch([h]) for layer in layers for site in sites]
    return _grid("block", "layer", [str(layer) for layer in layers], "site", list(sites),
                 runner.run(cells), baseline.job.direction)


def _head_sweep(baseline: PatchingBaseline, site: str, spec: SweepSpec,
                runner: SweepRunner, positions: Optional[list[int]]) -> PatchGrid:
    layers = _range(spec.layers, baseline.config.n_layers, "layer")
    heads = _range(spec.heads, baseline.config.n_heads, "head")
    cells = [lambda h=HookPoint(layer, site, head): baseline.patch([h], positions)
             for layer in layers for head in heads]
    return _grid(site, "layer", [str(layer) for layer in layers], "head", [str(h) for h in heads],
                 runner.run(cells), baseline.job.direction)


def patch_head_sweep(baseline: PatchingBaseline, spec: Optional[SweepSpec] = None,
                     runner: Optional[SweepRunner] = None) -> PatchGrid:
    """Patch one head's mixed values z (before W_O) across the chosen positions."""
    spec = spec or baseline.job.spec
    positions = None if spec.positions is None else _range(spec.positions, baseline.seq_len, "position")
    return _head_sweep(baseline, "attn_z", spec, runner or SweepRunner(desc="head sweep"), positions)


def patch_head_component_sweep(baseline: PatchingBaseline, spec: Optional[SweepSpec] = None,
                               runner: Optional[SweepRunner] = None) -> dict[str, PatchGrid]:
    """Separate head grids for query, key, value and post-softmax pattern patching."""
    spec = spec or baseline.job.spec
    runner = runner or SweepRunner(desc="head component sweep")
    positions = None if spec.positions is None else _range(spec.positions, baseline.seq_len, "position")
    grids = {}
    for site in COMPONENT_SITES:
        site_positions = positions
        if site == "attn_pattern" and spec.pattern_mode == "end":
            site_positions = [baseline.seq_len - 1]
        grids[site] = _head_sweep(baseline, site, spec, runner, site_positions)
    return grids


def average_grids(grids: Sequence[PatchGrid]) -> PatchGrid:
    """Cell-wise mean of per-pair grids (each already normalized)."""
    if not grids:
        raise ConfigError("no grids to average")
    first = grids[0]
    for g in grids[1:]:
        if [len(v) for v in g.axes.values()] != [len(v) for v in first.axes.values()]:
            raise AlignmentError(f"grid '{g.name}' shape differs from '{first.name}'")
    values = np.mean([g.values for g in grids], axis=0)
    return PatchGrid(name=first.name, axes=first.axes, values=values.tolist(),
                     direction=first.direction, n_pairs=len(grids))


def head_scores(grid: PatchGrid) -> dict[str, float]:
    """A layer x head grid flattened to ``{"layer.head": score}``."""
    layers, heads = grid.axes[grid.row_axis], grid.axes[grid.col_axis]
    return {f"{layer}.{head}": grid.values[r][c]
            for r, layer in enumerate(layers) for c, head in enumerate(heads)}


def component_dominance(ranking: PatchGrid, components: Mapping[str, PatchGrid],
                        top_k: int, min_layer: int) -> ComponentDominance:
    """Check that value patching outweighs query and key patching for the
    strongest heads of the later layers.

    Heads are the ``top_k`` largest positive and ``top_k`` most negative
    scores of ``ranking``; magnitudes come from the attn_v, attn_q and attn_k
    grids of a component sweep over the same heads.
    """
    missing = [site for site in ("attn_v", "attn_q", "attn_k") if site not in components]
    if missing:
        raise ConfigError(f"component grids {missing} are needed for the dominance check")
    value, query, key = (head_scores(components[s]) for s in ("attn_v", "attn_q", "attn_k"))
    scores = head_scores(ranking)

    ranked: list[str] = []
    for label in top_heads(scores, top_k, "positive") + top_heads(scores, top_k, "negative"):
        if label not in ranked and int(label.split(".")[0]) >= min_layer:
            ranked.append(label)

    checks = []
    for label in ranked:
        if label not in value:
            raise AlignmentError(f"head {label} is missing from the component grids")
        checks.append(ComponentCheck(head=label, value=abs(value[label]),
                                     query=abs(query[label]), key=abs(key[label])))
    report = ComponentDominance(source=f"patch {ranking.name}", top_k=top_k, min_layer=min_layer,
                                heads=checks,
                                violations=[c.head for c in checks if not c.value_dominates])
    if not report.holds:
        logger.warning("[component_dominance] value does not dominate for %s", report.violations)
    return report


# ---------------------------------------------------------------------------
# Path patching (direct path into a receiver's q/k/v)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathSender:
    kind: str  # "head", "mlp" or "embed"
    layer: int = -1
    head: Optional[int] = None

    @classmethod
    def of(cls, sender: Union["PathSender", tuple]) -> "PathSender":
        if isinstance(sender, PathSender):
            return sender
        if len(sender) == 2 and sender[0] == "mlp":
            return cls("mlp", int(sender[1]))
        if len(sender) == 1 and sender[0] == "embed":
            return cls("embed")
        layer, head = sender
        return cls("head", int(layer), int(head))

    def contribution(self, cache: ActivationCache, weights: ModelWeights):
        if self.kind == "head":
            return head_output(cache, weights, self.layer, self.head)
        if self.kind == "mlp":
            return cache[HookPoint(self.layer, "mlp_out")]
        return cache[HookPoint(0, "resid_pre")]


def path_patch(baseline: PatchingBaseline,
               senders: Union[PathSender, tuple, Sequence[Union[PathSender, tuple]]],
               receiver: HookPoint) -> float:
    """Swap only the senders' residual-stream writes to their source-run values,
    recompute the receiver's q/k/v from that residual stream, and let the rest
    of the base run proceed with the receiver overridden."""
    # a bare tuple or PathSender is one sender; pass a list for several
    if isinstance(senders, (PathSender, tuple)):
        senders = [senders]
    if not senders:
        raise ConfigError("path patching needs at least one sender")
    resolved = [PathSender.of(s) for s in senders]

    receiver = receiver.resolve(baseline.config)
    if receiver.site not in ("attn_q", "attn_k", "attn_v"):
        raise ConfigError(f"path receiver must be a q/k/v hook, got {receiver.site}")
    for sender in resolved:
        if sender.kind != "embed" and sender.layer >= receiver.layer:
            raise PathOrderError(
                f"sender {sender.kind} at layer {sender.layer} does not precede receiver layer {receiver.layer}")

    base, source, weights = baseline.base_cache, baseline.source_cache, baseline.weights
    resid = base[HookPoint(receiver.layer, "resid_pre")].copy()
    for sender in resolved:
        resid += sender.contribution(source, weights) - sender.contribution(base, weights)

    value = project_head_input(resid, weights, baseline.config, receiver.layer, receiver.head, receiver.site)
    return baseline.run_overrides([HookOverride(target=receiver, replacement=value)])


def patch_path_sweep(baseline: PatchingBaseline, spec: Optional[SweepSpec] = None,
                     runner: Optional[SweepRunner] = None) -> PatchGrid:
    """Sender x receiver grid: each sender head's direct path into each
    receiver's ``receiver_site`` input, one sender at a time."""
    spec = spec or baseline.job.spec
    runner = runner or SweepRunner(desc="path sweep")
    if not spec.receivers:
        raise ConfigError("a path sweep needs at least one receiver head")
    receivers = []
    for label in spec.receivers:
        layer, head = (int(x) for x in label.split("."))
        receivers.append(HookPoint(layer, spec.receiver_site, head).resolve(baseline.config))

    first = min(r.layer for r in receivers)
    if first == 0:
        raise ConfigError("receivers in layer 0 have no sender heads")
    layers = _range(spec.layers, first, "sender layer")
    heads = _range(spec.heads, baseline.config.n_heads, "head")
    senders = [(layer, head) for layer in layers for head in heads]
    cells = [lambda s=s, r=r: path_patch(baseline, s, r) for s in senders for r in receivers]
    sender_labels = [f"{layer}.{head}" for layer, head in senders]
    return _grid(f"path_{spec.receiver_site}", "sender", sender_labels, "receiver", list(spec.receivers),
                 runner.run(cells), baseline.job.direction)

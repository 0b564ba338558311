"""Direct logit attribution and static circuit extraction.

States and component outputs at the END position are centered (the mean
subtraction of the final layer norm), divided by the final layer norm scale
cached on the reference run (frozen scale), multiplied by the final layer
norm gain and dotted with the logit difference direction W_U[:, correct] -
W_U[:, incorrect]. Frozen scale makes every attribution linear, so the
components add up exactly to the model's logit difference. The final layer
norm bias contributes a constant ``bias`` term reported on its own.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from app.errors import ComputeError, ConfigError, HeadRangeError
from app.models import AnswerPair, AttributionGrid, HeadComparison
from app.services.gpt2 import ActivationCache, HookPoint, ModelWeights, head_output
from app.services.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogitDiffDirection:
    vector: Tensor  # [d_model]
    pair: AnswerPair

    def scaled(self, factor: float) -> "LogitDiffDirection":
        return LogitDiffDirection(self.vector * np.float32(factor), self.pair)


def logit_diff_direction(weights: ModelWeights, pair: AnswerPair) -> LogitDiffDirection:
    vector = weights.W_U[:, pair.correct_id] - weights.W_U[:, pair.incorrect_id]
    if not np.any(vector):
        raise ComputeError(f"answer tokens {pair.labels} have identical unembeddings")
    return LogitDiffDirection(np.ascontiguousarray(vector), pair)


class _Projector:
    def __init__(self, cache: ActivationCache, weights: ModelWeights,
                 direction: LogitDiffDirection, scale_from: Optional[ActivationCache],
                 position: int):
        if not np.any(direction.vector):
            raise ComputeError("logit difference direction is the zero vector")
        reference = scale_from if scale_from is not None else cache
        self.scale = float(reference.ln_final_scale[position])
        self.readout = weights.ln_f_w.astype(np.float64) * direction.vector.astype(np.float64)
        self.bias = float(weights.ln_f_b.astype(np.float64) @ direction.vector.astype(np.float64))
        self.position = position

    def __call__(self, state: Tensor) -> float:
        """Project one END-position vector (or a [seq, d_model] tensor's END row)."""
        vec = np.asarray(state, dtype=np.float64)
        if vec.ndim == 2:
            vec = vec[self.position]
        return float((vec - vec.mean()) @ self.readout / self.scale)


def accumulated_logit_lens(cache: ActivationCache, weights: ModelWeights,
                           direction: LogitDiffDirection,
                           scale_from: Optional[ActivationCache] = None,
                           position: int = -1) -> AttributionGrid:
    """Logit difference read off the residual stream at the start and middle of
    every layer, then after the last layer ("final-post")."""
    project = _Projector(cache, weights, direction, scale_from, position)
    labels, values = [], []
    for layer in range(cache.config.n_layers):
        for site, tag in (("resid_pre", "pre"), ("resid_mid", "mid")):
            labels.append(f"{layer}-{tag}")
            values.append(project(cache[HookPoint(layer, site)]) + project.bias)
    labels.append("final-post")
    values.append(project(cache[HookPoint("final", "resid_post")]) + project.bias)
    return AttributionGrid(kind="accumulated", labels=labels, values=values)


def per_layer_attribution(cache: ActivationCache, weights: ModelWeights,
                          direction: LogitDiffDirection,
                          scale_from: Optional[ActivationCache] = None,
                          position: int = -1) -> AttributionGrid:
    """Embedding, then attention and MLP output of every layer, then the
    constant ``bias`` entry. All entries sum to the logit difference."""
    project = _Projector(cache, weights, direction, scale_from, position)
    labels = ["embed"]
    values = [project(cache[HookPoint(0, "resid_pre")])]
    for layer in range(cache.config.n_layers):
        labels += [f"{layer}-attn", f"{layer}-mlp"]
        values += [project(cache[HookPoint(layer, "attn_out")]),
                   project(cache[HookPoint(layer, "mlp_out")])]
    labels.append("bias")
    values.append(project.bias)
    return AttributionGrid(kind="per_layer", labels=labels, values=values)


def per_head_attribution(cache: ActivationCache, weights: ModelWeights,
                         direction: LogitDiffDirection,
                         scale_from: Optional[ActivationCache] = None,
                         position: int = -1) -> AttributionGrid:
    project = _Projector(cache, weights, direction, scale_from, position)
    n_layers, n_heads = cache.config.n_layers, cache.config.n_heads
    labels, values = [], []
    for layer in range(n_layers):
        for head in range(n_heads):
            labels.append(f"{layer}.{head}")
            values.append(project(head_output(cache, weights, layer, head)[position]))
    return AttributionGrid(kind="per_head", labels=labels, values=values, shape=(n_layers, n_heads))


def attention_bias_terms(cache: ActivationCache, weights: ModelWeights,
                         direction: LogitDiffDirection,
                         scale_from: Optional[ActivationCache] = None,
                         position: int = -1) -> list[float]:
    """Per-layer contribution of the attention output bias b_O."""
    project = _Projector(cache, weights, direction, scale_from, position)
    return [project(layer.b_O) for layer in weights.layers]


def mean_grid(grids: Sequence[AttributionGrid]) -> AttributionGrid:
    if not grids:
        raise ConfigError("cannot average an empty list of grids")
    first = grids[0]
    if any(g.labels != first.labels or g.kind != first.kind for g in grids):
        raise ConfigError("grids to average must share kind and labels")
    values = np.mean([g.values for g in grids], axis=0)
    return AttributionGrid(kind=first.kind, labels=first.labels, values=values.tolist(),
                           shape=first.shape, prompt=f"mean of {len(grids)} prompts")


# ---------------------------------------------------------------------------
# Attention patterns and static circuits
# ---------------------------------------------------------------------------

def _check_head(weights: ModelWeights, layer: int, head: int) -> None:
    n_layers, n_heads = len(weights.layers), weights.layers[0].W_Q.shape[0]
    if not (0 <= layer < n_layers and 0 <= head < n_heads):
        raise HeadRangeError(f"head {layer}.{head} outside {n_layers} layers x {n_heads} heads")


def attention_patterns(cache: ActivationCache, heads: Iterable[tuple[int, int]]) -> list[Tensor]:
    patterns = []
    for layer, head in heads:
        if not (0 <= layer < cache.config.n_layers and 0 <= head < cache.config.n_heads):
            raise HeadRangeError(f"head {layer}.{head} outside the model")
        patterns.append(cache[HookPoint(layer, "attn_pattern", head)])
    return patterns


def qk_circuit(weights: ModelWeights, layer: int, head: int, tokens: Sequence[int]) -> Tensor:
    """M[i][j] = (W_E[t_i] W_Q^h) . (W_E[t_j] W_K^h) / sqrt(d_head), restricted to ``tokens``."""
    if not tokens:
        raise ConfigError("qk_circuit needs at least one token")
    _check_head(weights, layer, head)
    lw = weights.layers[layer]
    emb = weights.W_E[list(tokens)].astype(np.float64)
    queries = emb @ lw.W_Q[head].astype(np.float64)
    keys = emb @ lw.W_K[head].astype(np.float64)
    return (queries @ keys.T / np.sqrt(lw.W_Q.shape[-1])).astype(np.float32)


def ov_circuit(weights: ModelWeights, layer: int, head: int,
               src_tokens: Sequence[int], dst_tokens: Sequence[int]) -> Tensor:
    """M[d][s] = W_U[:, t_d] . (W_E[t_s] W_V^h W_O^h)."""
    if not src_tokens or not dst_tokens:
        raise ConfigError("ov_circuit needs non-empty source and destination tokens")
    _check_head(weights, layer, head)
    lw = weights.layers[layer]
    moved = (weights.W_E[list(src_tokens)].astype(np.float64)
             @ lw.W_V[head].astype(np.float64) @ lw.W_O[head].astype(np.float64))
    readout = weights.W_U[:, list(dst_tokens)].astype(np.float64)
    return (readout.T @ moved.T).astype(np.float32)


def copying_score(matrix: Tensor) -> float:
    """Mean of the diagonal minus mean of the off-diagonal entries."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ConfigError("copying score needs a square matrix of size >= 2")
    diag = np.diag(m)
    off = m[~np.eye(m.shape[0], dtype=bool)]
    return float(diag.mean() - off.mean())


# ---------------------------------------------------------------------------
# Ranking against reference head lists
# ---------------------------------------------------------------------------

def top_heads(scores: dict[str, float], k: int,
              sign: Literal["positive", "negative"] = "positive") -> list[str]:
    ordered = sorted(scores.items(), key=lambda kv: kv[1], reverse=(sign == "positive"))
    return [label for label, _ in ordered[:k]]


def compare_to_reference(scores: dict[str, float], expected_positive: Sequence[str],
                         expected_negative: Sequence[str], top_k: int, source: str) -> HeadComparison:
    pos = top_heads(scores, top_k, "positive")
    neg = top_heads(scores, top_k, "negative")
    comparison = HeadComparison(
        source=source,
        top_k=top_k,
        expected_positive=list(expected_positive),
        expected_negative=list(expected_negative),
        top_positive=pos,
        top_negative=neg,
        missing_positive=[h for h in expected_positive if h not in pos],
        missing_negative=[h for h in expected_negative if h not in neg],
    )
    if not comparison.matches:
        logger.warning("[compare_to_reference] %s: missing positive %s, negative %s",
                       source, comparison.missing_positive, comparison.missing_negative)
    return comparison


def grid_scores(grid: AttributionGrid) -> dict[str, float]:
    return dict(zip(grid.labels, grid.values))

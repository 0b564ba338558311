"""GPT-2 Small forward pass with named hook points.

Every activation of a run is cached under a ``HookPoint``; ``HookOverride``s
replace an activation right after its natural computation so everything
downstream sees the replacement (node-replacement semantics used by
activation patching).

Checkpoint conversion: the published checkpoint stores its projections as
conv1d matrices of shape [in, out] applied as ``x @ W``. The fused
``c_attn`` matrix [d_model, 3*d_model] is split into Q, K, V and each is
reshaped to [n_heads, d_model, d_head]; ``c_proj`` of the attention block
becomes W_O [n_heads, d_head, d_model]. The unembedding is the tied token
embedding, W_U = W_E^T.
"""
import logging
import os
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from safetensors import SafetensorError
from safetensors.numpy import load_file

from app.errors import (
    ConfigError,
    ContextLengthError,
    HookOverrideError,
    WeightFormatError,
    WeightLoadError,
    WeightShapeError,
)
from app.services.tensor_core import (
    DTYPE,
    Tensor,
    causal_mask,
    gelu,
    layer_norm,
    matmul,
    softmax_rows,
)
from app.services.tokenizer import TokenSequence

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_layers: int = 12
    n_heads: int = 12
    d_model: int = 768
    d_head: int = 64
    d_mlp: int = 3072
    n_vocab: int = 50257
    n_ctx: int = 1024
    ln_eps: float = 1e-5

    @model_validator(mode="after")
    def check_head_split(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model {self.d_model} != n_heads {self.n_heads} * d_head {self.d_head}")
        return self


GPT2_SMALL = ModelConfig()


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerWeights:
    ln1_w: Tensor
    ln1_b: Tensor
    W_Q: Tensor   # [n_heads, d_model, d_head]
    b_Q: Tensor   # [n_heads, d_head]
    W_K: Tensor
    b_K: Tensor
    W_V: Tensor
    b_V: Tensor
    W_O: Tensor   # [n_heads, d_head, d_model]
    b_O: Tensor   # [d_model]
    ln2_w: Tensor
    ln2_b: Tensor
    W_in: Tensor  # [d_model, d_mlp]
    b_in: Tensor
    W_out: Tensor  # [d_mlp, d_model]
    b_out: Tensor


@dataclass(frozen=True)
class ModelWeights:
    W_E: Tensor    # [n_vocab, d_model]
    W_pos: Tensor  # [n_ctx, d_model]
    layers: list[LayerWeights]
    ln_f_w: Tensor
    ln_f_b: Tensor
    n_parameters: int = 0
    config: ModelConfig = GPT2_SMALL

    @property
    def W_U(self) -> Tensor:
        # [d_model, n_vocab], tied to the token embedding
        return self.W_E.T


def checkpoint_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Published tensor names and their stored shapes."""
    d, m = config.d_model, config.d_mlp
    shapes: dict[str, tuple[int, ...]] = {
        "wte.weight": (config.n_vocab, d),
        "wpe.weight": (config.n_ctx, d),
        "ln_f.weight": (d,),
        "ln_f.bias": (d,),
    }
    for i in range(config.n_layers):
        shapes.update({
            f"h.{i}.ln_1.weight": (d,),
            f"h.{i}.ln_1.bias": (d,),
            f"h.{i}.attn.c_attn.weight": (d, 3 * d),
            f"h.{i}.attn.c_attn.bias": (3 * d,),
            f"h.{i}.attn.c_proj.weight": (d, d),
            f"h.{i}.attn.c_proj.bias": (d,),
            f"h.{i}.ln_2.weight": (d,),
            f"h.{i}.ln_2.bias": (d,),
            f"h.{i}.mlp.c_fc.weight": (d, m),
            f"h.{i}.mlp.c_fc.bias": (m,),
            f"h.{i}.mlp.c_proj.weight": (m, d),
            f"h.{i}.mlp.c_proj.bias": (d,),
        })
    return shapes


def build_weights(tensors: dict[str, np.ndarray], config: ModelConfig) -> ModelWeights:
    """Validate checkpoint tensors against ``config`` and convert to model orientation."""
    tensors = {name.removeprefix("transformer."): arr for name, arr in tensors.items()}
    shapes = checkpoint_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise WeightLoadError(f"checkpoint is missing tensor '{name}'")
        if tuple(tensors[name].shape) != shape:
            raise WeightShapeError(
                f"tensor '{name}' has shape {tuple(tensors[name].shape)}, expected {shape}")

    def get(name: str) -> Tensor:
        return np.ascontiguousarray(tensors[name], dtype=DTYPE)

    h, dh, d = config.n_heads, config.d_head, config.d_model

    def split_heads_in(w: Tensor) -> Tensor:
        # [d_model, n_heads*d_head] -> [n_heads, d_model, d_head]
        return np.ascontiguousarray(w.reshape(d, h, dh).transpose(1, 0, 2))

    layers = []
    for i in range(config.n_layers):
        qkv_w = get(f"h.{i}.attn.c_attn.weight")
        qkv_b = get(f"h.{i}.attn.c_attn.bias")
        w_q, w_k, w_v = np.split(qkv_w, 3, axis=1)
        b_q, b_k, b_v = np.split(qkv_b, 3)
        layers.append(LayerWeights(
            ln1_w=get(f"h.{i}.ln_1.weight"),
            ln1_b=get(f"h.{i}.ln_1.bias"),
            W_Q=split_heads_in(w_q), b_Q=b_q.reshape(h, dh).copy(),
            W_K=split_heads_in(w_k), b_K=b_k.reshape(h, dh).copy(),
            W_V=split_heads_in(w_v), b_V=b_v.reshape(h, dh).copy(),
            W_O=get(f"h.{i}.attn.c_proj.weight").reshape(h, dh, d).copy(),
            b_O=get(f"h.{i}.attn.c_proj.bias"),
            ln2_w=get(f"h.{i}.ln_2.weight"),
            ln2_b=get(f"h.{i}.ln_2.bias"),
            W_in=get(f"h.{i}.mlp.c_fc.weight"),
            b_in=get(f"h.{i}.mlp.c_fc.bias"),
            W_out=get(f"h.{i}.mlp.c_proj.weight"),
            b_out=get(f"h.{i}.mlp.c_proj.bias"),
        ))

    n_parameters = sum(int(np.prod(shape)) for shape in shapes.values())
    return ModelWeights(
        W_E=get("wte.weight"),
        W_pos=get("wpe.weight"),
        layers=layers,
        ln_f_w=get("ln_f.weight"),
        ln_f_b=get("ln_f.bias"),
        n_parameters=n_parameters,
        config=config,
    )


def load_weights(path: str, config: ModelConfig = GPT2_SMALL) -> ModelWeights:
    if not os.path.isfile(path):
        raise WeightLoadError(f"weights file not found: {path}")
    try:
        tensors = load_file(path)
    except (SafetensorError, OSError, ValueError) as e:
        raise WeightFormatError(f"cannot parse safetensors archive {path}: {e}") from e

    weights = build_weights(tensors, config)
    logger.info("[load_weights] %s: %d parameters", path, weights.n_parameters)
    return weights


# ---------------------------------------------------------------------------
# Hook points, overrides and the activation cache
# ---------------------------------------------------------------------------

Site = Literal["resid_pre", "resid_mid", "resid_post", "attn_q", "attn_k", "attn_v",
               "attn_pattern", "attn_z", "attn_out", "mlp_out"]
SITES: tuple[str, ...] = ("resid_pre", "attn_q", "attn_k", "attn_v", "attn_pattern", "attn_z",
                          "attn_out", "resid_mid", "mlp_out", "resid_post")
HEAD_SITES = frozenset({"attn_q", "attn_k", "attn_v", "attn_pattern", "attn_z"})


@dataclass(frozen=True)
class HookPoint:
    layer: Union[int, Literal["final"]]
    site: str
    head: Optional[int] = None

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigError(f"unknown hook site '{self.site}'")
        if (self.head is not None) != (self.site in HEAD_SITES):
            raise ConfigError(f"hook site '{self.site}' {'requires' if self.site in HEAD_SITES else 'takes no'} head index")
        if self.layer == "final" and self.site != "resid_post":
            raise ConfigError("layer 'final' only has the resid_post site")

    def resolve(self, config: ModelConfig) -> "HookPoint":
        layer = config.n_layers - 1 if self.layer == "final" else self.layer
        if not isinstance(layer, int) or not 0 <= layer < config.n_layers:
            raise ConfigError(f"hook layer {self.layer} outside 0..{config.n_layers - 1}")
        if self.head is not None and not 0 <= self.head < config.n_heads:
            raise ConfigError(f"hook head {self.head} outside 0..{config.n_heads - 1}")
        return HookPoint(layer, self.site, self.head)

    @property
    def name(self) -> str:
        head = f".{self.head}" if self.head is not None else ""
        return f"{self.layer}.{self.site}{head}"


@dataclass(frozen=True)
class HookOverride:
    target: HookPoint
    replacement: Tensor
    positions: Optional[Sequence[int]] = None  # None -> every position


class ActivationCache:
    """Every activation of one forward pass.

    Head-scoped sites are stored stacked per layer ([n_heads, seq, d_head], or
    [n_heads, seq, seq] for patterns); indexing with a HookPoint that names a
    head returns that head's slice.
    """

    def __init__(self, config: ModelConfig, tokens: list[int],
                 activations: dict[tuple[int, str], Tensor],
                 ln_final_scale: Tensor, logits: Tensor):
        self.config = config
        self.tokens = tokens
        self._activations = activations
        self.ln_final_scale = ln_final_scale
        self.logits = logits

    @property
    def seq_len(self) -> int:
        return len(self.tokens)

    def stack(self, layer: int, site: str) -> Tensor:
        return self._activations[(layer, site)]

    def __getitem__(self, hook: HookPoint) -> Tensor:
        hook = hook.resolve(self.config)
        value = self._activations[(hook.layer, hook.site)]
        return value[hook.head] if hook.head is not None else value

    def hook_points(self) -> list[HookPoint]:
        points = []
        for layer, site in self._activations:
            if site in HEAD_SITES:
                points.extend(HookPoint(layer, site, h) for h in range(self.config.n_heads))
            else:
                points.append(HookPoint(layer, site))
        return points


class _OverridePlan:
    def __init__(self, overrides: Sequence[HookOverride], config: ModelConfig, seq_len: int):
        self.by_site: dict[tuple[int, str], list[tuple[HookPoint, HookOverride]]] = {}
        self.seq_len = seq_len
        self.config = config
        for override in overrides:
            hook = override.target.resolve(config)
            if override.positions is not None:
                bad = [p for p in override.positions if not -seq_len <= p < seq_len]
                if bad:
                    raise HookOverrideError(f"override positions {bad} outside sequence of {seq_len}")
            self.by_site.setdefault((hook.layer, hook.site), []).append((hook, override))

    def _width(self, site: str) -> int:
        if site == "attn_pattern":
            return self.seq_len
        if site in HEAD_SITES:
            return self.config.d_head
        return self.config.d_model

    def apply(self, layer: int, site: str, value: Tensor) -> Tensor:
        entries = self.by_site.get((layer, site))
        if not entries:
            return value
        value = value.copy()
        for hook, override in entries:
            rows = self.seq_len if override.positions is None else len(override.positions)
            expected = (rows, self._width(site))
            replacement = np.asarray(override.replacement, dtype=DTYPE)
            if replacement.shape != expected:
                raise HookOverrideError(
                    f"override for {hook.name} has shape {replacement.shape}, expected {expected}")
            index = slice(None) if override.positions is None else list(override.positions)
            if hook.head is not None:
                value[hook.head, index] = replacement
            else:
                value[index] = replacement
        return value


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def attention_scores_to_pattern(q: Tensor, k: Tensor) -> Tensor:
    """Causal softmax(q k^T / sqrt(d_head)) over the last axis; leading head axes allowed."""
    seq_len, d_head = q.shape[-2], q.shape[-1]
    scores = matmul(q, np.swapaxes(k, -1, -2)) / DTYPE(np.sqrt(d_head))
    scores = np.where(causal_mask(seq_len), DTYPE(-np.inf), scores)
    return softmax_rows(scores)


def attention_head(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Pattern [seq, seq] and mixed values z = pattern @ v [seq, d_head] for one head."""
    pattern = attention_scores_to_pattern(q, k)
    return pattern, matmul(pattern, v)


def project_head_input(resid: Tensor, weights: ModelWeights, config: ModelConfig,
                       layer: int, head: int, site: str) -> Tensor:
    """Recompute one head's q, k or v from a residual stream state [seq, d_model]."""
    lw = weights.layers[layer]
    normed, _ = layer_norm(resid, lw.ln1_w, lw.ln1_b, config.ln_eps)
    w, b = {
        "attn_q": (lw.W_Q, lw.b_Q),
        "attn_k": (lw.W_K, lw.b_K),
        "attn_v": (lw.W_V, lw.b_V),
    }[site]
    return matmul(normed, w[head]) + b[head]


def head_output(cache: ActivationCache, weights: ModelWeights, layer: int, head: int) -> Tensor:
    """One head's write into the residual stream, z @ W_O (bias excluded) [seq, d_model]."""
    z = cache.stack(layer, "attn_z")[head]
    return matmul(z, weights.layers[layer].W_O[head])


def forward(tokens: Union[TokenSequence, Sequence[int]], weights: ModelWeights,
            config: ModelConfig = GPT2_SMALL, overrides: Sequence[HookOverride] = (),
            final_only: bool = False) -> ActivationCache:
    """Run the model once and cache every hook point.

    With ``final_only`` the logits are kept for the last position only
    (shape [1, n_vocab]); patching sweeps only read that row.
    """
    ids = list(tokens.ids if isinstance(tokens, TokenSequence) else tokens)
    seq_len = len(ids)
    if seq_len == 0:
        raise ContextLengthError("cannot run the model on an empty token sequence")
    if seq_len > config.n_ctx:
        raise ContextLengthError(f"sequence of {seq_len} tokens exceeds n_ctx {config.n_ctx}")

    plan = _OverridePlan(overrides, config, seq_len)
    acts: dict[tuple[int, str], Tensor] = {}

    resid = weights.W_E[ids] + weights.W_pos[:seq_len]
    for layer, lw in enumerate(weights.layers):
        resid = plan.apply(layer, "resid_pre", resid)
        acts[(layer, "resid_pre")] = resid

        normed, _ = layer_norm(resid, lw.ln1_w, lw.ln1_b, config.ln_eps)
        # [seq, d_model] @ [heads, d_model, d_head] -> [heads, seq, d_head]
        q = plan.apply(layer, "attn_q", matmul(normed, lw.W_Q) + lw.b_Q[:, None, :])
        k = plan.apply(layer, "attn_k", matmul(normed, lw.W_K) + lw.b_K[:, None, :])
        v = plan.apply(layer, "attn_v", matmul(normed, lw.W_V) + lw.b_V[:, None, :])
        pattern = plan.apply(layer, "attn_pattern", attention_scores_to_pattern(q, k))
        z = plan.apply(layer, "attn_z", matmul(pattern, v))
        attn_out = plan.apply(layer, "attn_out", matmul(z, lw.W_O).sum(axis=0) + lw.b_O)
        acts.update({
            (layer, "attn_q"): q, (layer, "attn_k"): k, (layer, "attn_v"): v,
            (layer, "attn_pattern"): pattern, (layer, "attn_z"): z,
            (layer, "attn_out"): attn_out,
        })

        resid_mid = plan.apply(layer, "resid_mid", resid + attn_out)
        acts[(layer, "resid_mid")] = resid_mid

        normed, _ = layer_norm(resid_mid, lw.ln2_w, lw.ln2_b, config.ln_eps)
        hidden = gelu(matmul(normed, lw.W_in) + lw.b_in)
        mlp_out = plan.apply(layer, "mlp_out", matmul(hidden, lw.W_out) + lw.b_out)
        acts[(layer, "mlp_out")] = mlp_out

        resid = plan.apply(layer, "resid_post", resid_mid + mlp_out)
        acts[(layer, "resid_post")] = resid

    normed, ln_final_scale = layer_norm(resid, weights.ln_f_w, weights.ln_f_b, config.ln_eps)
    if final_only:
        normed = normed[-1:]
    logits = matmul(normed, weights.W_U)
    return ActivationCache(config, ids, acts, ln_final_scale, logits)

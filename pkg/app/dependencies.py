"""Shared, lazily built resources for the command handlers.

Loading GPT-2 Small takes seconds, so the tokenizer and weights are built
once per (path) and reused by every command in the process.
"""
from functools import lru_cache
from typing import Optional

from app.repository.templates import load_name_registry
from app.services.gpt2 import GPT2_SMALL, ModelWeights, load_weights
from app.models import PairTemplateSpec
from app.services.prompt_factory import NameRegistry
from app.services.tokenizer import BPETokenizer


@lru_cache(maxsize=4)
def get_tokenizer(vocab_path: str, merges_path: str) -> BPETokenizer:
    return BPETokenizer.from_files(vocab_path, merges_path)


@lru_cache(maxsize=2)
def get_weights(weights_path: str) -> ModelWeights:
    return load_weights(weights_path, GPT2_SMALL)


@lru_cache(maxsize=4)
def get_registry(path: Optional[str] = None) -> NameRegistry:
    return load_name_registry(path)


def pair_registry(template: PairTemplateSpec, tokenizer: BPETokenizer) -> Optional[NameRegistry]:
    """The checked name registry, for pair templates that draw names from it."""
    if not template.uses_registry:
        return None
    return get_registry().checked(tokenizer)


def clear_caches() -> None:
    get_tokenizer.cache_clear()
    get_weights.cache_clear()
    get_registry.cache_clear()

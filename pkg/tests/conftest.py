import json
import os
import sys

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from safetensors.numpy import save_file

from app.config import settings
from app.services.gpt2 import ModelConfig, build_weights, checkpoint_shapes, load_weights
from app.services.prompt_factory import NameRegistry
from app.services.tokenizer import ENDOFTEXT, BPETokenizer, bytes_to_unicode

# Byte-level merges under which the test names, pronouns and answers are single tokens
TOY_MERGES = [
    ("h", "e"),
    ("Ġ", "H"), ("ĠH", "e"),
    ("Ġ", "S"), ("ĠS", "he"), ("ĠS", "u"), ("ĠSu", "e"),
    ("Ġ", "J"), ("ĠJ", "o"), ("ĠJo", "h"), ("ĠJoh", "n"),
    ("Ġ", "M"), ("ĠM", "a"), ("ĠMa", "r"), ("ĠMar", "y"),
    ("ĠM", "i"), ("ĠMi", "k"), ("ĠMik", "e"),
    ("Ġ", "T"), ("ĠT", "o"), ("ĠTo", "m"),
    ("Ġ", "B"), ("ĠB", "o"), ("ĠBo", "b"),
    ("Ġ", "A"), ("ĠA", "n"), ("ĠAn", "n"),
    ("Ġ", "E"), ("ĠE", "v"), ("ĠEv", "e"),
    ("Ġ", "Y"), ("ĠY", "e"), ("ĠYe", "s"),
    ("Ġ", "N"), ("ĠN", "o"),
]
TOY_MALE = ["John", "Mike", "Tom", "Bob"]
TOY_FEMALE = ["Mary", "Ann", "Eve", "Sue"]


def toy_vocab() -> dict[str, int]:
    tokens = list(bytes_to_unicode().values())
    tokens += [a + b for a, b in TOY_MERGES]
    tokens.append(ENDOFTEXT)
    return {t: i for i, t in enumerate(tokens)}


def write_vocab_files(folder) -> tuple[str, str]:
    vocab_path = os.path.join(folder, "vocab.json")
    merges_path = os.path.join(folder, "merges.txt")
    with open(vocab_path, "w", encoding="utf-8") as f:
        json.dump(toy_vocab(), f, ensure_ascii=False)
    with open(merges_path, "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        f.write("".join(f"{a} {b}\n" for a, b in TOY_MERGES))
    return vocab_path, merges_path


def random_checkpoint(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Tensors under the published names and shapes, seeded."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in checkpoint_shapes(config).items():
        if name.endswith(("ln_1.weight", "ln_2.weight", "ln_f.weight")):
            values = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith("bias"):
            values = 0.02 * rng.standard_normal(shape)
        elif name == "wpe.weight":
            values = 0.05 * rng.standard_normal(shape)
        else:
            values = 0.3 * rng.standard_normal(shape)
        tensors[name] = np.ascontiguousarray(values, dtype=np.float32)
    return tensors


@pytest.fixture(scope="session")
def toy_model_dir(tmp_path_factory):
    folder = tmp_path_factory.mktemp("toy_model")
    write_vocab_files(str(folder))
    save_file(random_checkpoint(toy_config_value()), str(folder / "model.safetensors"))
    return folder


def toy_config_value() -> ModelConfig:
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=64,
                       n_vocab=len(toy_vocab()), n_ctx=256)


@pytest.fixture(scope="session")
def toy_config() -> ModelConfig:
    return toy_config_value()


@pytest.fixture(scope="session")
def tokenizer(toy_model_dir) -> BPETokenizer:
    return BPETokenizer.from_files(str(toy_model_dir / "vocab.json"), str(toy_model_dir / "merges.txt"))


@pytest.fixture(scope="session")
def toy_weights(toy_model_dir, toy_config):
    return load_weights(str(toy_model_dir / "model.safetensors"), toy_config)


@pytest.fixture
def toy_tensors(toy_config):
    return random_checkpoint(toy_config)


@pytest.fixture
def toy_built(toy_tensors, toy_config):
    return build_weights(toy_tensors, toy_config)


@pytest.fixture(scope="session")
def registry() -> NameRegistry:
    return NameRegistry(male_names=list(TOY_MALE), female_names=list(TOY_FEMALE))


@pytest.fixture(scope="session")
def gpt2_assets():
    """Real GPT-2 Small files from settings.MODEL_DIR; skips when absent."""
    paths = (settings.weights_path, settings.vocab_path, settings.merges_path)
    if not all(os.path.isfile(p) for p in paths):
        pytest.skip(f"GPT-2 Small files not found under {settings.MODEL_DIR}")
    tokenizer = BPETokenizer.from_files(settings.vocab_path, settings.merges_path)
    weights = load_weights(settings.weights_path)
    return tokenizer, weights

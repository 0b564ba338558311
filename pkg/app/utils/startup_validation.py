import logging
import os
from typing import List, Optional, Tuple

from pydantic import ValidationError

from app.errors import ConfigError
from app.models import RunConfig, SweepSpec
from app.services.gpt2 import GPT2_SMALL, ModelConfig

logger = logging.getLogger(__name__)


class StartupValidator:
    @staticmethod
    def check_paths(config: RunConfig, need_weights: bool = True) -> List[Tuple[str, bool]]:
        paths = [config.vocab_path, config.merges_path]
        if need_weights:
            paths.insert(0, config.weights_path)
        if config.prompts_path:
            paths.append(config.prompts_path)
        if config.sweep_path:
            paths.append(config.sweep_path)
        return [(path, os.path.isfile(path)) for path in paths]

    @staticmethod
    def load_sweep(config: RunConfig) -> Optional[SweepSpec]:
        if config.sweep is not None or not config.sweep_path:
            return config.sweep
        try:
            with open(config.sweep_path, "r", encoding="utf-8") as f:
                return SweepSpec.model_validate_json(f.read())
        except ValidationError as e:
            raise ConfigError(f"sweep spec {config.sweep_path} is invalid: {e}") from e

    @staticmethod
    def check_sweep(sweep: Optional[SweepSpec], model: ModelConfig = GPT2_SMALL) -> List[Tuple[str, bool]]:
        if sweep is None:
            return []
        results = []
        if sweep.layers is not None:
            results.append((f"layers {sweep.layers} within {model.n_layers}", sweep.layers[1] <= model.n_layers))
        if sweep.heads is not None:
            results.append((f"heads {sweep.heads} within {model.n_heads}", sweep.heads[1] <= model.n_heads))
        if sweep.positions is not None:
            results.append((f"positions {sweep.positions} within {model.n_ctx}", sweep.positions[1] <= model.n_ctx))
        for label in sweep.receivers:
            layer, head = (int(x) for x in label.split("."))
            results.append((f"receiver {label} within {model.n_layers}x{model.n_heads}",
                            layer < model.n_layers and head < model.n_heads))
        return results

    @staticmethod
    def run_all_checks(config: RunConfig, need_weights: bool = True,
                       model: ModelConfig = GPT2_SMALL) -> dict:
        sweep = StartupValidator.load_sweep(config) if config.sweep_path and os.path.isfile(config.sweep_path) \
            else config.sweep
        return {
            "paths": StartupValidator.check_paths(config, need_weights),
            "sweep": StartupValidator.check_sweep(sweep, model),
        }

    @staticmethod
    def validate(config: RunConfig, need_weights: bool = True, model: ModelConfig = GPT2_SMALL) -> None:
        """Log a checklist and raise ConfigError when anything failed."""
        results = StartupValidator.run_all_checks(config, need_weights, model)

        logger.info("=== Startup Validation ===")
        for section, checks in results.items():
            for name, ok in checks:
                logger.info("%s %s: %s", "✓" if ok else "✗", section, name)

        failed = [name for checks in results.values() for name, ok in checks if not ok]
        if failed:
            raise ConfigError(f"startup validation failed: {', '.join(failed)}")

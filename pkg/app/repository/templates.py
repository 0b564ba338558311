import glob
import json
import logging
import os
from typing import Optional

from pydantic import BaseModel, ValidationError

from app.config import settings
from app.errors import ConfigError, TemplateError, UsageError
from app.models import (
    DatasetRecord,
    Family,
    NameRegistryFile,
    PairTemplateSpec,
    ReferenceHeads,
    TemplateFile,
    TemplateSpec,
)
from app.services.prompt_factory import NameRegistry
from app.utils.storage import save_jsonl

logger = logging.getLogger(__name__)


def _load_model(path: str, model: type[BaseModel]):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return model.model_validate_json(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"{path} is not a valid {model.__name__}: {e}") from e


def template_dir(data_dir: Optional[str] = None) -> str:
    return os.path.join(data_dir or settings.DATA_DIR, "templates")


def load_template_files(data_dir: Optional[str] = None) -> list[TemplateFile]:
    paths = sorted(glob.glob(os.path.join(template_dir(data_dir), "*.json")))
    if not paths:
        raise ConfigError(f"no template files under {template_dir(data_dir)}")
    files = [_load_model(p, TemplateFile) for p in paths]
    logger.debug("[templates] loaded %d files", len(files))
    return files


def _family_file(family: Family, data_dir: Optional[str]) -> TemplateFile:
    for f in load_template_files(data_dir):
        if f.family == family:
            return f
    raise TemplateError(f"no templates for family {family}")


def get_template(family: Family, name: Optional[str] = None,
                 data_dir: Optional[str] = None) -> TemplateSpec:
    """The named template of a family, or the family's first template."""
    templates = _family_file(family, data_dir).templates
    if not templates:
        raise TemplateError(f"family {family} has no single-prompt templates")
    if name is None:
        return templates[0]
    for t in templates:
        if t.name == name:
            return t
    raise TemplateError(f"family {family} has no template '{name}'; known: {[t.name for t in templates]}")


def get_pair_template(family: Family, name: Optional[str] = None,
                      data_dir: Optional[str] = None) -> PairTemplateSpec:
    pairs = _family_file(family, data_dir).pairs
    if not pairs:
        raise TemplateError(f"family {family} has no clean/corrupted pair templates")
    if name is None:
        return pairs[0]
    for p in pairs:
        if p.name == name:
            return p
    raise TemplateError(f"family {family} has no pair template '{name}'; known: {[p.name for p in pairs]}")


def load_name_registry(path: Optional[str] = None) -> NameRegistry:
    path = path or os.path.join(settings.DATA_DIR, "names.json")
    names = _load_model(path, NameRegistryFile)
    return NameRegistry(male_names=names.male_names, female_names=names.female_names)


def load_reference_heads(path: Optional[str] = None) -> ReferenceHeads:
    return _load_model(path or os.path.join(settings.DATA_DIR, "reference_heads.json"), ReferenceHeads)


def read_prompts(path: str) -> list[DatasetRecord]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(DatasetRecord.model_validate(json.loads(line)))
                except (ValueError, ValidationError) as e:
                    raise ConfigError(f"{path}:{number}: not a prompt record: {e}") from e
    except OSError as e:
        raise ConfigError(f"cannot read prompts file {path}: {e}") from e
    if not records:
        raise UsageError(f"prompts file {path} holds no prompts")
    return records


def write_prompts(path: str, records: list[DatasetRecord]) -> str:
    return save_jsonl(path, records)

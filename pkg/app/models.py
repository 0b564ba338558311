import math
import re
from typing import Literal, Optional

from pydantic import BaseModel, Field, ValidationError, computed_field, field_validator, model_validator

from app.config import settings

Family = Literal["FL", "TCPA", "UDAAP", "IOI"]
Direction = Literal["denoise", "noise"]
SLOT_PATTERN = re.compile(r"\[([A-Za-z][A-Za-z0-9_-]*)\]")


class AnswerLabels(BaseModel):
    correct: str = "Yes"
    incorrect: str = "No"

    @classmethod
    def parse(cls, value: str) -> "AnswerLabels":
        parts = [p.strip() for p in value.split(",")]
        if len(parts) != 2 or not all(parts):
            raise ValueError(f"answers must look like 'Yes,No', got {value!r}")
        return cls(correct=parts[0], incorrect=parts[1])


class AnswerPair(BaseModel):
    correct_id: int
    incorrect_id: int
    labels: tuple[str, str]

    @model_validator(mode="after")
    def ids_differ(self):
        if self.correct_id == self.incorrect_id:
            raise ValueError("answer pair needs two different tokens")
        return self


# ---------------------------------------------------------------------------
# Prompt templates and datasets
# ---------------------------------------------------------------------------

class AnswerSlots(BaseModel):
    """Slots whose fillers are the answers (IOI: the indirect object and the subject)."""
    correct: str
    incorrect: str


class TemplateSpec(BaseModel):
    name: str
    family: Family
    text: str
    slot_vocabs: dict[str, list[str]] = Field(default_factory=dict)
    answer: AnswerLabels = Field(default_factory=AnswerLabels)
    answer_slots: Optional[AnswerSlots] = None
    distinct_groups: list[list[str]] = Field(default_factory=list)
    description: Optional[str] = None

    @property
    def slots(self) -> list[str]:
        seen: list[str] = []
        for slot in SLOT_PATTERN.findall(self.text):
            if slot not in seen:
                seen.append(slot)
        return seen

    @model_validator(mode="after")
    def check_slots(self):
        missing = [s for s in self.slots if not self.slot_vocabs.get(s)]
        if missing:
            raise ValueError(f"template '{self.name}' has slots without vocabulary: {missing}")
        for group in self.distinct_groups:
            vocabs = {tuple(self.slot_vocabs.get(s, ())) for s in group}
            if len(vocabs) != 1:
                raise ValueError(f"distinct group {group} must share one vocabulary")
        if self.answer_slots is not None:
            absent = {self.answer_slots.correct, self.answer_slots.incorrect} - set(self.slots)
            if absent:
                raise ValueError(f"answer slots {sorted(absent)} do not occur in the template")
        return self


class PairTemplateSpec(BaseModel):
    """Clean/corrupted template pair.

    Without ``slot_vocabs`` the slots [A], [B], [C] are filled from the name
    registry (Fair Lending). With ``slot_vocabs`` every slot of both texts is
    sampled from its vocabulary, ``distinct_groups`` spanning both sides.
    """
    name: str
    family: Family
    clean_text: str
    corrupted_text: str
    answer: AnswerLabels = Field(default_factory=AnswerLabels)
    slot_vocabs: dict[str, list[str]] = Field(default_factory=dict)
    answer_slots: Optional[AnswerSlots] = None
    distinct_groups: list[list[str]] = Field(default_factory=list)
    description: Optional[str] = None

    @property
    def uses_registry(self) -> bool:
        return not self.slot_vocabs

    def joint_template(self) -> TemplateSpec:
        """Both sides as one template, so one binding fills clean and corrupted alike."""
        return TemplateSpec(name=self.name, family=self.family,
                            text=f"{self.clean_text}\n{self.corrupted_text}",
                            slot_vocabs=self.slot_vocabs, answer=self.answer,
                            answer_slots=self.answer_slots, distinct_groups=self.distinct_groups)

    @model_validator(mode="after")
    def check_slot_vocabs(self):
        if self.slot_vocabs:
            try:
                self.joint_template()
            except ValidationError as e:
                raise ValueError(f"pair template '{self.name}': {e}") from e
        elif self.answer_slots is not None or self.distinct_groups:
            raise ValueError(f"pair template '{self.name}' sets answer slots without slot vocabularies")
        return self


class TemplateFile(BaseModel):
    """One ``data/templates/*.json`` file."""
    family: Family
    templates: list[TemplateSpec] = Field(default_factory=list)
    pairs: list[PairTemplateSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def same_family(self):
        stray = [t.name for t in [*self.templates, *self.pairs] if t.family != self.family]
        if stray:
            raise ValueError(f"templates {stray} do not belong to family {self.family}")
        return self


class NameRegistryFile(BaseModel):
    male_names: list[str]
    female_names: list[str]

    @field_validator("male_names", "female_names")
    @classmethod
    def unique(cls, value: list[str]):
        if not value:
            raise ValueError("name lists must not be empty")
        if len(set(value)) != len(value):
            raise ValueError("name lists must not repeat names")
        return value


class ReferenceHeads(BaseModel):
    """Head lists ("layer.head") a run is compared against."""
    dla_positive: list[str]
    dla_negative: list[str]
    patch_positive: list[str]
    patch_negative: list[str]
    top_k: int = 10


class DatasetRecord(BaseModel):
    """One JSON line of a prompt dataset. Records of a patching pair set also
    carry the token-aligned ``corrupted_text``."""
    text: str
    family: Family
    template: Optional[str] = None
    correct: str = "Yes"
    incorrect: str = "No"
    corrupted_text: Optional[str] = None
    note: Optional[str] = None


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

SweepKind = Literal["resid", "block", "head", "head_components", "path"]
HEAD_LABEL = re.compile(r"^\d+\.\d+$")


class SweepSpec(BaseModel):
    """Declarative patching sweep. Ranges are half-open [start, stop); None means all.

    A ``path`` sweep takes sender heads from ``layers`` x ``heads`` (layers
    below the earliest receiver) and patches each one's direct path into the
    ``receiver_site`` input of every head in ``receivers``.
    """
    site: SweepKind = "resid"
    layers: Optional[tuple[int, int]] = None
    heads: Optional[tuple[int, int]] = None
    positions: Optional[tuple[int, int]] = None
    direction: Direction = "denoise"
    pattern_mode: Literal["all", "end"] = "all"
    full_row: bool = False
    receivers: list[str] = Field(default_factory=list)
    receiver_site: Literal["attn_q", "attn_k", "attn_v"] = "attn_q"

    @field_validator("layers", "heads", "positions")
    @classmethod
    def check_range(cls, value):
        if value is not None and not 0 <= value[0] < value[1]:
            raise ValueError(f"range {value} must satisfy 0 <= start < stop")
        return value

    @field_validator("receivers")
    @classmethod
    def check_receivers(cls, value: list[str]):
        bad = [r for r in value if not HEAD_LABEL.match(r)]
        if bad:
            raise ValueError(f"receivers must be 'layer.head' labels, got {bad}")
        if len(set(value)) != len(value):
            raise ValueError("receivers must not repeat")
        return value

    @model_validator(mode="after")
    def path_needs_receivers(self):
        if self.site == "path" and not self.receivers:
            raise ValueError("a path sweep needs at least one receiver head")
        return self


class RunConfig(BaseModel):
    weights_path: str = Field(default_factory=lambda: settings.weights_path)
    vocab_path: str = Field(default_factory=lambda: settings.vocab_path)
    merges_path: str = Field(default_factory=lambda: settings.merges_path)
    prompts_path: Optional[str] = None
    family: Optional[Family] = None
    template: Optional[str] = None
    n_prompts: int = 4
    # overrides the labels carried by each prompt record
    answers: Optional[AnswerLabels] = None
    sweep_path: Optional[str] = None
    sweep: Optional[SweepSpec] = None
    direction: Optional[Direction] = None
    pattern_mode: Optional[Literal["all", "end"]] = None
    out_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    seed: int = Field(default_factory=lambda: settings.SEED)
    prepend_bos: bool = Field(default_factory=lambda: settings.PREPEND_BOS)
    both_bos: bool = False
    workers: int = Field(default_factory=lambda: settings.SWEEP_WORKERS)

    def resolved_sweep(self) -> SweepSpec:
        """The sweep to run, with command-line direction / pattern mode applied."""
        updates = {key: value for key, value in
                   (("direction", self.direction), ("pattern_mode", self.pattern_mode)) if value is not None}
        return (self.sweep or SweepSpec()).model_copy(update=updates)


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------

class AttributionGrid(BaseModel):
    schema_version: int = settings.SCHEMA_VERSION
    kind: Literal["accumulated", "per_layer", "per_head"]
    labels: list[str]
    values: list[float]
    shape: Optional[tuple[int, int]] = None
    prompt: Optional[str] = None

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.labels) != len(self.values):
            raise ValueError("labels and values differ in length")
        if self.kind == "per_head":
            if self.shape is None or self.shape[0] * self.shape[1] != len(self.values):
                raise ValueError("per_head grid needs shape (n_layers, n_heads) covering every value")
        return self

    def as_matrix(self) -> list[list[float]]:
        if self.shape is None:
            return [self.values]
        rows, cols = self.shape
        return [self.values[r * cols:(r + 1) * cols] for r in range(rows)]


class PatchGrid(BaseModel):
    schema_version: int = settings.SCHEMA_VERSION
    name: str
    axes: dict[str, list[str]]
    values: list[list[float]]
    direction: Direction = "denoise"
    n_pairs: int = 1

    @model_validator(mode="after")
    def check_cells(self):
        if len(self.axes) != 2:
            raise ValueError("patch grids have exactly two axes")
        rows, cols = (len(v) for v in self.axes.values())
        if len(self.values) != rows or any(len(r) != cols for r in self.values):
            raise ValueError(f"grid values do not match axes {rows}x{cols}")
        if not all(math.isfinite(x) for r in self.values for x in r):
            raise ValueError("patch grid contains non-finite scores")
        return self

    @property
    def row_axis(self) -> str:
        return next(iter(self.axes))

    @property
    def col_axis(self) -> str:
        return list(self.axes)[1]


class LogitRecord(BaseModel):
    prompt: str
    n_tokens: int
    prepend_bos: bool
    logit_yes: float
    logit_no: float
    p_yes: float
    p_no: float
    rank_yes: int
    rank_no: int
    logit_diff: float
    prob_ratio: float


class LogitTable(BaseModel):
    schema_version: int = settings.SCHEMA_VERSION
    answers: AnswerLabels
    records: list[LogitRecord]
    mean_logit_diff: float
    mean_prob_ratio: float


class HeadComparison(BaseModel):
    schema_version: int = settings.SCHEMA_VERSION
    source: str
    top_k: int
    expected_positive: list[str]
    expected_negative: list[str]
    top_positive: list[str]
    top_negative: list[str]
    missing_positive: list[str]
    missing_negative: list[str]

    @property
    def matches(self) -> bool:
        return not self.missing_positive and not self.missing_negative


class ComponentCheck(BaseModel):
    head: str
    value: float
    query: float
    key: float

    @computed_field
    @property
    def value_dominates(self) -> bool:
        return self.value > max(self.query, self.key)


class ComponentDominance(BaseModel):
    """Magnitudes of value, query and key patching for the top-ranked heads of
    the later layers; ``violations`` lists heads where value is not the largest."""
    schema_version: int = settings.SCHEMA_VERSION
    source: str
    top_k: int
    min_layer: int
    heads: list[ComponentCheck]
    violations: list[str]

    @computed_field
    @property
    def holds(self) -> bool:
        return not self.violations

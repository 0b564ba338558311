"""Algorithmic prompt generation for the compliance and IOI task families.

Templates are data (see ``data/templates``): ``[SLOT]`` markers are filled from
per-slot vocabularies. Fair Lending clean/corrupted pairs swap the female
name [B] and its pronoun for a male name [C] so both prompts tokenize to the
same length and differ only at those positions. Pair templates that carry
their own slot vocabularies (IOI) fill both sides from one sampled binding.
"""
import itertools
import logging
import math
import random
import re
from dataclasses import dataclass
from typing import Mapping, Optional

from app.errors import AlignmentError, CapacityError, ConfigError, TemplateError, TemplateVocabError
from app.models import SLOT_PATTERN, AnswerPair, DatasetRecord, PairTemplateSpec, TemplateSpec
from app.services.metrics import answer_pair
from app.services.tokenizer import BPETokenizer, TokenSequence

logger = logging.getLogger(__name__)

PRONOUNS = ("She", "He")
ENUMERATION_LIMIT = 200_000


@dataclass(frozen=True)
class NameRegistry:
    male_names: list[str]
    female_names: list[str]

    def multi_token_entries(self, tokenizer: BPETokenizer) -> list[str]:
        words = [*self.male_names, *self.female_names, *PRONOUNS]
        return [w for w in words if not tokenizer.is_single_token(w)]

    def checked(self, tokenizer: BPETokenizer) -> "NameRegistry":
        bad = self.multi_token_entries(tokenizer)
        if bad:
            raise AlignmentError(f"registry entries are not single tokens: {bad}")
        return self


@dataclass(frozen=True)
class PromptPair:
    clean_text: str
    corrupted_text: str
    clean_tokens: TokenSequence
    corrupted_tokens: TokenSequence
    diff_positions: list[int]
    answers: AnswerPair


def render(template: TemplateSpec, bindings: Mapping[str, str]) -> str:
    slots = template.slots
    unknown = sorted(set(bindings) - set(slots))
    if unknown:
        raise TemplateError(f"template '{template.name}' has no slots {unknown}")
    missing = [s for s in slots if s not in bindings]
    if missing:
        raise TemplateError(f"template '{template.name}' is missing bindings for {missing}")
    for slot, filler in bindings.items():
        if filler not in template.slot_vocabs[slot]:
            raise TemplateVocabError(f"'{filler}' is not in the vocabulary of slot [{slot}]")
    return SLOT_PATTERN.sub(lambda m: bindings[m.group(1)], template.text)


def combination_count(template: TemplateSpec) -> int:
    grouped = {slot for group in template.distinct_groups for slot in group}
    count = 1
    for slot in template.slots:
        if slot not in grouped:
            count *= len(template.slot_vocabs[slot])
    for group in template.distinct_groups:
        present = [s for s in group if s in template.slots]
        if present:
            count *= math.perm(len(template.slot_vocabs[present[0]]), len(present))
    return count


def _is_valid(template: TemplateSpec, bindings: Mapping[str, str]) -> bool:
    for group in template.distinct_groups:
        values = [bindings[s] for s in group if s in bindings]
        if len(values) != len(set(values)):
            return False
    return True


def sample_bindings(template: TemplateSpec, n: int, seed: int) -> list[dict[str, str]]:
    """``n`` distinct slot assignments, reproducible from ``seed``."""
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    capacity = combination_count(template)
    if n > capacity:
        raise CapacityError(
            f"template '{template.name}' has {capacity} distinct prompts, {n} requested")

    slots = template.slots
    rng = random.Random(seed)
    if capacity <= ENUMERATION_LIMIT:
        combos = [dict(zip(slots, values))
                  for values in itertools.product(*(template.slot_vocabs[s] for s in slots))]
        combos = [c for c in combos if _is_valid(template, c)]
        return rng.sample(combos, n)

    chosen: list[dict[str, str]] = []
    seen: set[tuple[str, ...]] = set()
    while len(chosen) < n:
        values = tuple(rng.choice(template.slot_vocabs[s]) for s in slots)
        bindings = dict(zip(slots, values))
        if values in seen or not _is_valid(template, bindings):
            continue
        seen.add(values)
        chosen.append(bindings)
    return chosen


def make_dataset(template: TemplateSpec, n: int, seed: int) -> list[str]:
    return [render(template, b) for b in sample_bindings(template, n, seed)]


def record_from_bindings(template: TemplateSpec, bindings: Mapping[str, str]) -> DatasetRecord:
    if template.answer_slots is not None:
        correct = bindings[template.answer_slots.correct]
        incorrect = bindings[template.answer_slots.incorrect]
    else:
        correct, incorrect = template.answer.correct, template.answer.incorrect
    return DatasetRecord(text=render(template, bindings), family=template.family,
                         template=template.name, correct=correct, incorrect=incorrect)


def make_records(template: TemplateSpec, n: int, seed: int) -> list[DatasetRecord]:
    """Same prompts as ``make_dataset``, with per-prompt answer labels."""
    records = [record_from_bindings(template, b) for b in sample_bindings(template, n, seed)]
    logger.debug("[make_records] %s: %d prompts (seed %d)", template.name, len(records), seed)
    return records


def pair_records(pairs: list[PromptPair], template: PairTemplateSpec) -> list[DatasetRecord]:
    return [DatasetRecord(text=p.clean_text, corrupted_text=p.corrupted_text, family=template.family,
                          template=template.name, correct=p.answers.labels[0],
                          incorrect=p.answers.labels[1])
            for p in pairs]


def slot_coverage(template: TemplateSpec, bindings: list[dict[str, str]]) -> dict[str, int]:
    """Number of distinct fillers used per slot."""
    return {slot: len({b[slot] for b in bindings}) for slot in template.slots}


# ---------------------------------------------------------------------------
# Clean / corrupted pairs
# ---------------------------------------------------------------------------

def _fill(text: str, names: Mapping[str, str]) -> str:
    def sub(match: re.Match) -> str:
        slot = match.group(1)
        if slot not in names:
            raise TemplateError(f"pair template slot [{slot}] has no name bound")
        return names[slot]
    return SLOT_PATTERN.sub(sub, text)


def align(clean: TokenSequence, corrupted: TokenSequence) -> list[int]:
    if len(clean) != len(corrupted):
        raise AlignmentError(
            f"clean prompt has {len(clean)} tokens, corrupted has {len(corrupted)}")
    return [i for i, (a, b) in enumerate(zip(clean.ids, corrupted.ids)) if a != b]


def make_fl_pair(a_name: str, b_name: str, c_name: str, registry: NameRegistry,
                 tokenizer: BPETokenizer, template: PairTemplateSpec,
                 prepend_bos: bool = True) -> PromptPair:
    """[A] and [C] are male-associated names, [B] female-associated."""
    if a_name not in registry.male_names or c_name not in registry.male_names:
        raise TemplateVocabError(f"'{a_name}' and '{c_name}' must both be registered male names")
    if b_name not in registry.female_names:
        raise TemplateVocabError(f"'{b_name}' must be a registered female name")
    for name in (a_name, b_name, c_name):
        if not tokenizer.is_single_token(name):
            raise AlignmentError(f"name '{name}' is not a single token")

    names = {"A": a_name, "B": b_name, "C": c_name}
    clean_text = _fill(template.clean_text, names)
    corrupted_text = _fill(template.corrupted_text, names)
    clean = tokenizer.encode(clean_text, prepend_bos=prepend_bos)
    corrupted = tokenizer.encode(corrupted_text, prepend_bos=prepend_bos)
    return PromptPair(
        clean_text=clean_text,
        corrupted_text=corrupted_text,
        clean_tokens=clean,
        corrupted_tokens=corrupted,
        diff_positions=align(clean, corrupted),
        answers=answer_pair(tokenizer, template.answer.correct, template.answer.incorrect),
    )


def make_slot_pair(template: PairTemplateSpec, bindings: Mapping[str, str], tokenizer: BPETokenizer,
                   prepend_bos: bool = True) -> PromptPair:
    """Fill both sides of a vocabulary-driven pair template from one binding."""
    clean_text = _fill(template.clean_text, bindings)
    corrupted_text = _fill(template.corrupted_text, bindings)
    clean = tokenizer.encode(clean_text, prepend_bos=prepend_bos)
    corrupted = tokenizer.encode(corrupted_text, prepend_bos=prepend_bos)
    try:
        positions = align(clean, corrupted)
    except AlignmentError as e:
        raise AlignmentError(f"pair template '{template.name}' with {dict(bindings)}: {e.detail}") from e
    if template.answer_slots is not None:
        correct = bindings[template.answer_slots.correct]
        incorrect = bindings[template.answer_slots.incorrect]
    else:
        correct, incorrect = template.answer.correct, template.answer.incorrect
    return PromptPair(clean_text, corrupted_text, clean, corrupted, positions,
                      answer_pair(tokenizer, correct, incorrect))


def make_pair_dataset(template: PairTemplateSpec, registry: Optional[NameRegistry], tokenizer: BPETokenizer,
                      n: int, seed: int, prepend_bos: bool = True) -> list[PromptPair]:
    """``n`` distinct pairs. Registry templates use (A, B, C) triples with
    A != C; vocabulary templates sample their slots like single prompts do."""
    if not template.uses_registry:
        bindings = sample_bindings(template.joint_template(), n, seed)
        return [make_slot_pair(template, b, tokenizer, prepend_bos) for b in bindings]
    if registry is None:
        raise ConfigError(f"pair template '{template.name}' draws its names from the registry")
    males, females = registry.male_names, registry.female_names
    capacity = len(males) * (len(males) - 1) * len(females)
    if n > capacity:
        raise CapacityError(f"name registry supports {capacity} pairs, {n} requested")
    rng = random.Random(seed)
    triples: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    while len(triples) < n:
        a, c = rng.sample(males, 2)
        triple = (a, rng.choice(females), c)
        if triple not in seen:
            seen.add(triple)
            triples.append(triple)
    return [make_fl_pair(a, b, c, registry, tokenizer, template, prepend_bos) for a, b, c in triples]


def pair_from_texts(clean_text: str, corrupted_text: str, tokenizer: BPETokenizer,
                    answers: AnswerPair, prepend_bos: bool = True,
                    description: Optional[str] = None) -> PromptPair:
    """Build an aligned pair from literal texts (e.g. a prompts file)."""
    clean = tokenizer.encode(clean_text, prepend_bos=prepend_bos)
    corrupted = tokenizer.encode(corrupted_text, prepend_bos=prepend_bos)
    try:
        positions = align(clean, corrupted)
    except AlignmentError as e:
        raise AlignmentError(f"{description or 'prompt pair'}: {e.detail}") from e
    return PromptPair(clean_text, corrupted_text, clean, corrupted, positions, answers)

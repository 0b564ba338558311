#!/usr/bin/env python3
"""
Check that every registered name, the pronouns, every template answer label
and every IOI name filler encode to a single GPT-2 token (with a leading space).
Run this after editing data/names.json or data/templates/.
"""

import argparse
import os
import sys

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.config import settings
from app.repository.templates import load_name_registry, load_template_files
from app.services.tokenizer import BPETokenizer


def answer_words(template) -> list[str]:
    words = [template.answer.correct, template.answer.incorrect]
    if template.answer_slots is not None:
        words += template.slot_vocabs[template.answer_slots.correct]
        words += template.slot_vocabs[template.answer_slots.incorrect]
    for group in template.distinct_groups:
        words += template.slot_vocabs[group[0]]
    return sorted(set(words))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--vocab", default=settings.vocab_path)
    parser.add_argument("--merges", default=settings.merges_path)
    args = parser.parse_args()

    tokenizer = BPETokenizer.from_files(args.vocab, args.merges)
    registry = load_name_registry()

    print("Checking name registry and pronouns...")
    failures = registry.multi_token_entries(tokenizer)

    print("Checking template answers and answer-slot fillers...")
    for template_file in load_template_files():
        templates = [*template_file.templates,
                     *(p.joint_template() for p in template_file.pairs if not p.uses_registry)]
        for template in templates:
            words = answer_words(template)
            failures += [f"{template.name}: {w}" for w in words if not tokenizer.is_single_token(w)]

    if failures:
        print(f"✗ {len(failures)} entries are not single tokens:")
        for entry in failures:
            print(f"  - {entry}")
        return 1

    print(f"✓ {len(registry.male_names)} male names, {len(registry.female_names)} female names, "
          "pronouns and answer labels are all single tokens")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Byte-level BPE tokenizer compatible with the published GPT-2 vocabulary.

Loads ``vocab.json`` (token string -> id) and ``merges.txt`` (ranked merge rules,
first line is a version header) and reproduces GPT-2's tokenization exactly:
regex pre-tokenization, byte -> printable-unicode mapping, then rank-ordered
merging inside each pre-token.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import regex

from app.errors import ContextLengthError, VocabError

logger = logging.getLogger(__name__)

ENDOFTEXT = "<|endoftext|>"
MAX_CONTEXT = 1024

_PRETOKENIZE = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")
_SPECIAL = regex.compile(regex.escape(ENDOFTEXT))


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Map every byte to a printable unicode character (GPT-2's reversible table)."""
    printable = (list(range(ord("!"), ord("~") + 1))
                 + list(range(ord("¡"), ord("¬") + 1))
                 + list(range(ord("®"), ord("ÿ") + 1)))
    chars = printable[:]
    extra = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + extra)
            extra += 1
    return dict(zip(printable, (chr(c) for c in chars)))


@dataclass(frozen=True)
class TokenSequence:
    ids: list[int]
    text: str

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    merges: list[tuple[str, str]]
    id_to_token: dict[int, str] = field(init=False)
    ranks: dict[tuple[str, str], int] = field(init=False)

    def __post_init__(self):
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if sorted(self.id_to_token) != list(range(len(self.token_to_id))):
            raise VocabError("vocabulary ids must be dense in [0, size)")
        self.ranks = {pair: rank for rank, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def eot_id(self) -> int:
        return self.token_to_id[ENDOFTEXT]


def load_vocab(vocab_path: str, merges_path: str) -> Vocab:
    try:
        with open(vocab_path, "r", encoding="utf-8") as f:
            token_to_id = {k: int(v) for k, v in json.load(f).items()}
        with open(merges_path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
    except (OSError, ValueError) as e:
        raise VocabError(f"cannot read vocabulary files: {e}") from e

    # first line is the "#version" header
    merges = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise VocabError(f"malformed merge rule: {line!r}")
        merges.append((parts[0], parts[1]))

    vocab = Vocab(token_to_id=token_to_id, merges=merges)
    if ENDOFTEXT not in token_to_id:
        raise VocabError(f"vocabulary has no {ENDOFTEXT} token")
    logger.info("[load_vocab] %d tokens, %d merges", vocab.size, len(merges))
    return vocab


class BPETokenizer:

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        self._cache: dict[str, list[str]] = {}

    @classmethod
    def from_files(cls, vocab_path: str, merges_path: str) -> "BPETokenizer":
        return cls(load_vocab(vocab_path, merges_path))

    def _bpe(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached

        symbols = list(word)
        ranks = self.vocab.ranks
        while len(symbols) > 1:
            best = min(zip(symbols, symbols[1:]), key=lambda p: ranks.get(p, float("inf")))
            if best not in ranks:
                break
            first, second = best
            merged = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == first and symbols[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged

        # Vocab is immutable; a racing duplicate insert writes the same value
        self._cache[word] = symbols
        return symbols

    def _encode_ordinary(self, text: str) -> list[int]:
        ids = []
        for piece in _PRETOKENIZE.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            for symbol in self._bpe(mapped):
                try:
                    ids.append(self.vocab.token_to_id[symbol])
                except KeyError as e:
                    raise VocabError(f"BPE produced unknown symbol {symbol!r}") from e
        return ids

    def encode(self, text: str, prepend_bos: bool = True) -> TokenSequence:
        ids = [self.vocab.eot_id] if prepend_bos else []
        cursor = 0
        for match in _SPECIAL.finditer(text):
            ids.extend(self._encode_ordinary(text[cursor:match.start()]))
            ids.append(self.vocab.eot_id)
            cursor = match.end()
        ids.extend(self._encode_ordinary(text[cursor:]))

        if len(ids) > MAX_CONTEXT:
            raise ContextLengthError(f"sequence of {len(ids)} tokens exceeds context of {MAX_CONTEXT}")
        return TokenSequence(ids=ids, text=text)

    def decode(self, ids: list[int]) -> str:
        pieces = []
        for i in ids:
            token = self.vocab.id_to_token.get(i)
            if token is None:
                raise VocabError(f"token id {i} outside vocabulary of {self.vocab.size}")
            pieces.append(token)
        text = "".join(pieces)
        # <|endoftext|> characters are all printable ASCII, so the byte round trip keeps it
        raw = bytes(self.byte_decoder[c] for c in text)
        return raw.decode("utf-8", errors="replace")

    def to_str_tokens(self, ids: list[int]) -> list[str]:
        return [self.decode([i]) for i in ids]

    def is_single_token(self, word: str) -> bool:
        if not word:
            return False
        return len(self.encode(" " + word, prepend_bos=False)) == 1

    def single_token_id(self, word: str) -> int:
        """Id of " " + word, raising VocabError when it spans several tokens."""
        seq = self.encode(" " + word, prepend_bos=False)
        if len(seq) != 1:
            raise VocabError(f"' {word}' is {len(seq)} tokens, expected exactly one")
        return seq.ids[0]

"""Deterministic lowercase word tokenizer with a hashing fallback for unknown words."""

from __future__ import annotations

import re
import zlib
from importlib import resources

import torch

from .errors import ConfigError, InputError, LengthError

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
NUM_SPECIAL = 3
CLASS_PLACEHOLDER = "<CLASS>"

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def default_vocabulary() -> list[str]:
    text = resources.files("vltune").joinpath("resources/vocab.txt").read_text()
    seen, words = set(), []
    for line in text.split():
        if line not in seen:
            seen.add(line)
            words.append(line)
    return words


def fill_template(template: str, class_name: str) -> str:
    if CLASS_PLACEHOLDER not in template:
        raise InputError(f"template {template!r} lacks the {CLASS_PLACEHOLDER} placeholder")
    return template.replace(CLASS_PLACEHOLDER, class_name)


class Tokenizer:
    """Maps text to ``[BOS, w1, ..., wn, EOS, PAD, ...]`` id rows.

    Known words get fixed ids; unknown words fall into one of the hash buckets
    occupying the remaining id range up to ``vocab_size``.
    """

    def __init__(self, vocab_size: int, max_len: int, words=None):
        words = default_vocabulary() if words is None else list(words)
        self.num_buckets = vocab_size - NUM_SPECIAL - len(words)
        if self.num_buckets < 1:
            raise ConfigError(
                f"vocab_size {vocab_size} too small for {len(words)} words plus specials and one hash bucket"
            )
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.word_to_id = {w: NUM_SPECIAL + i for i, w in enumerate(words)}

    def word_id(self, word: str) -> int:
        idx = self.word_to_id.get(word)
        if idx is not None:
            return idx
        bucket = zlib.crc32(word.encode("utf-8")) % self.num_buckets
        return NUM_SPECIAL + len(self.word_to_id) + bucket

    def encode(self, text: str) -> list[int]:
        ids = [BOS_ID] + [self.word_id(w) for w in split_words(text)] + [EOS_ID]
        if len(ids) > self.max_len:
            raise LengthError(f"text needs {len(ids)} tokens but max_text_len is {self.max_len}: {text!r}")
        return ids

    def __call__(self, texts) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        rows = [self.encode(t) for t in texts]
        width = max(len(r) for r in rows)
        out = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
        for i, row in enumerate(rows):
            out[i, : len(row)] = torch.tensor(row)
        return out

    def word_position(self, text: str, word: str) -> int:
        """Index of the first occurrence of ``word`` in the id row of ``text`` (BOS counts as 0)."""
        targets = split_words(word)
        if not targets:
            raise InputError(f"empty object word {word!r}")
        words = split_words(text)
        for i in range(len(words) - len(targets) + 1):
            if words[i : i + len(targets)] == targets:
                return i + 1
        raise InputError(f"word {word!r} does not occur in {text!r}")

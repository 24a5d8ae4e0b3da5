"""Deterministic surface-text statistics for prompt states.

All 14 features are pure functions of the input bytes: identical input
yields identical output across runs and platforms. The word lists behind
the density features ship as a versioned data file whose content hash is
recorded in report provenance.
"""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import SchemaError
from .store import PromptState

FEATURE_ORDER = (
    "word_count",
    "char_count",
    "sentence_count",
    "n_demos",
    "type_token_ratio",
    "compression_ratio",
    "step_word_density",
    "reasoning_word_density",
    "metacog_word_density",
    "numbered_list_presence",
    "avg_word_length",
    "question_count",
    "imperative_density",
    "uppercase_ratio",
)

# Five of the fourteen are standard statistics not named in the source
# analysis; reports label them accordingly.
NON_CANON_FEATURES = (
    "avg_word_length",
    "char_count",
    "question_count",
    "imperative_density",
    "uppercase_ratio",
)

_NUMBERED_LINE = re.compile(r"^\d+[.)]\s")
_SENTENCE_SPLIT = re.compile(r"[.!?]")


@dataclass(frozen=True)
class WordLists:
    step_words: frozenset[str]
    reasoning_words: frozenset[str]
    metacog_words: frozenset[str]
    imperative_verbs: frozenset[str]
    version: str
    content_hash: str

    @classmethod
    def from_json(cls, doc: dict) -> "WordLists":
        lists = {}
        for name in ("step_words", "reasoning_words", "metacog_words", "imperative_verbs"):
            entries = doc.get(name, [])
            for entry in entries:
                if not entry or entry != entry.lower():
                    raise ValueError(f"word list entry '{entry}' must be lowercase and nonempty")
            lists[name] = frozenset(entries)
        canonical = json.dumps(doc, sort_keys=True).encode("utf-8")
        return cls(
            step_words=lists["step_words"],
            reasoning_words=lists["reasoning_words"],
            metacog_words=lists["metacog_words"],
            imperative_verbs=lists["imperative_verbs"],
            version=str(doc.get("version", "unversioned")),
            content_hash=hashlib.sha256(canonical).hexdigest(),
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> "WordLists":
        """Load word lists from a JSON file, or the bundled defaults."""
        if path is None:
            text = resources.files("editfx.data").joinpath("wordlists.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_json(json.loads(text))


_default_lists: WordLists | None = None


def default_wordlists() -> WordLists:
    global _default_lists
    if _default_lists is None:
        _default_lists = WordLists.load()
    return _default_lists


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace runs with leading/trailing punctuation stripped.

    Punctuation here means any non-alphanumeric character; internal
    punctuation (hyphens, apostrophes) is kept. Tokens that strip to
    nothing are dropped.
    """
    tokens = []
    for chunk in text.split():
        start = 0
        end = len(chunk)
        while start < end and not chunk[start].isalnum():
            start += 1
        while end > start and not chunk[end - 1].isalnum():
            end -= 1
        if end > start:
            tokens.append(chunk[start:end].lower())
    return tokens


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """tokenize() plus each token's character span in the original text."""
    out = []
    pos = 0
    n = len(text)
    while pos < n:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
        chunk_start = pos
        while pos < n and not text[pos].isspace():
            pos += 1
        start, end = chunk_start, pos
        while start < end and not text[start].isalnum():
            start += 1
        while end > start and not text[end - 1].isalnum():
            end -= 1
        if end > start:
            out.append((text[start:end].lower(), start, end))
    return out


def compression_ratio(text: str) -> float:
    """Raw DEFLATE (level 6) size over UTF-8 size; 0.0 for empty text.

    Empty input has no ratio to speak of; it reports 0.0 so the whole
    empty-text feature vector is zero, like every other feature.
    """
    data = text.encode("utf-8")
    if not data:
        return 0.0
    compressor = zlib.compressobj(level=6, wbits=-15)
    compressed = compressor.compress(data) + compressor.flush()
    return len(compressed) / len(data)


def sentence_count(text: str) -> int:
    """Segments ended by '.', '!', '?' or end-of-text that contain a token."""
    return sum(1 for seg in _SENTENCE_SPLIT.split(text) if tokenize(seg))


def extract(state: PromptState, lists: WordLists | None = None) -> dict[str, float]:
    """Compute the fixed 14-feature surface vector for one prompt state.

    Densities are matching-token counts divided by word_count, defined as 0
    when the instruction has no tokens.
    """
    if lists is None:
        lists = default_wordlists()
    text = state.instruction_text
    tokens = tokenize(text)
    n_words = len(tokens)

    def density(words: frozenset[str]) -> float:
        if n_words == 0:
            return 0.0
        return sum(1 for t in tokens if t in words) / n_words

    letters = [c for c in text if c.isalpha()]
    numbered = any(_NUMBERED_LINE.match(line) for line in text.splitlines())

    return {
        "word_count": float(n_words),
        "char_count": float(len(text)),
        "sentence_count": float(sentence_count(text)),
        "n_demos": float(len(state.demos)),
        "type_token_ratio": (len(set(tokens)) / n_words) if n_words else 0.0,
        "compression_ratio": compression_ratio(text),
        "step_word_density": density(lists.step_words),
        "reasoning_word_density": density(lists.reasoning_words),
        "metacog_word_density": density(lists.metacog_words),
        "numbered_list_presence": 1.0 if numbered else 0.0,
        "avg_word_length": (sum(len(t) for t in tokens) / n_words) if n_words else 0.0,
        "question_count": float(text.count("?")),
        "imperative_density": density(lists.imperative_verbs),
        "uppercase_ratio": (
            sum(1 for c in letters if c.isupper()) / len(letters) if letters else 0.0
        ),
    }


def delta(before: dict[str, float], after: dict[str, float]) -> dict[str, float]:
    """Per-feature after - before. Both vectors must share the schema."""
    if set(before) != set(after):
        raise SchemaError("surface vectors have mismatched feature schemas")
    return {name: after[name] - before[name] for name in before}

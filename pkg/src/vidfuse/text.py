"""Tokenization and source/target prompt alignment.

The vocabulary is the toy sprite grammar plus <bos>/<pad>/<unk>, persisted as
a sorted word-per-line file whose line number is the token id. Prompts are
lowercased, stripped of punctuation, whitespace-split and padded to a fixed
length of 12 tokens.

Alignment between a source and an edit prompt is a longest-common-subsequence
match on the word sequences; unmatched source words form the source-side
edited set and unmatched target words the target-side one. Matching on words
rather than ids keeps two distinct out-of-vocabulary words from aligning just
because both map to <unk>. A positional comparison mode (``positional=True``)
is kept for strict equal-length substitution edits.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"

GRAMMAR_WORDS = (
    "a", "red", "green", "blue", "square", "circle", "triangle",
    "moving", "left", "right", "up", "down", "on", "black", "white",
    "background",
)

MAX_TOKENS = 12

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def default_vocabulary() -> tuple[str, ...]:
    """All words sorted; token id is the position in this tuple."""
    return tuple(sorted(set(GRAMMAR_WORDS) | {PAD, UNK, BOS}))


class Vocabulary:
    def __init__(self, words: tuple[str, ...] | None = None):
        self.words = words if words is not None else default_vocabulary()
        self.index = {w: i for i, w in enumerate(self.words)}
        for special in (PAD, UNK, BOS):
            if special not in self.index:
                raise ValueError(f"vocabulary missing special token {special}")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        words = tuple(Path(path).read_text().splitlines())
        return cls(words)


_DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]         # length MAX_TOKENS, PAD only as suffix
    raw_words: tuple[str, ...]   # the non-pad lowercase words, in order

    @property
    def length(self) -> int:
        """Number of non-pad tokens."""
        return len(self.raw_words)


def _words_of(prompt: str) -> list[str]:
    return [w for w in prompt.lower().translate(_PUNCT_TABLE).split() if w]


def tokenize(prompt: str, vocab: Vocabulary = _DEFAULT_VOCAB) -> TokenSeq:
    """Lowercase, strip punctuation, split, map to ids, pad/truncate to MAX_TOKENS."""
    words = _words_of(prompt)[:MAX_TOKENS]
    ids = [vocab.index.get(w, vocab.unk_id) for w in words]
    ids += [vocab.pad_id] * (MAX_TOKENS - len(ids))
    return TokenSeq(tuple(ids), tuple(words))


@dataclass(frozen=True)
class EditPlan:
    src_tokens: TokenSeq
    edit_tokens: TokenSeq
    alignment: tuple[tuple[int, int], ...]  # (src position, edit position) pairs
    src_edited: frozenset[int]
    edit_edited: frozenset[int]

    @property
    def is_identity(self) -> bool:
        return self.src_tokens.ids == self.edit_tokens.ids

    def edited_words(self, side: str = "src") -> tuple[str, ...]:
        tokens = self.src_tokens if side == "src" else self.edit_tokens
        edited = self.src_edited if side == "src" else self.edit_edited
        return tuple(tokens.raw_words[i] for i in sorted(edited))


def _lcs_pairs(a: tuple[str, ...], b: tuple[str, ...]) -> list[tuple[int, int]]:
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            if a[i] == b[j]:
                dp[i][j] = dp[i + 1][j + 1] + 1
            else:
                dp[i][j] = max(dp[i + 1][j], dp[i][j + 1])
    pairs = []
    i = j = 0
    while i < m and j < n:
        if a[i] == b[j] and dp[i][j] == dp[i + 1][j + 1] + 1:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def align_prompts(
    p_src: str,
    p_edit: str,
    vocab: Vocabulary = _DEFAULT_VOCAB,
    positional: bool = False,
) -> EditPlan:
    """Word-level alignment between the source and target prompts.

    LCS by default; ``positional=True`` reproduces a plain elementwise
    inequality test (only sensible for equal-length substitutions).
    """
    src = tokenize(p_src, vocab)
    edit = tokenize(p_edit, vocab)
    if positional:
        pairs = [
            (i, i)
            for i in range(min(src.length, edit.length))
            if src.raw_words[i] == edit.raw_words[i]
        ]
    elif (src.raw_words, edit.raw_words) <= (edit.raw_words, src.raw_words):
        pairs = _lcs_pairs(src.raw_words, edit.raw_words)
    else:
        # canonicalize argument order so alignment is symmetric under swap
        pairs = [(i, j) for j, i in _lcs_pairs(edit.raw_words, src.raw_words)]
        pairs.sort()
    matched_src = {i for i, _ in pairs}
    matched_edit = {j for _, j in pairs}
    return EditPlan(
        src_tokens=src,
        edit_tokens=edit,
        alignment=tuple(pairs),
        src_edited=frozenset(set(range(src.length)) - matched_src),
        edit_edited=frozenset(set(range(edit.length)) - matched_edit),
    )

"""Word-level tokenizer with fixed special ids.

The synthetic grammar has a closed vocabulary, so whitespace word
tokenization replaces subword modeling. Ids 0-3 are reserved so that
checkpoints stay portable across runs regardless of corpus ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthError, OOVError, VocabError

BOS = 0
EOS = 1
PAD = 2
MASK = 3
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<mask>")
NUM_SPECIALS = 4


@dataclass(frozen=True)
class Vocab:
    """Bijective word <-> id table; specials occupy ids 0-3."""

    words: tuple[str, ...]  # non-special tokens, id = NUM_SPECIALS + index

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise VocabError("duplicate words in vocabulary")

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return NUM_SPECIALS + self.words.index(word)
        except ValueError:
            raise OOVError(f"word not in vocabulary: {word!r}") from None

    def word_of(self, token_id: int) -> str:
        idx = token_id - NUM_SPECIALS
        if 0 <= idx < len(self.words):
            return self.words[idx]
        raise VocabError(f"id {token_id} has no word entry")


@dataclass
class TokenSeq:
    """Fixed-length token-id row: [BOS, w1..wn, EOS, PAD...].

    `valid` marks BOS..EOS; PAD appears only as a contiguous suffix.
    """

    ids: np.ndarray   # int32 [L]
    valid: np.ndarray  # int8 [L], 1 on BOS..EOS

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        self.valid = np.asarray(self.valid, dtype=np.int8)

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    def check(self, vocab_size: int) -> None:
        """Raise if the sequence violates the TokenSeq invariants."""
        if self.ids.min() < 0 or self.ids.max() >= vocab_size:
            raise VocabError("token id out of range")
        pad = self.ids == PAD
        if not np.array_equal(pad, self.valid == 0):
            raise VocabError("valid mask does not match PAD positions")
        if pad.any():
            first = int(np.argmax(pad))
            if not pad[first:].all():
                raise VocabError("PAD must be a contiguous suffix")
        if int((self.ids[self.valid == 1] == EOS).sum()) != 1:
            raise VocabError("encoded caption must contain exactly one EOS")


def build_vocab(corpus: list[str]) -> Vocab:
    """Deterministic (lexicographic) whitespace vocabulary over `corpus`."""
    if not corpus:
        raise VocabError("corpus is empty")
    words = sorted({w for caption in corpus for w in caption.split()})
    return Vocab(tuple(words))


def encode(caption: str, vocab: Vocab, max_len: int,
           truncate: bool = False) -> TokenSeq:
    """Encode to [BOS, words..., EOS, PAD...] of length `max_len`.

    Captions longer than max_len - 2 words raise LengthError unless
    `truncate`, in which case trailing words are dropped before EOS.
    """
    words = caption.split()
    if len(words) > max_len - 2:
        if truncate:
            words = words[: max_len - 2]
        else:
            raise LengthError(
                f"caption has {len(words)} words; limit is {max_len - 2}")
    ids = [BOS] + [vocab.id_of(w) for w in words] + [EOS]
    n = len(ids)
    ids = ids + [PAD] * (max_len - n)
    valid = [1] * n + [0] * (max_len - n)
    return TokenSeq(np.array(ids, dtype=np.int32), np.array(valid, dtype=np.int8))


def decode(seq: TokenSeq, vocab: Vocab) -> str:
    """Inverse of encode on its image; strips all special tokens."""
    words = []
    for tid in seq.ids:
        tid = int(tid)
        if tid == EOS:
            break
        if tid == BOS:
            continue
        if tid in (PAD, MASK):
            raise VocabError(f"unexpected special id {tid} before EOS")
        words.append(vocab.word_of(tid))
    return " ".join(words)


def reverse_caption(seq: TokenSeq) -> TokenSeq:
    """Reverse the content words between BOS and EOS; involution."""
    ids = seq.ids.copy()
    n = int(seq.valid.sum())  # BOS..EOS span
    ids[1: n - 1] = ids[1: n - 1][::-1]
    return TokenSeq(ids, seq.valid.copy())


def save_vocab(path, vocab: Vocab) -> None:
    """One token per line, line number = id, specials first (UTF-8, LF)."""
    lines = list(SPECIAL_TOKENS) + list(vocab.words)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))


def load_vocab(path) -> Vocab:
    with open(path, "rb") as f:
        lines = f.read().decode("utf-8").splitlines()
    if tuple(lines[:NUM_SPECIALS]) != SPECIAL_TOKENS:
        raise VocabError(f"vocab file {path} lacks the special-token header")
    return Vocab(tuple(lines[NUM_SPECIALS:]))

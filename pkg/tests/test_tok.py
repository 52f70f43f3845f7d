import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caplab import datagen, tok
from caplab.errors import LengthError, OOVError, VocabError


def test_vocab_size_counts_specials():
    v = tok.build_vocab(["red circle"])
    assert v.size == 4 + 2


def test_build_vocab_deterministic():
    corpus = ["red circle", "blue square above green cross"]
    assert tok.build_vocab(corpus) == tok.build_vocab(list(corpus))


def test_grammar_vocab_matches_enumerated_terminals():
    # oracle: enumerate the grammar's terminal set directly
    terminals = set(datagen.COLORS) | set(datagen.SHAPES) | {
        "left", "right", "of", "above", "below", "and"}
    examples = datagen.gen_dataset(512, seed=3)
    v = tok.build_vocab([e.caption for e in examples])
    assert set(v.words) <= terminals
    assert v.size == 4 + len(v.words)
    # with enough samples every terminal appears
    assert set(v.words) == terminals


def test_encode_layout():
    v = tok.build_vocab(["red circle"])
    seq = tok.encode("red circle", v, 6)
    assert seq.ids.tolist() == [tok.BOS, v.id_of("red"), v.id_of("circle"),
                                tok.EOS, tok.PAD, tok.PAD]
    assert seq.valid.tolist() == [1, 1, 1, 1, 0, 0]
    seq.check(v.size)


def test_encode_empty_caption():
    v = tok.build_vocab(["red circle"])
    seq = tok.encode("", v, 4)
    assert seq.ids.tolist() == [tok.BOS, tok.EOS, tok.PAD, tok.PAD]


def test_encode_errors():
    v = tok.build_vocab(["red circle"])
    with pytest.raises(OOVError):
        tok.encode("purple circle", v, 8)
    with pytest.raises(LengthError):
        tok.encode("red circle red circle", v, 5)
    # truncation policy keeps the prefix
    seq = tok.encode("red circle red circle", v, 5, truncate=True)
    assert tok.decode(seq, v) == "red circle red"


def test_roundtrip_on_grammar_captions():
    examples = datagen.gen_dataset(64, seed=11)
    v = tok.build_vocab([e.caption for e in examples])
    for e in examples:
        seq = tok.encode(e.caption, v, 12)
        seq.check(v.size)
        assert tok.decode(seq, v) == e.caption


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(datagen.grammar_terminals()), min_size=0, max_size=9))
def test_roundtrip_arbitrary_word_lists(words):
    v = tok.Vocab(tuple(sorted(set(datagen.grammar_terminals()))))
    caption = " ".join(words)
    assert tok.decode(tok.encode(caption, v, 12), v) == caption


def test_encode_injective_on_distinct_sequences():
    v = tok.Vocab(("a", "b", "c"))
    seen = {}
    import itertools
    for n in range(3):
        for words in itertools.product("abc", repeat=n):
            key = tok.encode(" ".join(words), v, 6).ids.tobytes()
            assert key not in seen
            seen[key] = words


def test_reverse_caption():
    v = tok.Vocab(("a", "b", "c"))
    seq = tok.encode("a b c", v, 6)
    rev = tok.reverse_caption(seq)
    assert tok.decode(rev, v) == "c b a"
    assert rev.ids[0] == tok.BOS and rev.ids[4] == tok.EOS and rev.ids[5] == tok.PAD
    # involution
    again = tok.reverse_caption(rev)
    assert np.array_equal(again.ids, seq.ids)
    # single word is a fixed point
    one = tok.encode("b", v, 6)
    assert np.array_equal(tok.reverse_caption(one).ids, one.ids)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=0, max_size=6))
def test_reverse_is_involution(words):
    v = tok.Vocab(("a", "b", "c"))
    seq = tok.encode(" ".join(words), v, 10)
    twice = tok.reverse_caption(tok.reverse_caption(seq))
    assert np.array_equal(twice.ids, seq.ids)
    assert np.array_equal(twice.valid, seq.valid)


def test_vocab_file_roundtrip(tmp_path):
    v = tok.build_vocab(["red circle above blue square"])
    path = tmp_path / "vocab.txt"
    tok.save_vocab(path, v)
    assert tok.load_vocab(path) == v
    raw = path.read_bytes()
    assert raw.startswith(b"<bos>\n<eos>\n<pad>\n<mask>\n")
    assert b"\r" not in raw


def test_decode_invalid_id():
    v = tok.Vocab(("a",))
    seq = tok.TokenSeq(np.array([tok.BOS, 9, tok.EOS, tok.PAD]),
                       np.array([1, 1, 1, 0]))
    with pytest.raises(VocabError):
        tok.decode(seq, v)

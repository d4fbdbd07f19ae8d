import pytest
from hypothesis import given
from hypothesis import strategies as st

from auxmoblcast.errors import EmptyCorpusError, IdOutOfRangeError
from auxmoblcast.prompting import parse_mobility_target, PromptVariant
from auxmoblcast.tokenizer import (
    BOS_ID, CLS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, UNK_ID,
    TokenSequence, TruncationWarning, Vocabulary, build_vocab, decode, encode, tokenize,
)
from conftest import TABLE1_STRINGS

TABLE1_INPUTS = [TABLE1_STRINGS[k][0] for k in "ABC"]
TABLE1_TARGETS = [TABLE1_STRINGS[k][1] for k in "ABC"]


def test_segmentation():
    v = build_vocab(["On July 02, 2020, Thursday,"])
    for tok in ["On", "July", "02", ",", "2020", "Thursday"]:
        assert tok in v
    assert tokenize("Place-of-Interest (POI) 385 is") == ["Place-of-Interest", "(", "POI", ")", "385", "is"]
    assert tokenize("day.") == ["day", "."]


def test_special_ids_and_order():
    v = build_vocab(["b a a", "c c c"])
    assert v.tokens[:5] == SPECIAL_TOKENS
    assert (PAD_ID, UNK_ID, CLS_ID, BOS_ID, EOS_ID) == (0, 1, 2, 3, 4)
    assert v.tokens[5:] == ("c", "a", "b")
    assert [v.id_of[t] for t in v.tokens] == list(range(v.size))


def test_deterministic():
    assert build_vocab(["On July 02, 2020, Thursday,"]) == build_vocab(["On July 02, 2020, Thursday,"])


def test_table1_vocab():
    # Independent count: grep -o '\b385\b' over the three inputs -> 2 occurrences,
    # all in Prompt A; the vocabulary must still carry it once.
    v = build_vocab(TABLE1_INPUTS)
    assert "people" in v and "visiting" in v
    assert v.tokens.count("385") == 1
    assert sum(text.split().count("385") for text in TABLE1_INPUTS) == 2


def test_min_count():
    v = build_vocab(["a a b"], min_count=2)
    assert "a" in v and "b" not in v
    assert encode(v, "b").ids == (UNK_ID,)
    with pytest.raises(ValueError):
        build_vocab(["a"], min_count=0)
    with pytest.raises(EmptyCorpusError):
        build_vocab([])


def test_encode_edge_cases():
    v = build_vocab(TABLE1_INPUTS)
    assert encode(v, "", add_cls=True).ids == (CLS_ID,)
    assert encode(v, "zzzz-unknown").ids == (UNK_ID,)
    seq = encode(v, TABLE1_INPUTS[0], add_cls=True)
    assert seq.ids[0] == CLS_ID and not seq.truncated


def test_truncation_flag():
    v = build_vocab(["a"], max_len=4)
    with pytest.warns(TruncationWarning):
        seq = encode(v, "a a a a a a")
    assert seq.truncated and seq.length == 4


def test_decode_rules():
    v = build_vocab(["there will be 11 people."])
    ids = [v.id_of[t] for t in ["there", "will", "be", "11", "people", "."]]
    assert decode(v, TokenSequence(tuple(ids))) == "there will be 11 people."
    assert decode(v, TokenSequence((CLS_ID,))) == ""
    assert decode(v, [BOS_ID, v.id_of["11"], EOS_ID]) == "11"
    with pytest.raises(IdOutOfRangeError):
        decode(v, [v.size])


def test_table1_roundtrip():
    v = build_vocab(TABLE1_INPUTS + TABLE1_TARGETS)
    for text in TABLE1_INPUTS + TABLE1_TARGETS:
        assert decode(v, encode(v, text, add_cls=True)) == text
    for kind, target in zip("ABC", TABLE1_TARGETS):
        assert parse_mobility_target(decode(v, encode(v, target)), PromptVariant(kind)) == 11


def test_vocab_file(tmp_path):
    v = build_vocab(TABLE1_INPUTS)
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[:5] == list(SPECIAL_TOKENS)
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


words = st.text(alphabet="abcXYZ", min_size=1, max_size=6)
numbers = st.integers(0, 10_000).map(str)
pieces = st.lists(st.one_of(words, numbers), min_size=1, max_size=12)


@given(pieces, st.sampled_from([", ", " ", ". ", " ("]))
def test_invertibility_on_template_text(parts, sep):
    text = sep.join(parts)
    if sep == " (":
        text += ")"
    v = build_vocab([text])
    assert decode(v, encode(v, text)) == text

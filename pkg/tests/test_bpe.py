import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from moelab.bpe import (
    BpeModel,
    BpeTrainingError,
    MetricError,
    ModelFileError,
    decode,
    decode_bytes,
    efficiency_metrics,
    encode,
    load_model,
    save_model,
    train_bpe,
)
from moelab.pretokenizer import pretoken_bytes, pretokenize


def naive_train(corpus, n_merges):
    """Recount every pair from scratch each round; ties go to the smallest pair."""
    words = Counter()
    for doc in corpus:
        for t in pretokenize(doc):
            words[tuple(bytes([b]) for b in pretoken_bytes(t))] += 1
    merges = []
    for _ in range(n_merges):
        pairs = Counter()
        for w, f in words.items():
            for p in zip(w, w[1:]):
                pairs[p] += f
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        nxt = Counter()
        for w, f in words.items():
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == best:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            nxt[tuple(out)] += f
        words = nxt
    return merges


def random_corpus(seed, docs=20):
    rng = random.Random(seed)
    vocab = ["the", "then", "cat", "cats", "at", "a", "tea", "ate", "eat", "teach", "12345", "漢字", "don't"]
    return [" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 30))) + rng.choice([".", "!\n", ""]) for _ in range(docs)]


# ---------------------------------------------------------------- training


def test_aaaa_merges():
    model = train_bpe(["aaaa"] * 10, 258)
    assert model.merges == [(b"a", b"a"), (b"aa", b"aa")]
    assert encode(model, "aaaa") == [257]


def test_byte_model_has_no_merges():
    model = train_bpe(["hello"], 256 + 2, special_tokens=["<a>", "<b>"])
    assert model.merges == []
    assert encode(model, "hi") == [ord("h"), ord("i")]


def test_empty_corpus_and_small_vocab():
    with pytest.raises(BpeTrainingError):
        train_bpe([], 300)
    with pytest.raises(BpeTrainingError):
        train_bpe(["x"], 255)


@pytest.mark.parametrize("seed", range(4))
def test_training_matches_naive_oracle(seed):
    corpus = random_corpus(seed)
    model = train_bpe(corpus, 256 + 40)
    assert model.merges == naive_train(corpus, 40)


def test_merges_stay_inside_pretokens():
    model = train_bpe(["a b a b a b a b"], 300)
    for a, b in model.merges:
        tok = a + b
        assert len(pretokenize(tok)) == 1


def random_word_corpus(seed, docs):
    rng = random.Random(seed)
    words = ["".join(rng.choice("abcdefghijklmnop") for _ in range(rng.randint(2, 9))) for _ in range(300)]
    return [" ".join(rng.choice(words) for _ in range(40)) for _ in range(docs)]


@pytest.mark.parametrize("k", [260, 300, 500])
@pytest.mark.parametrize("seed", range(3))
def test_truncation_equivalence(k, seed):
    corpus = random_word_corpus(seed, docs=60)
    big = train_bpe(corpus, 600)
    assert len(big.merges) == 600 - 256
    small = train_bpe(corpus, k)
    cut = big.truncate(k)
    assert cut.merges == small.merges[: len(cut.merges)]
    probe = random_word_corpus(seed + 100, docs=10)
    for text in probe + corpus[:5]:
        assert encode(cut, text) == encode(small, text)


def test_truncate_bounds():
    model = train_bpe(["abcabc"], 260)
    with pytest.raises(ValueError):
        model.truncate(1000)
    with pytest.raises(ValueError):
        model.truncate(100)


# ---------------------------------------------------------------- encode / decode


@pytest.fixture(scope="module")
def trained():
    return train_bpe(random_corpus(9, docs=80), 400, special_tokens=["<|eot|>"])


@given(raw=st.binary(max_size=300))
@settings(max_examples=200)
def test_roundtrip_random_bytes(trained, raw):
    ids = encode(trained, raw)
    assert decode_bytes(trained, ids) == raw
    assert len(ids) <= len(raw)
    assert all(0 <= i < trained.vocab_size for i in ids)


@given(text=st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=200))
def test_roundtrip_text(trained, text):
    assert decode(trained, encode(trained, text)) == text


def test_empty_roundtrip(trained):
    assert encode(trained, "") == []
    assert decode(trained, []) == ""


def test_special_token_decodes(trained):
    sid = trained.special_id("<|eot|>")
    assert sid == trained.vocab_size - 1
    assert decode(trained, [ord("a"), sid]) == "a<|eot|>"


# ---------------------------------------------------------------- metrics


def test_byte_model_metrics():
    m = efficiency_metrics(BpeModel([]), ["plain ascii text", "more"])
    assert m["bytes_per_token"] == 1.0 and m["chars_per_token"] == 1.0


def test_merge_chain_metrics():
    model = BpeModel([(b"a", b"b"), (b"c", b"d"), (b"ab", b"cd")])
    m = efficiency_metrics(model, ["abcd"])
    assert m["tokens"] == 1 and m["bytes_per_token"] == 4.0


def test_ascii_bytes_equal_chars(trained):
    m = efficiency_metrics(trained, ["the cat ate tea"])
    assert m["bytes_per_token"] == m["chars_per_token"]


def test_multibyte_metrics():
    m = efficiency_metrics(BpeModel([]), ["é漢"])
    assert m["bytes"] == 5 and m["chars"] == 2 and m["tokens"] == 5


def test_metric_errors():
    with pytest.raises(MetricError):
        efficiency_metrics(BpeModel([]), [])
    with pytest.raises(MetricError):
        efficiency_metrics(BpeModel([]), [""])


# ---------------------------------------------------------------- persistence


def test_save_load_roundtrip(trained, tmp_path):
    path = tmp_path / "m.jsonl"
    save_model(trained, path)
    again = load_model(path)
    assert again.merges == trained.merges
    assert again.special_tokens == trained.special_tokens
    text = "the cats don't eat 12345 tea"
    assert encode(again, text) == encode(trained, text)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda lines: [],
        lambda lines: ['{"format": "other", "version": 1}'] + lines[1:],
        lambda lines: lines[:1] + lines[2:],
        lambda lines: lines[:1] + [lines[2], lines[1]] + lines[3:],
        lambda lines: lines[:1] + ["{not json"] + lines[2:],
        lambda lines: lines[:1] + ['{"rank": 0, "left": "zz", "right": "61"}'] + lines[2:],
    ],
)
def test_corrupt_model_file(trained, tmp_path, mutate):
    path = tmp_path / "m.jsonl"
    save_model(trained, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(mutate(lines)) + "\n")
    with pytest.raises(ModelFileError):
        load_model(path)

import numpy as np
import pytest
from scipy.stats import chisquare

from moeleak.corpus import (BLOOD_TYPES, DOMAINS, GENDERS, ILLNESSES, NUM_ILLNESSES, SLOTS, HealthRecord, TemplateError,
                            Vocabulary, build_pia_dataset, build_rra_corpus, fill_template, health_vocabulary,
                            illness_names, load_domain_text, load_templates, parse_templates, rra_vocabulary,
                            sample_record, split_words, synthesize_domain_text, tokenize)


@pytest.fixture(scope="module")
def tpls():
    return load_templates()


@pytest.fixture(scope="module")
def vocab(tpls):
    return health_vocabulary(tpls)


def rec(illness=0, **kw):
    base = dict(age_group=2, gender=1, blood_type=3, illness=illness, insurance="Aetna", billing="$1,200", age=35)
    base.update(kw)
    return HealthRecord(**base)


def test_shipped_templates(tpls):
    assert sum(t.length_class == "short" for t in tpls) == 10
    assert sum(t.length_class == "long" for t in tpls) == 10
    assert [t.id for t in tpls] == [t.id for t in load_templates()]


def test_missing_slot_named():
    with pytest.raises(TemplateError, match=r"\[Illness\]"):
        parse_templates("7\tshort\t[Age] [Gender] [Blood Type] [Insurance] [Billing Amount]")


def test_template_file_source(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("# comment\n3\tlong\t[Age][Gender][Blood Type][Illness][Insurance][Billing Amount]\n")
    assert load_templates(p)[0].id == 3


def test_fill_is_deterministic_and_complete(tpls):
    for t in tpls:
        text = fill_template(t, rec())
        assert text == fill_template(t, rec())
        assert all(slot not in text for slot in SLOTS)
        assert ILLNESSES[0] in text


def test_records_differing_in_illness_differ_only_there(tpls):
    a, b = fill_template(tpls[0], rec(0)), fill_template(tpls[0], rec(5))
    assert a.replace(ILLNESSES[0], "@") == b.replace(ILLNESSES[5], "@")


def test_illness_appears_once_in_single_slot_templates(tpls, vocab):
    for t in tpls:
        if t.text.count("[Illness]") == 1:
            assert fill_template(t, rec(7)).count(ILLNESSES[7]) == 1


def test_short_template_lengths(tpls, vocab):
    rng = np.random.default_rng(0)
    lengths = [len(tokenize(fill_template(t, sample_record(rng)), vocab))
               for t in tpls if t.length_class == "short" for _ in range(100)]
    assert all(35 <= n <= 65 for n in lengths)


def test_tokenize_basics(vocab):
    assert tokenize("", vocab).size == 0
    assert np.array_equal(tokenize("Fever and Cough.", vocab), tokenize("fever and cough .", vocab))
    assert split_words("blood type AB+.") == ["blood", "type", "ab", "+", "."]


def test_unknown_words_hash_to_buckets():
    v = Vocabulary(("a", "b"), oov_buckets=8)
    i = v.id_of("zebra")
    assert 3 <= i < 11 and i == v.id_of("zebra")
    assert Vocabulary(("a",)).id_of("zebra") == 0
    assert v.word_of(0) == "<unk>" and v.word_of(1) == "a"


def test_illness_names_distinct_ids(vocab):
    assert len(set(ILLNESSES)) == NUM_ILLNESSES == len(illness_names())
    seqs = {tuple(tokenize(n, vocab)) for n in ILLNESSES}
    assert len(seqs) == NUM_ILLNESSES


def test_oov_bucket_collisions_within_birthday_bound():
    # unseen words: pairwise bucket collisions should be rare
    v = Vocabulary((), oov_buckets=4096)
    ids = [v.id_of(f"novel{i}word") for i in range(116)]
    collisions = 116 - len(set(ids))
    assert collisions <= 6  # mean 116^2 / (2 * 4096) = 1.6


def test_dataset_sizes_and_determinism(tpls, vocab):
    ds = build_pia_dataset(50, "short", tpls, 9, vocab)
    again = build_pia_dataset(50, "short", tpls, 9, vocab)
    assert len(ds) == 50
    assert all(np.array_equal(a.token_ids, b.token_ids) and a.record == b.record for a, b in zip(ds, again))
    tail = build_pia_dataset(10, "short", tpls, 9, vocab, start=40)
    assert all(np.array_equal(a.token_ids, b.token_ids) for a, b in zip(ds[40:], tail))


def test_split_sizes(tpls, vocab):
    ds = build_pia_dataset(10000, "short", tpls, 0, vocab)
    train, test = ds[:8000], ds[8000:]
    assert (len(train), len(test)) == (8000, 2000)


def test_single_template_subset(tpls, vocab):
    ds = build_pia_dataset(30, None, [tpls[4]], 0, vocab)
    assert {p.template_id for p in ds} == {tpls[4].id}


def test_empty_subset_and_bad_n(tpls, vocab):
    with pytest.raises(ValueError):
        build_pia_dataset(5, "long", [t for t in tpls if t.length_class == "short"], 0, vocab)
    with pytest.raises(ValueError):
        build_pia_dataset(0, None, tpls, 0, vocab)


def test_illness_marginal_uniform(tpls, vocab):
    rng = np.random.default_rng(3)
    ill = [sample_record(rng).illness for _ in range(11600)]
    assert chisquare(np.bincount(ill, minlength=116)).pvalue > 0.01


def test_record_ranges():
    with pytest.raises(ValueError):
        rec(illness=116)
    with pytest.raises(ValueError):
        rec(gender=len(GENDERS))
    with pytest.raises(ValueError):
        rec(blood_type=len(BLOOD_TYPES))


def test_unstructured_keeps_secrets(tpls, vocab):
    s = build_pia_dataset(20, "short", tpls, 4, vocab)
    u = build_pia_dataset(20, "short", tpls, 4, vocab, unstructured=True)
    assert any(not np.array_equal(a.token_ids, b.token_ids) for a, b in zip(s, u))
    for p in u:
        ill = tokenize(ILLNESSES[p.record.illness], vocab)
        ids = p.token_ids.tolist()
        assert any(ids[i:i + len(ill)] == ill.tolist() for i in range(len(ids)))


def test_rra_corpora():
    texts = [load_domain_text(d) for d in DOMAINS]
    sets = [build_rra_corpus([t], 0) for t in texts]
    assert len(sets) == 3
    for pairs, v in sets:
        assert v.size <= 2000 and all(len(p) and len(r) for p, r in pairs)
    union = Vocabulary.union([v for _, v in sets])
    assert set(union.words) == set().union(*(set(v.words) for _, v in sets))


def test_empty_response_dropped():
    pairs, v = build_rra_corpus(["No clause boundary here. Left, right side."], 0)
    assert len(pairs) == 1
    assert v.decode(pairs[0][1]) == "right side ."


def test_rra_corpus_needs_text():
    with pytest.raises(ValueError):
        build_rra_corpus(["   "], 0)


def test_rra_vocab_cap():
    v = rra_vocabulary([synthesize_domain_text("general", 3000, 1)], cap=300)
    assert v.size <= 300


def test_unknown_domain():
    with pytest.raises(ValueError):
        load_domain_text("legal")

import random
import string
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from relsplit.corpus import SynthSpec, TaskKind, gen_synthetic, make_record
from relsplit.encode import (
    CacheWrapper,
    FeaturizerConfig,
    IdentityStub,
    InputSequence,
    TableStub,
    build_input,
    encode_dataset,
    featurize,
    load_encoded,
    make_provider,
    ngram_bucket,
    read_translation_table,
    record_input,
    save_encoded,
    translate_query,
    write_translation_table,
)
from relsplit.errors import DataError, EmptyField, MarkerInText, MissingEntry, ProviderError

SMALL = FeaturizerConfig(dims=1024)


# ---------------------------------------------------------------------------
# input sequences

def test_build_input_template():
    seq = build_input("zapatos rojos", "red shoes", "shoes > sneakers")
    assert seq.text == "[CLS] zapatos rojos - red shoes [SEP] shoes > sneakers [SEP]"
    assert build_input("red shoes", "red shoes", "t").text == "[CLS] red shoes - red shoes [SEP] t [SEP]"


@pytest.mark.parametrize("parts, bad", [(("", "x", "t"), "q_orig"), (("q", "", "t"), "q_en"), (("q", "x", ""), "target")])
def test_build_input_empty_field(parts, bad):
    with pytest.raises(EmptyField) as exc:
        build_input(*parts)
    assert exc.value.part == bad


@pytest.mark.parametrize("parts", [("a [SEP] b", "x", "t"), ("q", "[CLS]", "t"), ("q", "x", "t [SEP]"),
                                   ("q", "x", "t \ue001")])
def test_build_input_rejects_markers(parts):
    with pytest.raises(MarkerInText):
        build_input(*parts)


part = st.text(min_size=1, max_size=12).filter(lambda s: "[SEP]" not in s and "[CLS]" not in s
                                                and "\ue000" not in s and "\ue001" not in s)


@given(part, part, part)
def test_template_structure(q, e, t):
    text = build_input(q, e, t).text
    assert text.startswith("[CLS] ") and text.count("[CLS]") == 1
    assert text.count("[SEP]") == 2 and text.endswith(" [SEP]")


@given(part, part, part, part, part, part)
def test_build_input_injective_given_parts_without_markers(a, b, c, d, e, f):
    # query parts containing "-" can shift across the " - " separator; the target is always delimited
    x, y = build_input(a, b, c), build_input(d, e, f)
    if (a, b, c) != (d, e, f) and "-" not in a + b + d + e:
        assert x.text != y.text


# ---------------------------------------------------------------------------
# translation

def _rec(query, language="tr", rid="r1", task=TaskKind.QI, target="t"):
    return make_record(rid, task, query, target, language, 1)


def test_identity_translation():
    assert translate_query(IdentityStub(), _rec("kırmızı ayakkabı")) == "kırmızı ayakkabı"


def test_table_translation_and_missing_entry():
    stub = TableStub({("tr", "kırmızı ayakkabı"): "red shoes"})
    assert translate_query(stub, _rec("Kırmızı  ayakkabı")) == "red shoes"
    with pytest.raises(MissingEntry) as exc:
        translate_query(stub, _rec("mavi", rid="r9"))
    assert exc.value.record_id == "r9" and exc.value.source_language == "tr"
    fallback = TableStub({}, fallback_identity=True)
    assert translate_query(fallback, _rec("mavi")) == "mavi"


def test_table_is_language_specific():
    stub = TableStub({("es", "rojo"): "red"})
    with pytest.raises(MissingEntry):
        stub.translate("rojo", "pt")


def test_cache_wrapper_calls_provider_once(tmp_path):
    stub = TableStub({("tr", "kırmızı ayakkabı"): "red shoes"})
    cache = CacheWrapper(stub, tmp_path / "cache.tsv")
    r = _rec("kırmızı ayakkabı")
    assert translate_query(cache, r) == translate_query(cache, r) == "red shoes"
    assert stub.lookups == 1
    # a fresh wrapper reads the file and performs no lookup
    stub2 = TableStub({("tr", "kırmızı ayakkabı"): "red shoes"})
    assert translate_query(CacheWrapper(stub2, tmp_path / "cache.tsv"), r) == "red shoes"
    assert stub2.lookups == 0
    assert (tmp_path / "cache.tsv").read_text(encoding="utf-8") == "table\ttr\tkırmızı ayakkabı\tred shoes\n"


def test_cache_wrapper_is_thread_safe(tmp_path):
    stub = TableStub({}, fallback_identity=True)
    cache = CacheWrapper(stub, tmp_path / "c.tsv")
    words = [f"w{i}" for i in range(50)]
    threads = [threading.Thread(target=lambda: [cache.translate(w, "en") for w in words]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert stub.lookups == 50
    assert len((tmp_path / "c.tsv").read_text().splitlines()) == 50


def test_provider_errors_carry_record_id():
    class Broken:
        name = "broken"

        def translate(self, q, lang):
            raise RuntimeError("boom")

    class Empty:
        name = "empty"

        def translate(self, q, lang):
            return "  "

    with pytest.raises(ProviderError) as exc:
        translate_query(Broken(), _rec("q", rid="x7"))
    assert exc.value.record_id == "x7"
    with pytest.raises(ProviderError):
        translate_query(Empty(), _rec("q"))


def test_translation_table_file_roundtrip(tmp_path):
    table = {("tr", "kırmızı"): "red", ("es", "con\ttab"): "with tab"}
    write_translation_table(table, tmp_path / "t.tsv")
    assert read_translation_table(tmp_path / "t.tsv") == table
    provider = make_provider("table", tmp_path / "t.tsv")
    assert provider.translate("kırmızı", "tr") == "red"
    with pytest.raises(DataError):
        make_provider("table")
    with pytest.raises(DataError):
        make_provider("nonsense")


def test_bad_translation_table(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("only\ttwo\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_translation_table(p)


def test_record_input_renders_category_path():
    r = _rec("red shoes", target="Shoes>Sneakers", task=TaskKind.QC)
    assert record_input(r, IdentityStub()).text == "[CLS] red shoes - red shoes [SEP] shoes > sneakers [SEP]"


# ---------------------------------------------------------------------------
# featurization

def test_featurizer_config_validation():
    for bad in (dict(dims=1000), dict(dims=128), dict(dims=2**21), dict(n_min=0), dict(n_min=3, n_max=2),
                dict(n_max=6), dict(seed=-1)):
        with pytest.raises(ValueError):
            FeaturizerConfig(**bad)


@given(part, part, part)
def test_featurize_is_unit_norm_and_deterministic(q, e, t):
    seq = build_input(q, e, t)
    v = featurize(seq, SMALL)
    assert v == featurize(seq, SMALL)
    assert abs(v.norm() - 1.0) < 1e-9 or v.norm() == 0.0
    assert abs(np.linalg.norm(v.values) - v.norm()) < 1e-12


def test_featurize_empty_text_is_zero():
    v = featurize("", SMALL)
    assert v.norm() == 0.0 and not v.values.any()


def test_markers_are_atomic():
    seq = build_input("ab", "ab", "cd")
    cfg = FeaturizerConfig(dims=2**16, n_min=1, n_max=1)
    # unigrams of the symbol stream: no 'C', 'L', 'S', 'E', 'P' or bracket characters
    assert featurize(seq, cfg) == featurize("\ue000 ab - ab \ue001 cd \ue001", cfg)
    assert featurize(seq, cfg) != featurize(seq.text, cfg)


def test_permutation_sensitive():
    a = featurize(build_input("red shoes", "red shoes", "running shoes for men"))
    b = featurize(build_input("shoes red", "shoes red", "men for shoes running"))
    assert a != b


def test_seed_changes_hashing():
    seq = build_input("red shoes", "red shoes", "sneakers")
    assert featurize(seq, FeaturizerConfig(seed=0)) != featurize(seq, FeaturizerConfig(seed=1))


def test_sign_hash_balance():
    rng = random.Random(0)
    grams = {"".join(rng.choices(string.ascii_lowercase + " ", k=rng.randint(2, 4))) + str(i) for i in range(100_000)}
    plus = sum(ngram_bucket(g, 2**16, 0)[1] == 1 for g in grams)
    assert 0.49 <= plus / len(grams) <= 0.51


def test_one_character_perturbation_similarity():
    _, target = gen_synthetic(SynthSpec(records_per_task=400), 7)
    rng = random.Random(1)
    cfg = FeaturizerConfig()
    checked = 0
    for rec in target:
        seq = record_input(rec, IdentityStub())
        if len(seq.text) < 40:
            continue
        t = seq.t
        i = rng.randrange(len(t))
        new = rng.choice([c for c in string.ascii_lowercase if c != t[i]])
        other = InputSequence(seq.q_orig, seq.q_en, t[:i] + new + t[i + 1:])
        cos = float(featurize(seq, cfg).values @ featurize(other, cfg).values)
        assert 0.5 < cos < 1.0
        checked += 1
        if checked == 100:
            break
    assert checked == 100


def test_encode_dataset_and_file_roundtrip(tmp_path):
    _, target = gen_synthetic(SynthSpec(records_per_task=60), 2)
    enc = encode_dataset(target, cfg=SMALL)
    assert enc.X.shape == (60, 1024) and enc.ids == tuple(target.ids)
    assert np.allclose(np.linalg.norm(enc.X.toarray(), axis=1), 1.0)
    save_encoded(enc, tmp_path / "e.jsonl")
    back = load_encoded(tmp_path / "e.jsonl")
    assert back.ids == enc.ids and np.array_equal(back.labels, enc.labels)
    assert np.allclose(back.X.toarray(), enc.X.toarray(), atol=1e-7)
    save_encoded(back, tmp_path / "f.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == (tmp_path / "f.jsonl").read_bytes()
    header = (tmp_path / "e.jsonl").read_text().splitlines()[0]
    assert '"encoding":"base64-float32-le"' in header
    assert enc.fingerprint() == encode_dataset(target, cfg=SMALL).fingerprint()
    assert enc.rows(enc.ids[:5]).fingerprint() != enc.fingerprint()

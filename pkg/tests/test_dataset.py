import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mres.dataset import (
    MAX_LEN_DEFAULT,
    MAX_TEXT_LEN,
    BenchmarkSplit,
    EvalSetting,
    Granularity,
    ReferringSample,
    Vocabulary,
    compute_stats,
    filter_setting,
    load_benchmark,
    save_benchmark,
    tokenize,
)
from mres.errors import EmptyExpression, MissingImage, SchemaError
from mres.masks import RleMask, rle_encode


def sample(sid="a", expression="the red box", granularity=Granularity.OBJECT, part=None, obj="box", w=4, h=2):
    return ReferringSample(sid, "img.png", w, h, expression, RleMask(w, h, (w * h,)), granularity, obj, part)


def write_split(root, records, name="val"):
    with open(root / f"{name}.jsonl", "w") as fh:
        for r in records:
            fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")


def record(**over):
    rec = {"sample_id": "s1", "image": "images/x.png", "image_w": 2, "image_h": 2, "expression": "head of cow",
           "mask": {"w": 2, "h": 2, "counts": [4]}, "granularity": "object", "object_category": "cow"}
    rec.update(over)
    return rec


class TestLoader:
    def test_fixture(self, fixture_split):
        assert len(fixture_split) == 20
        for s in fixture_split:
            s.validate()
            assert sum(s.mask.counts) == s.image_w * s.image_h
            assert s.decode_mask().shape == (s.image_h, s.image_w)

    def test_fixture_images_resolve(self, fixture_root):
        load_benchmark(fixture_root, "val", check_images=True)

    def test_empty_file(self, tmp_path):
        (tmp_path / "val.jsonl").write_text("")
        with pytest.raises(SchemaError, match="empty split"):
            load_benchmark(tmp_path, "val")

    def test_part_without_category(self, tmp_path):
        write_split(tmp_path, [record(granularity="part")])
        with pytest.raises(SchemaError) as exc:
            load_benchmark(tmp_path, "val")
        assert exc.value.line == 1 and exc.value.field == "part_category"

    @pytest.mark.parametrize("over,field", [
        ({"image_w": "2"}, "image_w"),
        ({"granularity": "scene"}, "granularity"),
        ({"mask": {"w": 2, "h": 2, "counts": [3]}}, "mask"),
        ({"mask": {"w": 3, "h": 2, "counts": [6]}}, "mask"),
        ({"expression": "   "}, "expression"),
    ])
    def test_malformed_field(self, tmp_path, over, field):
        write_split(tmp_path, [record(), record(sample_id="s2", **over)])
        with pytest.raises(SchemaError) as exc:
            load_benchmark(tmp_path, "val")
        assert exc.value.line == 2 and exc.value.field == field

    def test_missing_field(self, tmp_path):
        rec = record()
        del rec["object_category"]
        write_split(tmp_path, [rec])
        with pytest.raises(SchemaError, match="object_category"):
            load_benchmark(tmp_path, "val")

    def test_bad_json(self, tmp_path):
        write_split(tmp_path, [record(), "{not json"])
        with pytest.raises(SchemaError) as exc:
            load_benchmark(tmp_path, "val")
        assert exc.value.line == 2

    def test_duplicate_ids(self, tmp_path):
        write_split(tmp_path, [record(), record()])
        with pytest.raises(SchemaError, match="duplicate"):
            load_benchmark(tmp_path, "val")

    def test_missing_image(self, tmp_path):
        write_split(tmp_path, [record()])
        split = load_benchmark(tmp_path, "val")
        with pytest.raises(MissingImage):
            load_benchmark(tmp_path, "val", check_images=True)
        with pytest.raises(MissingImage):
            split.load_image(split.samples[0])

    def test_env_root(self, fixture_root, monkeypatch):
        monkeypatch.setenv("MRES_DATA_ROOT", str(fixture_root))
        assert len(load_benchmark(split="val")) == 20

    def test_round_trip_bytes(self, fixture_root, fixture_split, tmp_path):
        save_benchmark(fixture_split, tmp_path / "val.jsonl")
        assert (tmp_path / "val.jsonl").read_bytes() == (fixture_root / "val.jsonl").read_bytes()

    def test_round_trip_modulo_key_order(self, tmp_path):
        rec = record(granularity="part", part_category="head")
        shuffled = {k: rec[k] for k in reversed(list(rec))}
        write_split(tmp_path, [shuffled])
        split = load_benchmark(tmp_path, "val")
        save_benchmark(split, tmp_path / "out.jsonl")
        assert json.loads((tmp_path / "out.jsonl").read_text()) == rec


class TestFilter:
    def test_fixture_counts(self, fixture_split):
        assert len(filter_setting(fixture_split, EvalSetting.PART_ONLY)) == 8
        assert len(filter_setting(fixture_split, EvalSetting.OBJECT_ONLY)) == 12

    def test_identity(self, fixture_split):
        assert filter_setting(fixture_split, "object_and_part").samples == fixture_split.samples

    def test_partition(self, fixture_split):
        obj = {s.sample_id for s in filter_setting(fixture_split, EvalSetting.OBJECT_ONLY)}
        part = {s.sample_id for s in filter_setting(fixture_split, EvalSetting.PART_ONLY)}
        assert obj.isdisjoint(part)
        assert obj | part == {s.sample_id for s in fixture_split}

    @pytest.mark.parametrize("setting", list(EvalSetting))
    def test_idempotent(self, fixture_split, setting):
        once = filter_setting(fixture_split, setting)
        assert filter_setting(once, setting).samples == once.samples


class TestTokenize:
    vocab = Vocabulary.build(["the red box on the left", "head of cow"])

    def test_three_words(self):
        t = tokenize("the red box", self.vocab, 17)
        assert t.true_length == 5
        assert t.ids.count(self.vocab.pad_id) == 12
        assert t.ids[0] == self.vocab.sos_id and t.ids[4] == self.vocab.eos_id

    def test_truncation(self):
        t = tokenize(" ".join(["red"] * 30), self.vocab, 17)
        assert t.true_length == 17
        assert t.ids[1:16] == (self.vocab.stoi["red"],) * 15
        assert t.ids[16] == self.vocab.eos_id

    @pytest.mark.parametrize("text", ["", "   \t "])
    def test_empty(self, text):
        with pytest.raises(EmptyExpression):
            tokenize(text, self.vocab, 17)

    def test_max_len_too_small(self):
        with pytest.raises(ValueError):
            tokenize("red", self.vocab, 2)

    def test_unknown_word(self):
        assert tokenize("purple cow", self.vocab).ids[1] == self.vocab.unk_id

    def test_defaults(self):
        assert MAX_LEN_DEFAULT == 17
        assert MAX_TEXT_LEN["refcocog"] == 22
        assert MAX_TEXT_LEN["refcocom"] == MAX_TEXT_LEN["refcoco"] == MAX_TEXT_LEN["refcoco+"] == 17

    def test_vocab_json(self):
        v = Vocabulary.from_json(self.vocab.to_json())
        assert v.itos == self.vocab.itos

    @given(st.text(alphabet="abc xyz", min_size=1, max_size=80).filter(str.strip), st.integers(3, 30))
    def test_invariants(self, text, max_len):
        t = tokenize(text, self.vocab, max_len)
        assert len(t.ids) == max_len
        assert t.ids[0] == t.sos_id and t.ids[t.true_length - 1] == t.eos_id
        assert all(i == t.pad_id for i in t.ids[t.true_length:])
        assert tokenize(text, self.vocab, max_len) == t


class TestStats:
    def test_average_length(self):
        split = BenchmarkSplit("val", [sample("a", "one two three"), sample("b", "one two three four five"),
                                       sample("c", "a b c d e f g")])
        assert compute_stats(split).avg_expression_length == 5.0

    def test_fixture(self, fixture_split):
        st_ = compute_stats(fixture_split)
        assert st_.avg_expression_length == 5.0
        assert st_.num_references == 20 and st_.num_part_references == 8
        assert sum(st_.expressions_per_category.values()) == 8
        assert st_.num_part_categories == len(st_.expressions_per_category)

    def test_no_empty_category(self):
        split = BenchmarkSplit("val", [sample("a"), sample("b", "head of cow", Granularity.PART, "head")])
        st_ = compute_stats(split)
        assert st_.expressions_per_category == {"head": 1}
        assert all(v > 0 for v in st_.expressions_per_object_category.values())

    def test_shared_masks_counted_once(self):
        split = BenchmarkSplit("val", [sample("a"), sample("b", "another box")])
        assert compute_stats(split).num_masks == 1

    def test_real_refcocom_if_present(self):
        import os

        root = os.environ.get("MRES_REFCOCOM_ROOT")
        if not root:
            pytest.skip("real RefCOCOm data not supplied (set MRES_REFCOCOM_ROOT)")
        stats = [compute_stats(load_benchmark(root, s)) for s in ("val", "testA", "testB")]
        parts = set().union(*(s.expressions_per_category for s in stats))
        assert len(parts) == 391
        words = sum(s.avg_expression_length * s.num_references for s in stats)
        assert words / sum(s.num_references for s in stats) == pytest.approx(5.1, abs=0.05)


class TestSampleInvariants:
    def test_part_requires_category(self):
        with pytest.raises(SchemaError):
            sample(granularity=Granularity.PART)

    def test_object_rejects_part_category(self):
        with pytest.raises(SchemaError):
            sample(part="head")

    def test_mask_dims(self):
        with pytest.raises(SchemaError):
            ReferringSample("a", "i", 3, 3, "x", rle_encode(np.zeros((2, 2))), Granularity.OBJECT, "o")

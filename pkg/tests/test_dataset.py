import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundus_dr.dataset import (
    GRADES,
    BinaryLabel,
    ImageRecord,
    SplitManifest,
    SplitSpec,
    binarize,
    dumps_manifest,
    load_label_manifest,
    load_manifest,
    loads_manifest,
    save_manifest,
    stratified_subsample,
)
from fundus_dr.exceptions import (
    ChecksumMismatch,
    DuplicateId,
    GradeOutOfRange,
    InsufficientStratum,
    MalformedRow,
)


def corpus(per_grade):
    if isinstance(per_grade, int):
        per_grade = {g: per_grade for g in GRADES}
    return [ImageRecord(f"{g}_{i:05d}_left", f"img/{g}_{i}.jpeg", g)
            for g in GRADES for i in range(per_grade[g])]


SMALL = SplitSpec(train_healthy=6, train_per_unhealthy_grade=3, test_healthy=4,
                  test_per_unhealthy_grade=2, seed=99)


class TestLabelManifest:
    def write(self, tmp_path, body):
        p = tmp_path / "trainLabels.csv"
        p.write_text("image,level\n" + body)
        return p

    def test_parses_rows_in_order(self, tmp_path):
        recs = load_label_manifest(self.write(tmp_path, "10_left,0\n13_right,4\n"))
        assert [(r.id, r.grade) for r in recs] == [("10_left", 0), ("13_right", 4)]
        assert recs[0].path == tmp_path / "10_left.jpeg"

    def test_grade_out_of_range(self, tmp_path):
        with pytest.raises(GradeOutOfRange):
            load_label_manifest(self.write(tmp_path, "x,7\n"))

    def test_wrong_column_count(self, tmp_path):
        with pytest.raises(MalformedRow):
            load_label_manifest(self.write(tmp_path, "10_left,0,extra\n"))

    def test_non_integer_grade(self, tmp_path):
        with pytest.raises(MalformedRow):
            load_label_manifest(self.write(tmp_path, "10_left,mild\n"))

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(DuplicateId):
            load_label_manifest(self.write(tmp_path, "a,0\na,1\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_label_manifest(tmp_path / "nope.csv")

    def test_custom_image_dir(self, tmp_path):
        recs = load_label_manifest(self.write(tmp_path, "a,2\n"), image_dir="/imgs", extension=".png")
        assert str(recs[0].path) == "/imgs/a.png"


@pytest.mark.parametrize("grade,label", [(0, BinaryLabel.HEALTHY), (1, BinaryLabel.UNHEALTHY),
                                         (2, BinaryLabel.UNHEALTHY), (3, BinaryLabel.UNHEALTHY),
                                         (4, BinaryLabel.UNHEALTHY)])
def test_binarize_exhaustive(grade, label):
    assert binarize(grade) is label
    assert (binarize(grade) == BinaryLabel.HEALTHY) == (grade == 0)


@pytest.mark.parametrize("bad", [-1, 5, 2.5, "3", True])
def test_binarize_rejects_non_grades(bad):
    with pytest.raises(GradeOutOfRange):
        binarize(bad)


class TestStratifiedSubsample:
    def test_default_counts(self):
        m = stratified_subsample(corpus({0: 2300, 1: 1300, 2: 1300, 3: 1300, 4: 1300}), SplitSpec())
        assert len(m.train) == 2250 and len(m.test) == 5000
        counts = m.counts()
        assert counts["train", 0] == 1250 and counts["test", 0] == 1000
        assert all(counts["train", g] == 250 and counts["test", g] == 1000 for g in (1, 2, 3, 4))

    def test_zero_spec_is_empty(self):
        m = stratified_subsample(corpus(3), SplitSpec(0, 0, 0, 0))
        assert m.entries == ()

    def test_insufficient_stratum(self):
        recs = corpus({0: 3000, 1: 2000, 2: 2000, 3: 100, 4: 2000})
        with pytest.raises(InsufficientStratum) as err:
            stratified_subsample(recs, SplitSpec())
        assert (err.value.grade, err.value.have, err.value.need) == (3, 100, 1250)

    def test_duplicate_input(self):
        recs = corpus(20)
        with pytest.raises(DuplicateId):
            stratified_subsample(recs + recs[:1], SMALL)

    def test_labels_follow_grades(self):
        m = stratified_subsample(corpus(20), SMALL)
        assert all(e.label == binarize(e.grade) for e in m.entries)

    def test_seed_changes_selection(self):
        a = stratified_subsample(corpus(50), SMALL)
        b = stratified_subsample(corpus(50), SplitSpec(**{**SMALL.__dict__, "seed": 100}))
        assert a.checksum != b.checksum

    def test_canonical_order(self):
        m = stratified_subsample(corpus(20), SMALL)
        keys = [(("train", "test").index(e.split), e.grade, e.id) for e in m.entries]
        assert keys == sorted(keys)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**64 - 1), extra=st.integers(0, 30), shuffle_seed=st.integers(0, 1000))
    def test_properties(self, seed, extra, shuffle_seed):
        spec = SplitSpec(5, 2, 3, 4, seed)
        recs = corpus({g: spec.count(g, "train") + spec.count(g, "test") + extra for g in GRADES})
        m = stratified_subsample(recs, spec)
        train_ids = {e.id for e in m.train}
        test_ids = {e.id for e in m.test}
        assert not train_ids & test_ids
        for g in GRADES:
            for split in ("train", "test"):
                assert m.counts().get((split, g), 0) == spec.count(g, split)
        shuffled = recs[:]
        random.Random(shuffle_seed).shuffle(shuffled)
        assert stratified_subsample(shuffled, spec) == m


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        m = stratified_subsample(corpus(20), SMALL)
        save_manifest(m, tmp_path / "m.tsv")
        assert load_manifest(tmp_path / "m.tsv") == m

    def test_empty_round_trip(self, tmp_path):
        m = SplitManifest((), SplitSpec(0, 0, 0, 0, 3))
        save_manifest(m, tmp_path / "m.tsv")
        loaded = load_manifest(tmp_path / "m.tsv")
        assert loaded == m and loaded.entries == ()

    def test_tampered_file(self, tmp_path):
        m = stratified_subsample(corpus(20), SMALL)
        text = dumps_manifest(m).replace("\thealthy\ttrain", "\thealthy\ttest", 1)
        with pytest.raises(ChecksumMismatch):
            loads_manifest(text)

    def test_serialization_is_byte_stable(self):
        a = dumps_manifest(stratified_subsample(corpus(20), SMALL))
        b = dumps_manifest(stratified_subsample(list(reversed(corpus(20))), SMALL))
        assert a == b

    def test_header_records_spec(self):
        text = dumps_manifest(stratified_subsample(corpus(20), SMALL))
        assert "# seed: 99\n" in text and "# train_healthy: 6\n" in text

import pytest
from pydantic import ValidationError

from ageatlas.manifest import Manifest, SubjectRecord, split_filter
from ageatlas.phantom import plan_cohort


@pytest.fixture
def manifest():
    return Manifest(plan_cohort(240, 60, 120), "cohort")


def test_record_rejects_age_out_of_range():
    with pytest.raises(ValidationError):
        SubjectRecord(id=0, age=90, sex="F", bmi_group="healthy", split="train", image_path="a.vol")


def test_record_rejects_unknown_field():
    with pytest.raises(ValidationError):
        SubjectRecord(
            id=0, age=50, sex="F", bmi_group="healthy", split="train", image_path="a.vol", weight=80
        )


def test_duplicate_ids_rejected():
    record = plan_cohort(6, 0, 0)[0]
    with pytest.raises(ValueError, match="duplicate"):
        Manifest([record, record])


def test_split_filter_test(manifest):
    test = split_filter(manifest, lambda r: r.split == "test")
    assert len(test) == 120
    assert [r.id for r in test] == sorted(r.id for r in test)
    assert len(manifest) == 420


def test_split_filter_sex_is_half(manifest):
    assert len(split_filter(manifest, lambda r: r.sex == "F")) == 210


def test_split_filter_empty(manifest):
    assert len(split_filter(manifest, lambda r: r.age > 100)) == 0


def test_merge_replaces_by_id(manifest):
    changed = manifest[3].updated(predicted_age=61.5)
    merged = manifest.merge([changed])
    assert merged[3].predicted_age == 61.5
    assert manifest[3].predicted_age is None
    assert len(merged) == len(manifest)


def test_save_load_round_trip(tmp_path, manifest):
    manifest = Manifest(manifest.records, tmp_path / "cohort")
    first = manifest[0].updated(cam_path="../cams/cam_00000.vol", corrected_age=50.25)
    manifest = manifest.merge([first])
    path = manifest.save(tmp_path / "cohort" / "manifest.jsonl")
    loaded = Manifest.load(path)
    assert loaded.records == manifest.records
    assert loaded.resolve(loaded[0].cam_path) == tmp_path / "cohort" / "../cams/cam_00000.vol"


def test_save_elsewhere_rewrites_paths(tmp_path):
    manifest = Manifest(plan_cohort(6, 0, 0), tmp_path / "cohort")
    saved = manifest.save(tmp_path / "copy" / "manifest.jsonl")
    loaded = Manifest.load(saved)
    assert loaded[0].image_path == "../cohort/images/subject_00000.vol"
    original = manifest.resolve(manifest[0].image_path).resolve()
    assert loaded.resolve(loaded[0].image_path).resolve() == original


def test_cell(manifest):
    assert manifest[0].cell == ("F", "healthy")

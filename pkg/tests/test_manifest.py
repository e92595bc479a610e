import pytest

from conftest import make_manifest, write_csv_dataset
from lesionlab.errors import ClassTooSmall, DuplicateId, EmptyManifest, MissingColumn
from lesionlab.manifest import (
    compute_distribution,
    ingest_metadata,
    load_manifest,
    make_class_set,
    organize_per_class,
    save_manifest,
)


def test_ingest_all_present(tmp_path):
    rows = [(f"img{i}", f"img{i}.png", "Nevus" if i < 3 else "Melanoma") for i in range(5)]
    csv_path = write_csv_dataset(tmp_path, rows)
    m = ingest_metadata(csv_path, tmp_path)
    assert len(m.records) == 5
    assert [c.name for c in m.class_set] == ["Melanoma", "Nevus"]
    assert not m.skipped_rows


def test_ingest_missing_file_reported(tmp_path):
    rows = [(f"img{i}", f"img{i}.png", "A") for i in range(5)]
    csv_path = write_csv_dataset(tmp_path, rows)
    (tmp_path / "img2.png").unlink()
    m = ingest_metadata(csv_path, tmp_path)
    assert len(m.records) == 4
    assert len(m.skipped_rows) == 1
    assert "img2" in m.skipped_rows[0]["image_id"]


def test_ingest_duplicate_id(tmp_path):
    rows = [("dup", "a.png", "A"), ("dup", "b.png", "A"), ("x", "c.png", "B")]
    csv_path = write_csv_dataset(tmp_path, rows)
    with pytest.raises(DuplicateId, match="dup"):
        ingest_metadata(csv_path, tmp_path)


def test_ingest_missing_column(tmp_path):
    tmp_path.mkdir(exist_ok=True)
    bad = tmp_path / "bad.csv"
    bad.write_text("image_id,diagnosis\nx,A\n")
    with pytest.raises(MissingColumn):
        ingest_metadata(bad, tmp_path)


def test_ingest_empty(tmp_path):
    rows = [("a", "a.png", "")]
    csv_path = write_csv_dataset(tmp_path, rows)
    with pytest.raises(EmptyManifest):
        ingest_metadata(csv_path, tmp_path)


def test_class_index_assignment_sorted():
    labels = make_class_set(["b", "a", "c", "a"])
    assert [(c.name, c.index) for c in labels] == [("a", 0), ("b", 1), ("c", 2)]


def test_distribution_basic():
    m = make_manifest({"A": 100, "B": 40, "C": 10})
    d = compute_distribution(m)
    assert d.majority_class.name == "A"
    assert d.imbalance_ratio == 10.0
    assert sum(d.counts.values()) == 150


def test_distribution_tie_breaks_by_name():
    m = make_manifest({"B": 5, "A": 5})
    d = compute_distribution(m)
    assert d.majority_class.name == "A"
    assert d.imbalance_ratio == 1.0


def test_distribution_single_class():
    m = make_manifest({"A": 7})
    d = compute_distribution(m)
    assert d.counts[d.majority_class] == 7
    assert d.imbalance_ratio == 1.0


def test_organize_per_class(tmp_path):
    rows = [(f"i{j}", f"i{j}.png", "A" if j < 3 else "B") for j in range(5)]
    csv_path = write_csv_dataset(tmp_path / "src", rows)
    m = ingest_metadata(csv_path, tmp_path / "src")
    out = organize_per_class(m, tmp_path / "byclass")
    assert sorted(p.name for p in out.iterdir()) == ["A", "B"]
    assert len(list((out / "A").iterdir())) == 3
    assert len(list((out / "B").iterdir())) == 2
    # idempotent re-run
    before = sorted(str(p) for p in out.rglob("*"))
    organize_per_class(m, out)
    assert sorted(str(p) for p in out.rglob("*")) == before
    # partition: every record in exactly one directory
    total = sum(len(list(d.iterdir())) for d in out.iterdir())
    assert total == len(m.records)


def test_organize_empty_class_rejected(tmp_path):
    m = make_manifest({"A": 2})
    empty = make_class_set(["A", "B"])
    m = type(m)(records=m.records, class_set=empty, created_at=m.created_at, seed=0)
    with pytest.raises(ClassTooSmall):
        organize_per_class(m, tmp_path / "out")


def test_manifest_json_round_trip(tmp_path):
    m = make_manifest({"A": 3, "B": 2}, image_root="/data")
    path = tmp_path / "m.json"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.records == m.records
    assert back.class_set == m.class_set
    assert back.image_root == "/data"

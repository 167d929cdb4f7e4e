import json

import numpy as np
import pytest

from oodaudit.dump import (
    DumpFormatError,
    DumpValidationError,
    EvalDump,
    load_dump,
    validate_dump,
    write_dump,
)

from conftest import make_dump


class TestRoundTrip:
    def test_empty_dump_round_trips(self, tmp_path):
        d = EvalDump(
            logits=np.zeros((0, 2)),
            features=np.zeros((0, 2)),
            role="id_test",
            labels=np.zeros(0, dtype=np.int32),
        )
        write_dump(d, tmp_path / "empty")
        assert load_dump(tmp_path / "empty") == d

    def test_random_dump_round_trips_bytes(self, tmp_path):
        d = make_dump(100, 10, 16, role="fit", seed=7, with_head=True)
        p1, p2 = tmp_path / "a", tmp_path / "b"
        write_dump(d, p1)
        loaded = load_dump(p1)
        assert loaded == d
        # every byte of a re-write is identical
        write_dump(loaded, p2)
        for f in sorted(x.name for x in p1.iterdir()):
            assert (p1 / f).read_bytes() == (p2 / f).read_bytes()

    def test_ood_dump_round_trips(self, tmp_path):
        d = make_dump(30, 4, 8, role="ood", seed=1)
        write_dump(d, tmp_path / "ood")
        assert load_dump(tmp_path / "ood") == d

    def test_meta_and_name_preserved(self, tmp_path):
        d = make_dump(5, 3, 4, seed=2, name="cifarish")
        d.meta.update({"noise_kind": "symmetric", "noise_rate": "0.5"})
        write_dump(d, tmp_path / "m")
        loaded = load_dump(tmp_path / "m")
        assert loaded.name == "cifarish"
        assert loaded.meta == {"noise_kind": "symmetric", "noise_rate": "0.5"}


class TestValidation:
    def test_well_formed_dump_ok(self):
        report = validate_dump(make_dump(20, 3, 5, seed=3))
        assert report.ok and report.violations == ()

    def test_nan_logit_reports_location(self):
        d = make_dump(10, 4, 4, seed=4)
        logits = d.logits.copy()
        logits[3, 1] = np.nan
        bad = EvalDump(logits=logits, features=d.features, role=d.role, labels=d.labels)
        report = validate_dump(bad)
        assert not report.ok
        assert any(v.code == "non_finite" and "logits[3,1]" in v.message for v in report.errors)

    def test_write_aborts_on_nan(self, tmp_path):
        d = make_dump(10, 4, 4, seed=4)
        logits = d.logits.copy()
        logits[3, 1] = np.nan
        bad = EvalDump(logits=logits, features=d.features, role=d.role, labels=d.labels)
        with pytest.raises(DumpValidationError, match=r"non-finite value at logits\[3,1\]"):
            write_dump(bad, tmp_path / "nan")

    def test_label_out_of_range(self):
        d = make_dump(10, 4, 4, seed=5)
        labels = d.labels.copy()
        labels[2] = 4  # == K
        bad = EvalDump(logits=d.logits, features=d.features, role="id_test", labels=labels)
        report = validate_dump(bad)
        assert any(v.code == "label_range" and "label out of range" in v.message for v in report.errors)

    def test_missing_labels_for_id_test(self):
        d = make_dump(10, 4, 4, seed=6)
        bad = EvalDump(logits=d.logits, features=d.features, role="id_test")
        assert any(v.code == "labels_missing" for v in validate_dump(bad).errors)

    def test_labels_forbidden_for_ood(self):
        d = make_dump(10, 4, 4, seed=6)
        bad = EvalDump(logits=d.logits, features=d.features, role="ood", labels=d.labels)
        assert any(v.code == "labels_forbidden" for v in validate_dump(bad).errors)

    def test_bad_role(self):
        d = make_dump(4, 2, 2, seed=0)
        bad = EvalDump(logits=d.logits, features=d.features, role="train", labels=d.labels)
        assert any(v.code == "bad_role" for v in validate_dump(bad).errors)

    def test_row_count_mismatch(self):
        bad = EvalDump(
            logits=np.zeros((4, 2)),
            features=np.zeros((5, 2)),
            role="id_test",
            labels=np.zeros(4, dtype=np.int32),
        )
        assert any(v.code == "shape_mismatch" for v in validate_dump(bad).errors)

    def test_head_perturbation_warns_only(self):
        d = make_dump(20, 3, 6, seed=8, with_head=True)
        logits = d.logits.copy()
        logits[0, 0] += 0.1
        noisy = EvalDump(
            logits=logits,
            features=d.features,
            role=d.role,
            labels=d.labels,
            head_w=d.head_w,
            head_b=d.head_b,
        )
        report = validate_dump(noisy)
        assert report.ok  # warning does not flip ok
        assert any(v.code == "head_inconsistent" and "head/logits inconsistency" in v.message
                   for v in report.warnings)

    def test_head_shape_error(self):
        d = make_dump(6, 3, 4, seed=9)
        bad = EvalDump(
            logits=d.logits,
            features=d.features,
            role=d.role,
            labels=d.labels,
            head_w=np.zeros((2, 4)),
            head_b=np.zeros(2),
        )
        assert any(v.code == "head_shape" for v in validate_dump(bad).errors)


class TestLoadErrors:
    def test_truncated_labels(self, tmp_path):
        d = make_dump(100, 4, 4, seed=10)
        write_dump(d, tmp_path / "t")
        raw = (tmp_path / "t" / "labels.bin").read_bytes()
        (tmp_path / "t" / "labels.bin").write_bytes(raw[:-4])
        with pytest.raises(DumpFormatError, match="labels length mismatch: expected 400, got 396"):
            load_dump(tmp_path / "t")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DumpFormatError, match="missing file"):
            load_dump(tmp_path / "nothing")

    def test_unknown_format_version(self, tmp_path):
        d = make_dump(3, 2, 2, seed=11)
        write_dump(d, tmp_path / "v")
        mpath = tmp_path / "v" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["format_version"] = "99"
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(DumpFormatError, match="unknown format version"):
            load_dump(tmp_path / "v")

    def test_ood_with_stray_labels_file(self, tmp_path):
        d = make_dump(8, 3, 3, role="ood", seed=12)
        write_dump(d, tmp_path / "o")
        (tmp_path / "o" / "labels.bin").write_bytes(np.zeros(8, dtype="<i4").tobytes())
        with pytest.raises(DumpFormatError, match="OOD dump must not carry labels"):
            load_dump(tmp_path / "o")

    def test_missing_binary(self, tmp_path):
        d = make_dump(8, 3, 3, seed=13)
        write_dump(d, tmp_path / "x")
        (tmp_path / "x" / "features.bin").unlink()
        with pytest.raises(DumpFormatError, match="missing file"):
            load_dump(tmp_path / "x")


def test_loaded_dump_is_immutable(tmp_path):
    d = make_dump(5, 2, 2, seed=14)
    write_dump(d, tmp_path / "im")
    loaded = load_dump(tmp_path / "im")
    with pytest.raises(ValueError):
        loaded.logits[0, 0] = 1.0

import struct

import numpy as np
import pytest

from cardiofuse import EchoClip, ValidationError, load_dataset, read_clip, write_clip
from cardiofuse.dataio import (
    BadMagicError,
    DatasetError,
    PayloadSizeError,
    TruncatedClipError,
    read_ehr_tables,
    read_manifest,
    write_ehr_tables,
    write_manifest,
)
from conftest import make_record


def valid_clip(rng, t=30, h=16, w=16, view="PLAX", pid="P0") -> EchoClip:
    frames = rng.random((t, h, w, 1)).astype(np.float32)
    return EchoClip(patient_id=pid, view=view, frames=frames)


class TestClipRoundtrip:
    def test_roundtrip_is_bit_identical(self, rng, tmp_path):
        clip = valid_clip(rng)
        path = tmp_path / "c.ecv"
        write_clip(clip, path)
        loaded = read_clip(path, patient_id="P0", view="PLAX")
        assert loaded.frames.dtype == np.float32
        assert np.array_equal(loaded.frames, clip.frames)

    def test_header_layout_is_little_endian(self, rng, tmp_path):
        clip = valid_clip(rng, t=31, h=17, w=19)
        path = tmp_path / "c.ecv"
        write_clip(clip, path)
        raw = path.read_bytes()
        assert raw[:4] == b"ECV1"
        assert struct.unpack("<4I", raw[4:20]) == (31, 17, 19, 1)
        assert len(raw) == 20 + 4 * 31 * 17 * 19

    def test_payload_floats_in_t_row_col_channel_order(self, rng, tmp_path):
        clip = valid_clip(rng)
        path = tmp_path / "c.ecv"
        write_clip(clip, path)
        raw = path.read_bytes()
        payload = np.frombuffer(raw[20:], dtype="<f4")
        # (t, row, col, channel) index order means plain C-order raveling.
        assert np.array_equal(payload, clip.frames.ravel(order="C"))


class TestClipFormatErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ecv"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagicError, match="bad magic"):
            read_clip(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.ecv"
        path.write_bytes(b"ECV1" + b"\x00" * 8)
        with pytest.raises(TruncatedClipError):
            read_clip(path)

    def test_truncated_payload(self, rng, tmp_path):
        clip = valid_clip(rng)
        path = tmp_path / "trunc.ecv"
        write_clip(clip, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TruncatedClipError):
            read_clip(path)

    def test_trailing_bytes(self, rng, tmp_path):
        clip = valid_clip(rng)
        path = tmp_path / "extra.ecv"
        write_clip(clip, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(PayloadSizeError):
            read_clip(path)

    def test_short_clip_rejected_citing_frame_rule(self, rng, tmp_path):
        frames = rng.random((10, 16, 16, 1)).astype("<f4")
        path = tmp_path / "short-frames.ecv"
        path.write_bytes(b"ECV1" + struct.pack("<4I", 10, 16, 16, 1) + frames.tobytes())
        with pytest.raises(ValidationError, match="30 frames"):
            read_clip(path)


class TestClipValidation:
    def test_write_rejects_short_clip(self, rng, tmp_path):
        clip = valid_clip(rng, t=29)
        with pytest.raises(ValidationError, match="30"):
            write_clip(clip, tmp_path / "x.ecv")

    def test_write_rejects_out_of_range_values(self, rng, tmp_path):
        clip = valid_clip(rng)
        clip.frames[0, 0, 0, 0] = 1.5
        with pytest.raises(ValidationError, match="0,1"):
            write_clip(clip, tmp_path / "x.ecv")

    def test_write_rejects_small_frames(self, rng, tmp_path):
        clip = valid_clip(rng, h=8, w=8)
        with pytest.raises(ValidationError):
            write_clip(clip, tmp_path / "x.ecv")

    def test_unknown_view_tag(self, rng):
        clip = valid_clip(rng, view="SAX")
        with pytest.raises(ValidationError, match="view"):
            clip.validate()


class TestEHRTables:
    def test_roundtrip(self, tmp_path):
        from cardiofuse import LabObservation

        records = [
            make_record("P1", label=1, labs=[]),
            # a value with a long repr must survive the CSV exactly
            make_record("P2", label=0, labs=[LabObservation("30934-4", 1.0 / 3.0, -45)]),
        ]
        write_ehr_tables(records, tmp_path)
        loaded = read_ehr_tables(tmp_path)
        assert [r.patient_id for r in loaded] == ["P1", "P2"]
        assert loaded[1].labs[0].value == 1.0 / 3.0
        assert loaded[1].labs[0].days_from_echo == -45
        assert loaded[0].cardiac_metrics == records[0].cardiac_metrics

    def test_missing_metrics_row(self, tmp_path):
        records = [make_record("P1")]
        write_ehr_tables(records, tmp_path)
        metrics = (tmp_path / "metrics.csv").read_text().splitlines()
        (tmp_path / "metrics.csv").write_text(metrics[0] + "\n")
        with pytest.raises(DatasetError, match="P1"):
            read_ehr_tables(tmp_path)


class TestLoadDataset:
    def test_counts(self, tiny_cohort_dir):
        records, clips = load_dataset(tiny_cohort_dir / "manifest.csv")
        assert len(records) == 24
        assert sum(len(v) for v in clips.values()) == 48
        for per_view in clips.values():
            assert set(per_view) == {"PLAX", "A4C"}

    def test_missing_clip_file_names_path(self, tiny_cohort_dir, tmp_path):
        import shutil

        work = tmp_path / "broken"
        shutil.copytree(tiny_cohort_dir, work)
        victim = work / "clips" / "P0003_plax.ecv"
        victim.unlink()
        with pytest.raises(DatasetError, match="P0003_plax.ecv"):
            load_dataset(work / "manifest.csv")

    def test_duplicate_patient_id_names_id(self, tiny_cohort_dir, tmp_path):
        import shutil

        work = tmp_path / "dup"
        shutil.copytree(tiny_cohort_dir, work)
        manifest = work / "manifest.csv"
        lines = manifest.read_text().splitlines()
        lines.append(lines[1])
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="P0000"):
            load_dataset(manifest)

    def test_manifest_roundtrip(self, tmp_path):
        rows = [("P1", 0, "clips/a.ecv", "clips/b.ecv"), ("P2", 1, "clips/c.ecv", "clips/d.ecv")]
        path = tmp_path / "manifest.csv"
        write_manifest(rows, path)
        loaded = read_manifest(path)
        assert [r["patient_id"] for r in loaded] == ["P1", "P2"]
        assert loaded[1]["a4c_path"] == "clips/d.ecv"

    def test_manifest_bad_label(self, tmp_path):
        path = tmp_path / "manifest.csv"
        write_manifest([("P1", 2, "a", "b")], path)
        with pytest.raises(DatasetError, match="label"):
            read_manifest(path)

import hashlib
from pathlib import Path

import numpy as np
import pytest

from cardiofuse import BNP_CODE, CohortSpec, ValidationError, generate_cohort, render_echo_clip
from cardiofuse.dataio import read_ehr_tables, read_manifest


def dir_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def spec(**overrides) -> CohortSpec:
    base = dict(n_patients=20, prevalence=0.5, seed=1, n_lab_codes=5, frame_size=16)
    base.update(overrides)
    return CohortSpec(**base)


class TestCohortSpec:
    @pytest.mark.parametrize(
        "field,value",
        [
            ("n_patients", 1),
            ("prevalence", 1.5),
            ("prevalence", -0.1),
            ("n_lab_codes", 0),
            ("lab_missingness", 1.0),
            ("signal_ehr", -1.0),
            ("frames_per_clip", 29),
            ("frame_size", 8),
            ("channels", 3),
        ],
    )
    def test_invalid_spec_names_field(self, field, value):
        with pytest.raises(ValidationError, match=field):
            spec(**{field: value}).validate()

    def test_positive_count_rounds(self):
        assert spec(n_patients=20, prevalence=0.5).n_positive == 10
        assert spec(n_patients=200, prevalence=0.4).n_positive == 80
        assert spec(n_patients=41, prevalence=17 / 41).n_positive == 17

    def test_both_classes_present_at_extreme_prevalence(self):
        assert spec(n_patients=10, prevalence=0.99).n_positive == 9
        assert spec(n_patients=10, prevalence=0.01).n_positive == 1


class TestGenerateCohort:
    def test_class_counts(self, tmp_path):
        manifest = generate_cohort(spec(), tmp_path)
        rows = read_manifest(manifest)
        labels = [int(r["label"]) for r in rows]
        assert len(rows) == 20
        assert sum(labels) == 10

    def test_bit_identical_rerun(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_cohort(spec(), a)
        generate_cohort(spec(), b)
        assert dir_digest(a) == dir_digest(b)

    def test_seed_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_cohort(spec(seed=1), a)
        generate_cohort(spec(seed=2), b)
        assert dir_digest(a) != dir_digest(b)

    def test_bmi_consistency_and_validation(self, tmp_path):
        generate_cohort(spec(), tmp_path)
        for record in read_ehr_tables(tmp_path):
            record.validate()

    def test_signal_shift_monotone_in_knob(self, tmp_path):
        """Class separation of the designated lab grows with signal_ehr."""
        gaps = []
        for i, knob in enumerate((0.0, 1.5, 3.0)):
            out = tmp_path / f"k{i}"
            generate_cohort(
                spec(n_patients=200, signal_ehr=knob, lab_missingness=0.0, seed=11), out
            )
            records = read_ehr_tables(out)
            by_label = {0: [], 1: []}
            for record in records:
                values = [o.value for o in record.labs if o.code == BNP_CODE]
                if values:
                    by_label[record.label].append(np.mean(values))
            gaps.append(np.mean(by_label[1]) - np.mean(by_label[0]))
        assert gaps[0] < gaps[1] < gaps[2]

    def test_missingness_fraction(self, tmp_path):
        target = 0.25
        cohort = spec(n_patients=100, n_lab_codes=12, lab_missingness=target, seed=5)
        generate_cohort(cohort, tmp_path)
        records = read_ehr_tables(tmp_path)
        missing = 0
        from cardiofuse.cohort import _lab_codes

        codes = _lab_codes(cohort.n_lab_codes)
        for record in records:
            observed = {o.code for o in record.labs}
            missing += sum(1 for code in codes if code not in observed)
        fraction = missing / (len(records) * len(codes))
        assert abs(fraction - target) <= 0.05


class TestRenderEchoClip:
    def test_range_and_frame_count(self, rng):
        clip = render_echo_clip("PLAX", 0.2, rng, frames_per_clip=34, frame_size=24)
        assert clip.frames.shape == (34, 24, 24, 1)
        assert clip.frames.shape[0] >= 30
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0

    @pytest.mark.parametrize("view", ["PLAX", "A4C"])
    def test_bright_pixel_count_monotone_in_wall(self, view):
        walls = [0.05, 0.1, 0.18, 0.3, 0.45]
        counts = []
        for wall in walls:
            clip = render_echo_clip(view, wall, np.random.default_rng(7), frame_size=32)
            counts.append(float(np.mean(clip.frames > 0.5)))
        for lo, hi in zip(counts, counts[1:]):
            assert lo <= hi
        assert counts[-1] > counts[0]  # the knob actually moves pixels

    def test_identical_rng_gives_identical_tensor(self):
        a = render_echo_clip("A4C", 0.2, np.random.default_rng(9))
        b = render_echo_clip("A4C", 0.2, np.random.default_rng(9))
        assert np.array_equal(a.frames, b.frames)

    def test_views_have_distinct_layouts(self):
        plax = render_echo_clip("PLAX", 0.2, np.random.default_rng(1), frame_size=32)
        a4c = render_echo_clip("A4C", 0.2, np.random.default_rng(1), frame_size=32)
        mean_plax = plax.frames.mean(axis=0)
        mean_a4c = a4c.frames.mean(axis=0)
        assert float(np.abs(mean_plax - mean_a4c).mean()) > 0.05

    def test_wall_oscillates_over_time(self):
        clip = render_echo_clip("PLAX", 0.25, np.random.default_rng(3), frames_per_clip=40)
        per_frame = (clip.frames > 0.5).sum(axis=(1, 2, 3))
        assert per_frame.max() > per_frame.min()

    def test_invalid_wall_param(self, rng):
        with pytest.raises(ValidationError, match="wall_param"):
            render_echo_clip("PLAX", 0.0, rng)

    def test_unknown_view(self, rng):
        with pytest.raises(ValidationError, match="view"):
            render_echo_clip("SAX", 0.2, rng)

import math

import numpy as np
import pytest

from gesturenet import pnm
from gesturenet.dataset import (ANGLES, FoldPlan, ManifestError, Sample, SynthConfig,
                                augment_rotations, expand_rotations, load_manifest, make_folds,
                                prepare_masks, render_depth, rotate_mask, synth_generate,
                                write_manifest)
from gesturenet.segmentation import (dilate, fill_holes, segment_full_resolution, threshold_depth)
from oracles import count_components


def write_rows(path, rows, header="person,gesture,repetition,depth_path"):
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def depth_file(tmp_path):
    pnm.write_pgm(tmp_path / "d.pgm", np.full((4, 4), 10, np.uint16), 65535)
    return "d.pgm"


class TestManifest:
    def test_reads_rows(self, tmp_path, depth_file):
        path = write_rows(tmp_path / "m.csv", [f"3,7,2,{depth_file}", f"14,0,10,{depth_file}"])
        samples = load_manifest(path)
        assert [(s.person_id, s.gesture, s.repetition) for s in samples] == [(3, 7, 2), (14, 0, 10)]
        assert samples[0].depth_path == tmp_path / depth_file and samples[0].rotation_deg == 0

    def test_empty_file_warns(self, tmp_path, caplog):
        (tmp_path / "m.csv").write_text("")
        assert load_manifest(tmp_path / "m.csv") == []
        assert "empty" in caplog.text

    @pytest.mark.parametrize("row,needle", [
        ("1,11,1,d.pgm", "gesture 11"),
        ("0,1,1,d.pgm", "person 0"),
        ("1,1,11,d.pgm", "repetition 11"),
        ("1,x,1,d.pgm", "non-integer"),
        ("1,1,1", "expected 4 fields"),
        ("1,1,1,missing.pgm", "missing depth file"),
    ])
    def test_bad_rows_name_the_row(self, tmp_path, depth_file, row, needle):
        path = write_rows(tmp_path / "m.csv", [f"1,0,1,{depth_file}", row])
        with pytest.raises(ManifestError, match=f"row 3: .*{needle}"):
            load_manifest(path)

    def test_bad_header(self, tmp_path):
        with pytest.raises(ManifestError, match="row 1"):
            load_manifest(write_rows(tmp_path / "m.csv", [], header="a,b,c,d"))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(OSError):
            load_manifest(tmp_path / "nope.csv")

    def test_write_round_trip(self, tmp_path, depth_file):
        samples = [Sample(2, 5, 3, tmp_path / depth_file)]
        write_manifest(tmp_path / "m.csv", samples)
        text = (tmp_path / "m.csv").read_text()
        assert text == "person,gesture,repetition,depth_path\n2,5,3,d.pgm\n"
        assert load_manifest(tmp_path / "m.csv") == samples


class TestRotation:
    def test_angle_set(self):
        assert ANGLES == (-20, -15, -10, -5, 0, 5, 10, 15, 20)

    def test_sample_rejects_other_angles(self):
        with pytest.raises(ValueError):
            Sample(1, 1, 1, "x", rotation_deg=7)

    def test_zero_is_identity_and_nine_outputs(self):
        m = (np.random.default_rng(0).random((30, 40)) < 0.3).astype(np.uint8)
        out = augment_rotations(m)
        assert len(out) == 9 and np.array_equal(out[ANGLES.index(0)], m)
        assert all(r.shape == m.shape and set(np.unique(r)) <= {0, 1} for r in out)

    def test_quarter_turn_is_exact(self):
        m = np.zeros((5, 5), np.uint8)
        m[0, 2] = 1  # top centre
        r = rotate_mask(m, 90)
        # counter-clockwise as displayed: top moves to the left
        assert r[2, 0] == 1 and r.sum() == 1

    def test_expand_rotations(self):
        samples = [Sample(1, g, 1, f"{g}.pgm") for g in range(1400 // 140)] * 140
        expanded = expand_rotations(samples)
        assert len(samples) == 1400 and len(expanded) == 12_600
        assert sorted({s.rotation_deg for s in expanded}) == sorted(ANGLES)

    def test_round_trip_preserves_area_on_synthetic_frames(self, synth_samples):
        for s in synth_samples[::97]:
            full = segment_full_resolution(pnm.read_pgm(s.depth_path))
            for a in (20, -20):
                back = rotate_mask(rotate_mask(full, a), -a)
                assert abs(int(back.sum()) - int(full.sum())) <= 0.05 * full.sum()


class TestFolds:
    def test_sizes_and_partition(self):
        plan = make_folds(range(1, 15), seed=3)
        assert sorted(len(g) for g in plan.groups) == [3, 3, 4, 4]
        flat = [p for g in plan.groups for p in g]
        assert sorted(flat) == list(range(1, 15))

    def test_seeded(self):
        assert make_folds(range(1, 15), 5) == make_folds(range(1, 15), 5)
        assert len({make_folds(range(1, 15), s) for s in range(10)}) > 1

    def test_too_few_persons(self):
        with pytest.raises(ValueError):
            make_folds([1, 2, 3], 0)

    def test_split_is_person_disjoint(self):
        persons = np.repeat(np.arange(1, 15), 100)
        plan = make_folds(range(1, 15), 1)
        for k in range(4):
            train, test = plan.split(persons, k)
            assert not np.any(train & test) and np.all(train | test)
            assert not set(persons[train]) & set(persons[test])
            assert plan.group_of(int(persons[test][0])) == k

    def test_unknown_person(self):
        plan = FoldPlan(((1,), (2,), (3,), (4,)))
        with pytest.raises(KeyError):
            plan.split([1, 5], 0)


def count_fingers(mask, pose):
    """Foreground arcs crossed by a circle between palm and fingertips, minus the forearm.

    Gaps or arcs shorter than 2 px come from pixel rounding at the silhouette and are ignored.
    """
    reach = 11.0 * pose.scale + pose.finger_length
    radius = (13.0 * pose.scale + reach) / 2
    n = 1440
    theta = np.linspace(0, 2 * math.pi, n, endpoint=False)
    ys = np.rint(pose.center[0] + radius * np.sin(theta)).astype(int)
    xs = np.rint(pose.center[1] + radius * np.cos(theta)).astype(int)
    inside = (ys >= 0) & (ys < mask.shape[0]) & (xs >= 0) & (xs < mask.shape[1])
    ring = np.zeros(n, bool)
    ring[inside] = mask[ys[inside], xs[inside]] > 0
    short = int(2.0 / (radius * 2 * math.pi / n))
    for value in (False, True):  # close short gaps, then drop short arcs
        start = int(np.flatnonzero(ring != value)[0])
        rolled = np.roll(ring, -start)
        i = 0
        while i < n:
            if rolled[i] == value:
                j = i
                while j < n and rolled[j] == value:
                    j += 1
                if j - i < short:
                    rolled[i:j] = not value
                i = j
            else:
                i += 1
        ring = np.roll(rolled, start)
    return int(np.sum(ring & ~np.roll(ring, 1))) - 1


class TestSynthetic:
    def test_default_corpus(self, synth_dir, synth_samples):
        assert len(synth_samples) == 1400
        assert len(list((synth_dir / "depth").glob("*.pgm"))) == 1400
        assert (synth_dir / "depth" / "p14_g09_r10.pgm").is_file()
        counts = np.bincount([s.gesture for s in synth_samples])
        assert counts.tolist() == [140] * 10

    def test_byte_reproducible(self, tmp_path):
        cfg = SynthConfig(persons=4, repetitions=1)
        synth_generate(tmp_path / "a", cfg, 11)
        synth_generate(tmp_path / "b", cfg, 11)
        synth_generate(tmp_path / "c", cfg, 12)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 41
        assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
        assert any((tmp_path / "a" / f).read_bytes() != (tmp_path / "c" / f).read_bytes() for f in files)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            synth_generate(blocker / "sub", SynthConfig(persons=1, repetitions=1), 0)

    def test_every_frame_is_one_component(self, synth_samples):
        for s in synth_samples:
            depth = pnm.read_pgm(s.depth_path)
            mask, _ = threshold_depth(depth)
            assert count_components(fill_holes(dilate(mask))) == 1, s.depth_path

    def test_hand_depth_band(self):
        depth, _ = render_depth(SynthConfig(), 0, 1, 4, 1)
        values = set(np.unique(depth)) - {0}
        hand = {v for v in values if v < 60}
        assert hand and max(hand) - min(hand) <= 2 and 38 <= min(hand) <= 42
        assert min(values - hand) >= 78

    @pytest.mark.parametrize("gesture", range(10))
    def test_finger_count_matches_class(self, gesture):
        cfg = SynthConfig()
        for person in (1, 6, 11):
            for rep in (1, 5, 10):
                depth, pose = render_depth(cfg, 3, person, gesture, rep)
                mask = segment_full_resolution(depth)
                assert count_fingers(mask, pose) == gesture, (person, rep)

    def test_prepared_masks(self, synth_samples):
        masks = prepare_masks(synth_samples[:3])
        assert masks.shape == (3, 9, 50, 50) and masks.dtype == np.uint8
        threaded = prepare_masks(synth_samples[:3], threads=3)
        assert np.array_equal(masks, threaded)

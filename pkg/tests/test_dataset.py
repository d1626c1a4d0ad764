import json
import logging

import numpy as np
import pytest

from drlfd import dataset as ds
from drlfd import geometry as geo
from drlfd.validation import TrialValidationError, ValidationError

from faults import FAULTS, corrupted_copy


def _valid_cell(rng, t=0):
    T = [geo.random_transform(rng, 0.1) for _ in range(4)]
    return ds.Cell(t=t, a=rng.normal(size=6), b=rng.normal(size=6), c=T[0], d=T[1], e=T[2], f=T[3],
                   g=np.tile([[10.0, 20.0]], (6, 1)), h=rng.normal(size=3))


def test_validate_cell_valid(rng):
    assert ds.validate_cell(_valid_cell(rng), (310, 244)) == []


def test_validate_cell_bottom_row(rng):
    cell = _valid_cell(rng)
    cell.c[3] = (0, 0, 0, 2)
    v = ds.validate_cell(cell, (310, 244))
    assert [(x.field, x.rule) for x in v] == [("c", "bottom_row")]


def test_validate_cell_marker_bounds(rng):
    cell = _valid_cell(rng)
    cell.g[2] = (400, 10)
    v = ds.validate_cell(cell, (310, 244))
    assert [(x.field, x.rule) for x in v] == [("g", "bounds")]
    assert "camera 3" in v[0].message


def test_validate_cell_out_of_view_sentinel_allowed(rng):
    cell = _valid_cell(rng)
    cell.g[0] = ds.OUT_OF_VIEW
    assert ds.validate_cell(cell, (310, 244)) == []


def test_parse_generated_trial(small_root, small_trials):
    tr = ds.parse_trial(ds.list_trials(small_root)[0])
    assert len(tr) == len(tr.cells) == json.loads((tr.path / "meta.json").read_text())["cell_count"]
    assert sorted(tr.frames) == [1, 2, 3, 4, 5, 6]
    assert all(len(v) == len(tr) for v in tr.frames.values())
    assert len(small_trials) == 3


@pytest.mark.parametrize("name", sorted(FAULTS))
def test_fault_fixture_named_violation(small_root, tmp_path, name):
    src = ds.list_trials(small_root)[0]
    bad = corrupted_copy(src, tmp_path / src.name, name)
    _, field, rule = FAULTS[name]
    record, violations = ds.check_trial(bad)
    assert record is None
    assert (field, rule) in {(v.field, v.rule) for v in violations}
    with pytest.raises(TrialValidationError) as exc:
        ds.parse_trial(bad)
    assert all(v.trial_id == src.name for v in exc.value.violations)


def test_missing_frame_names_camera_and_timestep(small_root, tmp_path):
    src = ds.list_trials(small_root)[0]
    bad = corrupted_copy(src, tmp_path / src.name, "missing_frame")
    _, violations = ds.check_trial(bad)
    sync = [v for v in violations if v.rule == "sync"]
    assert len(sync) == 1 and sync[0].field == "cam4" and sync[0].cell == 10
    assert "camera 4" in str(sync[0]) and "timestep 10" in str(sync[0])


def test_bad_rotation_reports_cell(small_root, tmp_path):
    src = ds.list_trials(small_root)[0]
    bad = corrupted_copy(src, tmp_path / src.name, "bad_rotation")
    _, violations = ds.check_trial(bad)
    det = [v for v in violations if v.rule == "det"]
    assert det[0].cell == 5 and det[0].field == "c"


def test_missing_file_and_malformed_row(small_root, tmp_path):
    import shutil
    src = ds.list_trials(small_root)[0]
    a = shutil.copytree(src, tmp_path / "a")
    (a / "calib.json").unlink()
    _, v = ds.check_trial(a)
    assert [(x.field, x.rule) for x in v] == [("calib.json", "missing_file")]
    b = shutil.copytree(src, tmp_path / "b")
    lines = (b / "cells.csv").read_text().splitlines()
    lines[3] = lines[3].replace(",", ",x", 1)
    (b / "cells.csv").write_text("\n".join(lines) + "\n")
    _, v = ds.check_trial(b)
    assert ("cells.csv", "malformed") in {(x.field, x.rule) for x in v}


def test_cell_count_outside_plausible_range_warns(small_root, caplog):
    with caplog.at_level(logging.WARNING, logger="drlfd.dataset"):
        ds.parse_trial(ds.list_trials(small_root)[0])
    assert "outside the usual" in caplog.text


def test_write_parse_round_trip_is_exact(small_trials, tmp_path):
    tr = small_trials[0]
    out = ds.write_trial(tmp_path / tr.trial_id, tr.trial_id, tr.cells, tr.calib, tr.resolution, tr.fps)
    cells = ds._read_cells(out / "cells.csv", tr.trial_id, [])
    for a, b in zip(cells, tr.cells):
        assert np.array_equal(np.array(a.to_row()), np.array(b.to_row()))


def test_make_samples_counts_and_fields(small_trials):
    tr = small_trials[0]
    samples = ds.make_samples(tr, (16, 16))
    assert len(samples) == 6 * len(tr)
    assert [s.camera_id for s in samples[:: len(tr)]] == [1, 2, 3, 4, 5, 6]
    s = samples[0]
    assert s.image.shape == (16, 16, 3) and s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert s.calib_vec is None and all(x.calib_vec is None for x in samples)
    assert np.array_equal(s.target, geo.pose_to_state7(tr.cells[0].f))
    assert np.array_equal(s.arm2_state, geo.pose_to_state7(tr.cells[0].d))
    for x in samples[:20]:
        for q in (x.state[:4], x.state[7:11], x.target[:4]):
            assert abs(np.linalg.norm(q) - 1) < 1e-6 and q[0] >= 0


def test_make_samples_calib_vec(small_trials):
    tr = small_trials[0]
    samples = ds.make_samples(tr, (8, 8), with_calib=True, cameras=[2, 5])
    s2 = samples[0]
    ref = geo.pose_to_state7(tr.calib.a2_T_l[0] @ tr.calib.l_T_r[0])
    assert np.allclose(s2.calib_vec, ref, atol=1e-12)
    s5 = samples[len(tr)]
    assert s5.camera_id == 5 and np.array_equal(s5.calib_vec, geo.pose_to_state7(tr.calib.a2_T_l[2]))


def test_make_samples_deterministic(small_trials):
    a = ds.make_samples(small_trials[1], (16, 16), cameras=[3])
    b = ds.make_samples(small_trials[1], (16, 16), cameras=[3])
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_preprocess_image_crop_resize():
    img = (np.arange(244 * 310 * 3) % 256).astype(np.uint8).reshape(244, 310, 3)
    out = ds.preprocess_image(img, (224, 224))
    assert out.shape == (224, 224, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    # square input at the target size is only rescaled
    sq = img[:32, :32]
    assert np.array_equal(ds.preprocess_image(sq, (32, 32)), sq.astype(np.float32) / 255)


def _stub_samples(lengths, cameras=(1,)):
    out = []
    for i, n in enumerate(lengths):
        for cam in cameras:
            for t in range(n):
                out.append(ds.Sample(image=None, camera_id=cam, state=np.zeros(14), target=np.full(7, t),
                                     trial_id=f"trial_{i:03d}", t=t))
    return out


def test_window_samples_counts():
    assert len(ds.window_samples(_stub_samples([10]), 5)) == 6
    assert len(ds.window_samples(_stub_samples([10]), 1)) == 10
    assert len(ds.window_samples(_stub_samples([10, 12]), 4)) == 16
    assert len(ds.window_samples(_stub_samples([10, 12], cameras=(1, 2)), 4)) == 32


def test_window_samples_respect_boundaries():
    wins = ds.window_samples(_stub_samples([6, 7], cameras=(1, 2)), 3)
    for w in wins:
        assert len({s.trial_id for s in w.window}) == 1
        assert len({s.camera_id for s in w.window}) == 1
        ts = [s.t for s in w.window]
        assert ts == list(range(ts[0], ts[0] + 3))
        assert np.array_equal(w.target, w.window[-1].target)


def test_window_samples_gap_and_too_long(caplog):
    s = [x for x in _stub_samples([10]) if x.t != 4]
    assert len(ds.window_samples(s, 3)) == 2 + 3
    with caplog.at_level(logging.WARNING):
        assert ds.window_samples(_stub_samples([3]), 5) == []
    assert "exceeds every stream" in caplog.text
    with pytest.raises(ValidationError):
        ds.window_samples(s, 0)


def test_split_random_counts_60_trials():
    ids = [f"t{i:02d}" for i in range(60) for _ in range(3)]
    sp = ds.split_random(ids, seed=3)
    assert (len(sp.test_trials), len(sp.val_trials), len(sp.train_trials)) == (12, 10, 38)
    sp.check_partition(len(ids))


def test_split_random_deterministic_and_seed_dependent():
    ids = [f"t{i:02d}" for i in range(30) for _ in range(2)]
    assert ds.split_random(ids, 1) == ds.split_random(ids, 1)
    assert ds.split_random(ids, 1).test_trials != ds.split_random(ids, 2).test_trials


def test_split_random_trial_granular():
    ids = [f"t{i % 12}" for i in range(240)]
    for seed in range(25):
        sp = ds.split_random(ids, seed)
        sp.check_partition(len(ids))
        sets = [{ids[i] for i in part} for part in (sp.train, sp.val, sp.test)]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


def test_split_random_needs_three_trials():
    with pytest.raises(ValidationError):
        ds.split_random(["a", "a", "b"], 0)


def test_split_leave_camera_out():
    samples = _stub_samples([5, 6, 7, 8, 9], cameras=range(1, 7))
    union = set()
    for cam in range(1, 7):
        sp = ds.split_leave_camera_out(samples, cam)
        sp.check_partition(len(samples))
        assert len(sp.test) == len(samples) // 6
        assert all(samples[i].camera_id == cam for i in sp.test)
        assert not any(samples[i].camera_id == cam for i in sp.train + sp.val)
        assert sp.label == f"Camera{cam}"
        union |= set(sp.test)
    assert union == set(range(len(samples)))
    with pytest.raises(ValidationError):
        ds.split_leave_camera_out(samples, 7)


def test_split_manifest_round_trip():
    sp = ds.split_random([f"t{i}" for i in range(9)], 4)
    assert ds.Split.from_dict(json.loads(json.dumps(sp.to_dict()))) == sp

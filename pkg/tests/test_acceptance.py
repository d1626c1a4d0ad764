"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines.
"""

import math
import time

import numpy as np
import pytest

from drlfd import dataset as ds
from drlfd import geometry as geo
from drlfd import nnkernel as nk
from drlfd.evaluate import compute_metrics, evaluate, parse_report_csv, report_table
from drlfd.models import ModelConfig, build_model, transfer_encoder, with_variant
from drlfd.synthgen import SynthConfig, gen_dataset
from drlfd.train import Hyperparams, load_checkpoint, save_checkpoint, train, training_loss

from faults import FAULTS, corrupted_copy
from oracles import matmul4, random_unit_quats, rotation_angle


class Gate:
    def __init__(self, number, title, budget_s):
        self.number, self.title, self.budget = number, title, budget_s

    def __enter__(self):
        self.start = time.perf_counter()
        self.checks = []
        return self

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        self.check(elapsed < self.budget, f"{elapsed:.1f}s < {self.budget}s")
        ok = exc_type is None and all(c for c, _ in self.checks)
        detail = "; ".join(d for _, d in self.checks)
        if exc_type is not None:
            detail += f"; raised {exc_type.__name__}: {exc}"
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {self.number}: {self.title} ({detail})")
        if exc_type is None:
            failed = [d for c, d in self.checks if not c]
            assert not failed, f"criterion {self.number} failed: {failed}"
        return False


def test_criterion_1_gradient_fidelity():
    with Gate(1, "gradient fidelity", 120) as g:
        res = nk.check_layer_kinds(nk.LAYER_KINDS, trials=20, seed=0, tol=1e-4, abs_floor=1e-12)
        worst = max(r["max_rel_error"] for r in res.values())
        g.check(set(res) == set(nk.LAYER_KINDS) | {"pose_loss", "mae_loss"}, f"{len(res)} kinds")
        g.check(all(r["passed"] for r in res.values()), f"worst rel err {worst:.2e} < 1e-4")


def test_criterion_2_quaternion_metric_suite():
    with Gate(2, "quaternion metric suite", 10) as g:
        rng = np.random.default_rng(2)
        a, b = random_unit_quats(rng, 10_000), random_unit_quats(rng, 10_000)
        d = geo.quat_distance(a, b)
        g.check(np.all((d >= 0) & (d <= 1)), "range [0,1]")
        g.check(np.array_equal(d, geo.quat_distance(b, a)), "symmetric")
        g.check(np.array_equal(d, geo.quat_distance(-a, b)) and np.array_equal(d, geo.quat_distance(a, -b)),
                "double cover")
        axes = rng.normal(size=(10_000, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        c = math.cos(math.pi / 4)
        quarter = np.concatenate([np.full((10_000, 1), c), c * axes], axis=1)
        ninety = geo.quat_distance(a, geo.canonicalize(_quat_mul(a, quarter)))
        g.check(np.max(np.abs(ninety - 0.5)) < 1e-12, f"90 deg -> 0.5 (max dev {np.max(np.abs(ninety - 0.5)):.1e})")
        worst = 0.0
        for _ in range(1000):
            R = geo.random_rotation(rng)
            worst = max(worst, abs(rotation_angle(R, geo.rotmat_from_quat(geo.quat_from_rotmat(R)))))
        g.check(worst < 1e-9, f"round trip {worst:.1e} rad < 1e-9")


def _quat_mul(p, q):
    w1, x1, y1, z1 = p.T
    w2, x2, y2, z2 = q.T
    return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2, w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2, w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=1)


def test_criterion_3_calibration_chain():
    with Gate(3, "calibration chain", 5) as g:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(1000):
            Ts = [geo.random_transform(rng, 0.5) for _ in range(9)]
            cal = geo.CalibrationSet(Ts[:3], Ts[3:6], Ts[6:])
            pair = int(rng.integers(1, 4))
            ref = matmul4(cal.a1_T_l[pair - 1], cal.l_T_r[pair - 1])
            worst = max(worst, float(np.max(np.abs(geo.eye_to_hand_right(cal, pair) - ref))))
        g.check(worst < 1e-12, f"max abs dev {worst:.1e} < 1e-12")


def test_criterion_4_dataset_integrity(tmp_path):
    with Gate(4, "dataset integrity", 30) as g:
        root = tmp_path / "ten"
        gen_dataset(SynthConfig(n_trials=10, cells_per_trial=(50, 60), image_size=(32, 32), seed=4), root)
        paths = ds.list_trials(root)
        clean = [len(ds.check_trial(p)[1]) for p in paths]
        g.check(len(paths) == 10 and sum(clean) == 0, f"{len(paths)} trials, {sum(clean)} violations")
        named = 0
        for name, (_, field, rule) in FAULTS.items():
            bad = corrupted_copy(paths[0], tmp_path / name / paths[0].name, name)
            record, violations = ds.check_trial(bad)
            named += record is None and (field, rule) in {(v.field, v.rule) for v in violations}
        g.check(named == len(FAULTS) == 6, f"{named}/6 faults named")


def test_criterion_5_split_correctness():
    with Gate(5, "split correctness", 10) as g:
        keys = [ds.Sample(image=None, camera_id=cam, state=np.zeros(14), target=np.zeros(7),
                          trial_id=f"trial_{i:03d}", t=t)
                for i in range(12) for cam in range(1, 7) for t in range(50 + i)]
        ok = True
        for seed in range(20):
            sp = ds.split_random(keys, seed)
            sp.check_partition(len(keys))
            ok &= (len(sp.test_trials), len(sp.val_trials), len(sp.train_trials)) == (2, 2, 8)
            owner = {}
            for part, idx in (("train", sp.train), ("val", sp.val), ("test", sp.test)):
                for i in idx:
                    ok &= owner.setdefault(keys[i].trial_id, part) == part
        g.check(ok, "random: trial-granular 8/2/2 partitions over 20 seeds")
        union = set()
        for cam in range(1, 7):
            sp = ds.split_leave_camera_out(keys, cam)
            sp.check_partition(len(keys))
            ok &= all(keys[i].camera_id == cam for i in sp.test)
            ok &= not any(keys[i].camera_id == cam for i in sp.train + sp.val)
            union |= set(sp.test)
        g.check(ok and union == set(range(len(keys))), "leave-camera-out: pure test sets covering the dataset")


@pytest.fixture(scope="module")
def overfit_samples(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    gen_dataset(SynthConfig(n_trials=1, cells_per_trial=(50, 50), seed=6), root)
    return ds.make_samples(ds.load_dataset(root)[0], (64, 64), cameras=[6])[:10]


def test_criterion_6_memorization(overfit_samples):
    with Gate(6, "memorization", 180) as g:
        cfg = ModelConfig(image_size=(64, 64), residual=True)
        split = ds.Split(train=tuple(range(10)), val=(), test=(), protocol="given")
        hp = Hyperparams(epochs=500, loss="mae", batch_size=10, patience=500, seed=6)
        runs = [train(build_model(cfg, 6), split, overfit_samples, hp) for _ in range(2)]
        mae = training_loss(runs[0][0], overfit_samples, range(10), hp)
        g.check(mae < 1e-3, f"train MAE {mae:.2e} < 1e-3")
        g.check(runs[0][0].checksum() == runs[1][0].checksum() and runs[0][1] == runs[1][1], "deterministic")


# desk-scale settings for the end-to-end run; see README
E2E = dict(trials=20, cells=(50, 70), seed=0, ff_epochs=12, rec_epochs=40, rec_lr=3e-3, rec_batch=32, hidden=64)


@pytest.fixture(scope="module")
def e2e_samples(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    gen_dataset(SynthConfig(n_trials=E2E["trials"], cells_per_trial=E2E["cells"], seed=E2E["seed"]), root)
    samples = [s for tr in ds.load_dataset(root) for s in ds.make_samples(tr, (64, 64))]
    return samples, ds.split_random(samples, E2E["seed"])


@pytest.mark.slow
def test_criterion_7_end_to_end_learning_signal(e2e_samples):
    samples, split = e2e_samples
    with Gate(7, "end-to-end learning signal", 20 * 60) as g:
        cfg = ModelConfig(image_size=(64, 64), residual=True)
        ff, _ = train(build_model(cfg, 0), split, samples, Hyperparams(epochs=E2E["ff_epochs"], w_pos=1e6))
        ff_rep = evaluate(ff, split.test, samples)
        gain = 1 - ff_rep.aggregate.ave_pe / ff_rep.baseline.ave_pe
        g.check(gain >= 0.30, f"FF AvePE {ff_rep.aggregate.ave_pe:.4f} mm vs persistence "
                              f"{ff_rep.baseline.ave_pe:.4f} mm ({100 * gain:.0f}% lower, need 30%)")
        lcfg = with_variant(ModelConfig(image_size=(64, 64), residual=True, hidden_size=E2E["hidden"]), "lstm", 5)
        lstm = transfer_encoder(ff, build_model(lcfg, 0), freeze=True)
        lstm, _ = train(lstm, split, samples, Hyperparams(epochs=E2E["rec_epochs"], lr=E2E["rec_lr"],
                                                          batch_size=E2E["rec_batch"], w_pos=1e6, patience=10))
        lstm_rep = evaluate(lstm, split.test, samples)
        # the FF model scored on exactly the window targets the LSTM predicts
        windows = ds.window_samples([samples[i] for i in split.test], 5)
        ff_win = evaluate(ff, split.test, samples, items=[w.last for w in windows])
        g.check(lstm_rep.aggregate.ave_pe <= ff_win.aggregate.ave_pe,
                f"LSTM AvePE {lstm_rep.aggregate.ave_pe:.4f} mm <= FF {ff_win.aggregate.ave_pe:.4f} mm")


def test_criterion_8_calibration_augmentation(small_samples):
    with Gate(8, "calibration augmentation", 5 * 60) as g:
        base = ModelConfig(image_size=(32, 32), residual=True)
        calib = ModelConfig(image_size=(32, 32), residual=True, use_calibration=True)
        m0, m1 = build_model(base), build_model(calib)
        first = "head.1.W"
        g.check(m1.concat_width - m0.concat_width == 7, f"concat {m0.concat_width} -> {m1.concat_width}")
        g.check(m1.params[first].shape == (m0.params[first].shape[0] + 7, m0.params[first].shape[1]),
                f"first dense {m0.params[first].shape} -> {m1.params[first].shape}")
        split = ds.split_leave_camera_out(small_samples, 3)
        best, hist = train(m1, split, small_samples, Hyperparams(epochs=3, w_pos=1e6))
        rep = evaluate(best, split.test, small_samples)
        text, csv_text = report_table([rep], ["Camera3 +calib"])
        rows = parse_report_csv(csv_text)
        g.check(hist.epochs_run == 3 and [r[0] for r in rows] == ["Camera3 +calib"] and not rep.violations(),
                f"report row AvePE {rows[0][1]['AvePE']:.4f} mm")


def test_criterion_9_round_trips(tmp_path):
    with Gate(9, "checkpoint and report round trips", 10) as g:
        rng = np.random.default_rng(9)
        ok = True
        for variant in ("feedforward", "rnn", "gru", "lstm"):
            cfg = with_variant(ModelConfig(image_size=(32, 32), use_calibration=variant == "gru"), variant, 3)
            m = build_model(cfg, int(rng.integers(100)))
            path = save_checkpoint(m, None, tmp_path / f"{variant}.ckpt")
            back, _ = load_checkpoint(path, expected_config=cfg)
            ok &= back.config == cfg and all(back.params[k].tobytes() == v.tobytes() for k, v in m.params.items())
            ok &= set(back.params) == set(m.params)
        g.check(ok, "checkpoints bitwise equal")
        preds = np.concatenate([random_unit_quats(rng, 40), rng.normal(size=(40, 3))], axis=1)
        truths = np.concatenate([random_unit_quats(rng, 40), rng.normal(size=(40, 3))], axis=1)
        m = compute_metrics(preds, truths)
        fake = type("R", (), {"aggregate": m, "baseline": m})
        _, csv_text = report_table([fake, fake], ["a", "b"])
        rows = parse_report_csv(csv_text)
        g.check(all(tuple(v.values()) == m.row() for _, v in rows), "CSV values identical after re-parse")

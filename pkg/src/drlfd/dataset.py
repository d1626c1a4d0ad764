"""Demonstration trials on disk, their validation, and training samples.

Layout of one trial directory::

    trial_NNN/meta.json    trial_id, resolution [w, h], fps, cell_count
    trial_NNN/cells.csv    t, a[6], b[6], c[16], d[16], e[16], f[16], g[12], h[3]
    trial_NNN/calib.json   a1_T_l1..3, a2_T_l1..3, l_T_r1..3 (row-major 16-lists)
    trial_NNN/cam{1..6}/frame_%06d.png

Cells ``c``..``f`` are 4x4 poses written row-major; ``g`` holds the (u, v)
pixel of the tracked target in each of the six cameras at raw resolution,
with ``(-1, -1)`` marking out-of-view.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from drlfd import geometry
from drlfd.validation import TrialValidationError, ValidationError, Violation

log = logging.getLogger(__name__)

N_CAMERAS = 6
CONSISTENCY_TOL = 1e-9
PLAUSIBLE_CELLS = (100, 250)
OUT_OF_VIEW = (-1.0, -1.0)

POSE_FIELDS = ("c", "d", "e", "f")


def _columns() -> list[str]:
    cols = ["t"]
    cols += [f"a{i}" for i in range(6)]
    cols += [f"b{i}" for i in range(6)]
    for name in POSE_FIELDS:
        cols += [f"{name}{i}{j}" for i in range(4) for j in range(4)]
    for cam in range(1, N_CAMERAS + 1):
        cols += [f"g{cam}u", f"g{cam}v"]
    cols += ["hx", "hy", "hz"]
    return cols


CSV_COLUMNS = _columns()


@dataclass(frozen=True)
class Cell:
    """One synchronized timestep of a demonstration."""
    t: int
    a: np.ndarray  # Arm-1 joints (6,)
    b: np.ndarray  # Arm-2 joints (6,)
    c: np.ndarray  # Arm-1 pose at t
    d: np.ndarray  # Arm-2 pose at t
    e: np.ndarray  # Arm-1 pose at t+1
    f: np.ndarray  # Arm-2 pose at t+1
    g: np.ndarray  # (6, 2) target pixel per camera
    h: np.ndarray  # (3,) target point in camera 3

    def to_row(self) -> list[float]:
        row = [self.t]
        row += list(np.asarray(self.a, float).ravel())
        row += list(np.asarray(self.b, float).ravel())
        for name in POSE_FIELDS:
            row += list(np.asarray(getattr(self, name), float).ravel())
        row += list(np.asarray(self.g, float).ravel())
        row += list(np.asarray(self.h, float).ravel())
        return row


@dataclass
class TrialRecord:
    trial_id: str
    cells: list
    frames: dict  # camera id -> list of frame paths, one per cell
    calib: geometry.CalibrationSet
    resolution: tuple  # (width, height)
    fps: float
    path: Optional[Path] = None

    def __len__(self):
        return len(self.cells)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    camera_id: int
    state: np.ndarray  # Arm-1 State7 ++ Arm-2 State7 at t
    target: np.ndarray  # Arm-2 State7 at t+1
    trial_id: str
    t: int
    calib_vec: Optional[np.ndarray] = None

    @property
    def arm2_state(self) -> np.ndarray:
        return self.state[7:14]


@dataclass(frozen=True)
class SequenceSample:
    window: tuple
    target: np.ndarray

    @property
    def trial_id(self) -> str:
        return self.window[-1].trial_id

    @property
    def camera_id(self) -> int:
        return self.window[-1].camera_id

    @property
    def t(self) -> int:
        return self.window[-1].t

    @property
    def last(self) -> Sample:
        return self.window[-1]


@dataclass(frozen=True)
class Split:
    train: tuple
    val: tuple
    test: tuple
    protocol: str
    seed: Optional[int] = None
    camera: Optional[int] = None
    train_trials: tuple = ()
    val_trials: tuple = ()
    test_trials: tuple = ()

    def check_partition(self, n: int) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValidationError("split sets overlap", field="split", rule="disjoint")
        if a | b | c != set(range(n)):
            raise ValidationError("split does not cover the dataset", field="split", rule="cover")

    @property
    def label(self) -> str:
        return f"Camera{self.camera}" if self.protocol == "leave-camera-out" else "random"

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "seed": self.seed, "camera": self.camera,
                "train": list(self.train), "val": list(self.val), "test": list(self.test),
                "train_trials": list(self.train_trials), "val_trials": list(self.val_trials),
                "test_trials": list(self.test_trials)}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(train=tuple(d["train"]), val=tuple(d["val"]), test=tuple(d["test"]),
                   protocol=d["protocol"], seed=d.get("seed"), camera=d.get("camera"),
                   train_trials=tuple(d.get("train_trials", ())), val_trials=tuple(d.get("val_trials", ())),
                   test_trials=tuple(d.get("test_trials", ())))


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def validate_cell(cell: Cell, resolution, trial_id: Optional[str] = None) -> list[Violation]:
    """Every broken Cell invariant as a :class:`Violation`; empty when valid."""
    out = []

    def bad(fld, rule, msg):
        out.append(Violation(field=fld, rule=rule, message=msg, trial_id=trial_id, cell=cell.t))

    for name, size in (("a", 6), ("b", 6), ("h", 3)):
        v = np.asarray(getattr(cell, name), float)
        if v.size != size:
            bad(name, "shape", f"expected {size} values, got {v.size}")
        elif not np.all(np.isfinite(v)):
            bad(name, "finite", "non-finite values")
    for name in POSE_FIELDS:
        for rule, msg in geometry.transform_violations(getattr(cell, name)):
            bad(name, rule, msg)
    g = np.asarray(cell.g, float)
    if g.shape != (N_CAMERAS, 2):
        bad("g", "shape", f"expected (6, 2), got {g.shape}")
    else:
        w, h = resolution
        for cam in range(N_CAMERAS):
            u, v = g[cam]
            if (u, v) == OUT_OF_VIEW:
                continue
            if not (np.isfinite(u) and np.isfinite(v) and 0 <= u < w and 0 <= v < h):
                bad("g", "bounds", f"camera {cam + 1} point ({u:g}, {v:g}) outside {w}x{h} image")
    return out


def _consistency(cells: Sequence[Cell], trial_id) -> list[Violation]:
    out = []
    for k in range(len(cells) - 1):
        cur, nxt = cells[k], cells[k + 1]
        if nxt.t != cur.t + 1:
            out.append(Violation("t", "consecutive", f"timestep {nxt.t} follows {cur.t}", trial_id, nxt.t))
        for now, later, lbl in ((cur.e, nxt.c, "e"), (cur.f, nxt.d, "f")):
            err = float(np.max(np.abs(np.asarray(now) - np.asarray(later))))
            if err > CONSISTENCY_TOL:
                src = "c" if lbl == "e" else "d"
                out.append(Violation(lbl, "next_pose", f"{lbl}(t) differs from {src}(t+1) by {err:.3g}",
                                     trial_id, cur.t))
    return out


def frame_path(root: Path, camera: int, t: int) -> Path:
    return Path(root) / f"cam{camera}" / f"frame_{t:06d}.png"


def _read_cells(path: Path, trial_id: str, violations: list) -> list[Cell]:
    cells = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            violations.append(Violation("cells.csv", "header", "unexpected column header", trial_id))
            return cells
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                violations.append(Violation("cells.csv", "malformed",
                                            f"line {lineno}: {len(row)} columns, expected {len(CSV_COLUMNS)}",
                                            trial_id, lineno - 2))
                continue
            try:
                vals = np.array([float(x) for x in row])
            except ValueError as exc:
                violations.append(Violation("cells.csv", "malformed", f"line {lineno}: {exc}", trial_id, lineno - 2))
                continue
            t = int(vals[0])
            k = 1
            a = vals[k:k + 6]; k += 6
            b = vals[k:k + 6]; k += 6
            poses = []
            for _ in POSE_FIELDS:
                poses.append(vals[k:k + 16].reshape(4, 4)); k += 16
            g = vals[k:k + 12].reshape(6, 2); k += 12
            h = vals[k:k + 3]
            cells.append(Cell(t, a, b, *poses, g, h))
    return cells


def check_trial(path) -> tuple[Optional[TrialRecord], list[Violation]]:
    """Parse a trial directory, collecting violations instead of raising."""
    root = Path(path)
    trial_id = root.name
    violations: list[Violation] = []
    if not root.is_dir():
        return None, [Violation("trial", "missing_file", f"{root} is not a directory", trial_id)]
    for name in ("meta.json", "cells.csv", "calib.json"):
        if not (root / name).is_file():
            violations.append(Violation(name, "missing_file", f"{root / name} not found", trial_id))
    if violations:
        return None, violations
    try:
        meta = json.loads((root / "meta.json").read_text())
        trial_id = str(meta["trial_id"])
        resolution = (int(meta["resolution"][0]), int(meta["resolution"][1]))
        fps = float(meta["fps"])
        cell_count = int(meta["cell_count"])
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        return None, [Violation("meta.json", "malformed", f"bad meta: {exc!r}", trial_id)]
    try:
        calib = geometry.CalibrationSet.from_dict(json.loads((root / "calib.json").read_text()))
    except (ValidationError, ValueError) as exc:
        violations.append(Violation(getattr(exc, "field", None) or "calib.json",
                                    getattr(exc, "rule", None) or "malformed", str(exc), trial_id))
        calib = None

    cells = _read_cells(root / "cells.csv", trial_id, violations)
    if len(cells) != cell_count:
        violations.append(Violation("cells", "length",
                                    f"meta.json declares {cell_count} cells, cells.csv has {len(cells)}", trial_id))
    lo, hi = PLAUSIBLE_CELLS
    if not lo <= len(cells) <= hi:
        log.warning("trial %s has %d cells, outside the usual %d-%d range", trial_id, len(cells), lo, hi)
    for cell in cells:
        violations.extend(validate_cell(cell, resolution, trial_id))
    violations.extend(_consistency(cells, trial_id))

    frames = {}
    for cam in range(1, N_CAMERAS + 1):
        paths = [frame_path(root, cam, cell.t) for cell in cells]
        for cell, p in zip(cells, paths):
            if not p.is_file():
                violations.append(Violation(f"cam{cam}", "sync",
                                            f"camera {cam} has no frame for timestep {cell.t}", trial_id, cell.t))
        frames[cam] = paths
    if violations or calib is None:
        return None, violations
    return TrialRecord(trial_id, cells, frames, calib, resolution, fps, root), []


def parse_trial(path) -> TrialRecord:
    """Load and fully validate one trial; raises :class:`TrialValidationError`."""
    record, violations = check_trial(path)
    if violations:
        raise TrialValidationError(violations)
    return record


def list_trials(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())


def load_dataset(root) -> list[TrialRecord]:
    return [parse_trial(p) for p in list_trials(root)]


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_trial(root, trial_id: str, cells: Sequence[Cell], calib: geometry.CalibrationSet,
                resolution, fps: float, frames: Optional[dict] = None) -> Path:
    """Write a trial in the canonical layout. ``frames`` maps camera -> list of uint8 HxWx3 arrays."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"trial_id": trial_id, "resolution": [int(resolution[0]), int(resolution[1])],
            "fps": fps, "cell_count": len(cells)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    calib_d = {k: [float(x) for x in v] for k, v in calib.to_dict().items()}
    (root / "calib.json").write_text(json.dumps(calib_d, indent=2, sort_keys=True) + "\n")
    with open(root / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for cell in cells:
            row = cell.to_row()
            w.writerow([str(int(row[0]))] + [_fmt(x) for x in row[1:]])
    if frames:
        for cam, imgs in frames.items():
            cam_dir = root / f"cam{cam}"
            cam_dir.mkdir(exist_ok=True)
            for cell, img in zip(cells, imgs):
                Image.fromarray(np.asarray(img, dtype=np.uint8)).save(frame_path(root, cam, cell.t), optimize=False)
    return root


# --------------------------------------------------------------------------
# Samples
# --------------------------------------------------------------------------

def preprocess_image(img, image_size) -> np.ndarray:
    """Center-crop to a square, resize to ``image_size = (H, W)``, scale to [0, 1]."""
    if not isinstance(img, Image.Image):
        img = Image.fromarray(np.asarray(img, dtype=np.uint8))
    img = img.convert("RGB")
    w, h = img.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    img = img.crop((left, top, left + s, top + s))
    H, W = image_size
    if (W, H) != (s, s):
        img = img.resize((W, H), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def make_samples(trial: TrialRecord, image_size=(64, 64), with_calib: bool = False,
                 cameras: Iterable[int] = range(1, N_CAMERAS + 1)) -> list[Sample]:
    """One sample per (camera, cell), ordered by camera then timestep."""
    states = []
    targets = []
    for cell in trial.cells:
        states.append(np.concatenate([geometry.pose_to_state7(cell.c), geometry.pose_to_state7(cell.d)]))
        targets.append(geometry.pose_to_state7(cell.f))
    out = []
    for cam in cameras:
        calib_vec = geometry.pose_to_state7(trial.calib.camera_in_arm2(cam)) if with_calib else None
        for k, cell in enumerate(trial.cells):
            with Image.open(trial.frames[cam][k]) as im:
                image = preprocess_image(im, image_size)
            out.append(Sample(image=image, camera_id=cam, state=states[k], target=targets[k],
                              trial_id=trial.trial_id, t=cell.t, calib_vec=calib_vec))
    return out


def window_samples(samples: Sequence[Sample], L: int) -> list[SequenceSample]:
    """Sliding windows of ``L`` consecutive timesteps within each (trial, camera) stream."""
    if L < 1:
        raise ValidationError(f"window length must be >= 1, got {L}", field="L", rule="positive")
    streams: dict = {}
    for s in samples:
        streams.setdefault((s.trial_id, s.camera_id), []).append(s)
    out = []
    for key in streams:
        stream = sorted(streams[key], key=lambda s: s.t)
        # break the stream at any gap in t
        runs, run = [], [stream[0]]
        for s in stream[1:]:
            if s.t == run[-1].t + 1:
                run.append(s)
            else:
                runs.append(run)
                run = [s]
        runs.append(run)
        for run in runs:
            for i in range(len(run) - L + 1):
                win = tuple(run[i:i + L])
                out.append(SequenceSample(window=win, target=win[-1].target))
    if not out and samples:
        log.warning("window length %d exceeds every stream; no windows produced", L)
    return out


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _trial_ids(samples) -> list[str]:
    return [s if isinstance(s, str) else s.trial_id for s in samples]


def split_random(samples, seed: int, test_frac: float = 0.2, val_frac: float = 0.2) -> Split:
    """Trial-granular random split.

    ``round(test_frac * n_trials)`` trials go to test, then
    ``round(val_frac * remaining)`` to validation; every sample follows its
    trial. ``samples`` may be Samples or plain per-sample trial ids.
    """
    ids = _trial_ids(samples)
    if not ids:
        raise ValidationError("cannot split an empty dataset", field="samples", rule="nonempty")
    trials = sorted(set(ids))
    if len(trials) < 3:
        raise ValidationError(f"need at least 3 trials to split, got {len(trials)}", field="samples", rule="count")
    rng = np.random.default_rng(seed)
    order = [trials[i] for i in rng.permutation(len(trials))]
    n_test = _round_half_up(test_frac * len(trials))
    n_val = _round_half_up(val_frac * (len(trials) - n_test))
    test_t = set(order[:n_test])
    val_t = set(order[n_test:n_test + n_val])
    train, val, test = [], [], []
    for i, tid in enumerate(ids):
        (test if tid in test_t else val if tid in val_t else train).append(i)
    return Split(tuple(train), tuple(val), tuple(test), "random", seed,
                 train_trials=tuple(sorted(set(trials) - test_t - val_t)),
                 val_trials=tuple(sorted(val_t)), test_trials=tuple(sorted(test_t)))


def split_leave_camera_out(samples: Sequence[Sample], cam: int, seed: int = 0, val_frac: float = 0.2) -> Split:
    """All samples of camera ``cam`` form the test set; 20% of trials (other cameras) validate."""
    if cam not in range(1, N_CAMERAS + 1):
        raise ValidationError(f"camera must be in 1..6, got {cam}", field="cam", rule="range")
    if not samples:
        raise ValidationError("cannot split an empty dataset", field="samples", rule="nonempty")
    trials = sorted({s.trial_id for s in samples})
    rng = np.random.default_rng(seed)
    order = [trials[i] for i in rng.permutation(len(trials))]
    val_t = set(order[:_round_half_up(val_frac * len(trials))])
    train, val, test = [], [], []
    for i, s in enumerate(samples):
        if s.camera_id == cam:
            test.append(i)
        elif s.trial_id in val_t:
            val.append(i)
        else:
            train.append(i)
    return Split(tuple(train), tuple(val), tuple(test), "leave-camera-out", seed, camera=cam,
                 train_trials=tuple(sorted(set(trials) - val_t)), val_trials=tuple(sorted(val_t)),
                 test_trials=tuple(trials))

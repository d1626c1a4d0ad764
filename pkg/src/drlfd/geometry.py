"""Rigid-body transforms, unit quaternions and the quaternion distance.

Conventions
-----------
- Transforms are 4x4 homogeneous numpy arrays ``T = [[R, p], [0, 1]]``.
  ``a_T_b`` maps coordinates expressed in frame ``b`` into frame ``a``.
- Quaternions are scalar-first ``(q0, q1, q2, q3)`` and kept in the
  canonical hemisphere (``q0 >= 0``; ties broken by the first nonzero
  component being positive).
- A State7 is ``[q0, q1, q2, q3, px, py, pz]`` with positions in meters.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from drlfd.validation import ValidationError

ORTHO_TOL = 1e-9
QUAT_TOL = 1e-6

IDENTITY = np.eye(4)
IDENTITY.setflags(write=False)


def check_rotation(R, tol: float = ORTHO_TOL, name: str = "R") -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValidationError(f"{name}: expected shape (3, 3), got {R.shape}", field=name, rule="shape")
    if not np.all(np.isfinite(R)):
        raise ValidationError(f"{name}: non-finite entries", field=name, rule="finite")
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        raise ValidationError(
            f"{name}: R^T R deviates from identity by {err:.3g} (tol {tol:g})",
            field=name, rule="orthonormal")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ValidationError(f"{name}: det(R) = {det:.6g}, expected +1", field=name, rule="det")
    return R


def transform_violations(T, tol: float = ORTHO_TOL) -> list[tuple[str, str]]:
    """Return ``(rule, message)`` pairs for every violated Transform invariant."""
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        return [("shape", f"expected shape (4, 4), got {T.shape}")]
    if not np.all(np.isfinite(T)):
        return [("finite", "non-finite entries")]
    out = []
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        out.append(("bottom_row", f"bottom row is {T[3].tolist()}, expected [0, 0, 0, 1]"))
    R = T[:3, :3]
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        out.append(("orthonormal", f"R^T R deviates from identity by {err:.3g}"))
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        out.append(("det", f"det(R) = {det:.6g}, expected +1"))
    return out


def check_transform(T, tol: float = ORTHO_TOL, name: str = "T") -> np.ndarray:
    T = np.asarray(T, dtype=float)
    problems = transform_violations(T, tol)
    if problems:
        rule, msg = problems[0]
        raise ValidationError(f"{name}: {msg}", field=name, rule=rule)
    return T


def make_transform(R=None, p=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if p is not None:
        T[:3, 3] = p
    return T


def _reorthonormalize(T: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(T[:3, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    T = T.copy()
    T[:3, :3] = R
    return T


def compose(t1, t2) -> np.ndarray:
    """Matrix product ``t1 @ t2`` of two validated transforms."""
    t1 = check_transform(t1, name="t1")
    t2 = check_transform(t2, name="t2")
    out = t1 @ t2
    out[3] = (0.0, 0.0, 0.0, 1.0)
    R = out[:3, :3]
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
        out = _reorthonormalize(out)
    return out


def invert(t) -> np.ndarray:
    t = check_transform(t)
    R = t[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t[:3, 3]
    return out


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def canonicalize(q) -> np.ndarray:
    """Flip ``q`` into the canonical hemisphere. Works on (..., 4) arrays."""
    q = np.array(q, dtype=float)
    flat = q.reshape(-1, 4)
    for row in flat:
        nz = np.flatnonzero(row)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return flat.reshape(q.shape)


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValidationError("zero-norm quaternion", field="q", rule="norm")
    return q / n


def check_quat(q, tol: float = QUAT_TOL, name: str = "q") -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise ValidationError(f"{name}: last axis must have length 4", field=name, rule="shape")
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValidationError(f"{name}: quaternion norm deviates from 1", field=name, rule="norm")
    return q


def quat_from_rotmat(R) -> np.ndarray:
    """Rotation matrix to canonical unit quaternion (largest-pivot branch)."""
    R = check_rotation(R, tol=1e-6)
    tr = np.trace(R)
    # pick the numerically largest of 4*q_i^2 as the pivot
    pivots = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(pivots))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    q = np.asarray(q)
    return canonicalize(q / np.linalg.norm(q))


def rotmat_from_quat(q) -> np.ndarray:
    q = check_quat(q)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _as_unit(q, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1:] != (4,):
        raise ValidationError(f"{name}: last axis must have length 4", field=name, rule="shape")
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValidationError(f"{name}: zero-norm quaternion", field=name, rule="norm")
    return q / n


_PAIRS_I = np.array([0, 0, 0, 1, 1, 2])
_PAIRS_J = np.array([1, 2, 3, 2, 3, 3])


def quat_distance(q, qhat):
    """Orientation distance ``1 - <q, qhat>^2`` in [0, 1].

    Evaluated through Lagrange's identity,
    ``|q|^2 |p|^2 - <q, p>^2 = sum_{i<j} (q_i p_j - q_j p_i)^2``,
    so that ``d(q, q) = d(q, -q) = 0`` and ``d(a, b) = d(b, a)`` hold
    bit-exactly. Broadcasts over leading axes.
    """
    q = _as_unit(q, "q")
    qhat = _as_unit(qhat, "qhat")
    cross = (q[..., _PAIRS_I] * qhat[..., _PAIRS_J]) - (q[..., _PAIRS_J] * qhat[..., _PAIRS_I])
    return np.clip(np.sum(cross * cross, axis=-1), 0.0, 1.0)


def quat_angle_deg(q, qhat):
    """Rotation angle between two orientations, in degrees."""
    q = _as_unit(q, "q")
    qhat = _as_unit(qhat, "qhat")
    dot = np.abs(np.sum(q * qhat, axis=-1))
    return np.degrees(2.0 * np.arccos(np.minimum(1.0, dot)))


def sequence_orientation_error(truth: Sequence, pred: Sequence) -> float:
    """Mean per-step quaternion distance over a sequence."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.ndim != 2 or pred.ndim != 2:
        raise ValidationError("expected (T, 4) quaternion sequences", field="q", rule="shape")
    if len(truth) != len(pred):
        raise ValidationError(f"length mismatch: {len(truth)} vs {len(pred)}", field="q", rule="length")
    if len(truth) == 0:
        raise ValidationError("empty sequence", field="q", rule="length")
    return float(np.mean(quat_distance(truth, pred)))


def pose_to_state7(t) -> np.ndarray:
    t = check_transform(t)
    return np.concatenate([quat_from_rotmat(t[:3, :3]), t[:3, 3]])


def state7_to_pose(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape != (7,):
        raise ValidationError(f"State7 must have shape (7,), got {s.shape}", field="state", rule="shape")
    return make_transform(rotmat_from_quat(s[:4]), s[4:])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return rotmat_from_quat(q / np.linalg.norm(q))


def random_transform(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return make_transform(random_rotation(rng), rng.uniform(-scale, scale, 3))


class CalibrationSet:
    """Camera extrinsics of the three stereo pairs.

    ``a1_T_l[i]`` / ``a2_T_l[i]`` give the left camera of pair ``i + 1`` in the
    Arm-1 / Arm-2 base frame; ``l_T_r[i]`` the right camera in the left one.
    Cameras are numbered 1..6 as (L1, R1, L2, R2, L3, R3).
    """

    def __init__(self, a1_T_l, a2_T_l, l_T_r):
        self.a1_T_l = tuple(check_transform(t, name=f"a1_T_l{i + 1}") for i, t in enumerate(a1_T_l))
        self.a2_T_l = tuple(check_transform(t, name=f"a2_T_l{i + 1}") for i, t in enumerate(a2_T_l))
        self.l_T_r = tuple(check_transform(t, name=f"l_T_r{i + 1}") for i, t in enumerate(l_T_r))
        for name, group in (("a1_T_l", self.a1_T_l), ("a2_T_l", self.a2_T_l), ("l_T_r", self.l_T_r)):
            if len(group) != 3:
                raise ValidationError(f"{name}: expected 3 transforms, got {len(group)}", field=name, rule="length")

    def _pair_index(self, pair: int) -> int:
        if pair not in (1, 2, 3):
            raise ValidationError(f"stereo pair must be 1, 2 or 3, got {pair}", field="pair", rule="range")
        return pair - 1

    def camera_in_arm2(self, camera_id: int) -> np.ndarray:
        """Pose of camera ``camera_id`` (1..6) in the Arm-2 base frame."""
        if camera_id not in range(1, 7):
            raise ValidationError(f"camera id must be in 1..6, got {camera_id}", field="camera_id", rule="range")
        i = (camera_id - 1) // 2
        if camera_id % 2 == 1:
            return self.a2_T_l[i]
        return compose(self.a2_T_l[i], self.l_T_r[i])

    def to_dict(self) -> dict:
        out = {}
        for i in range(3):
            out[f"a1_T_l{i + 1}"] = self.a1_T_l[i].reshape(-1).tolist()
            out[f"a2_T_l{i + 1}"] = self.a2_T_l[i].reshape(-1).tolist()
            out[f"l_T_r{i + 1}"] = self.l_T_r[i].reshape(-1).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationSet":
        def get(key):
            if key not in d:
                raise ValidationError(f"calibration entry {key} missing", field=key, rule="missing")
            vals = np.asarray(d[key], dtype=float)
            if vals.size != 16:
                raise ValidationError(f"{key}: expected 16 values, got {vals.size}", field=key, rule="length")
            return vals.reshape(4, 4)

        return cls([get(f"a1_T_l{i}") for i in (1, 2, 3)],
                   [get(f"a2_T_l{i}") for i in (1, 2, 3)],
                   [get(f"l_T_r{i}") for i in (1, 2, 3)])


def eye_to_hand_right(calib: CalibrationSet, pair: int) -> np.ndarray:
    """Right camera of ``pair`` in the Arm-1 base frame: ``a1_T_l @ l_T_r``."""
    i = calib._pair_index(pair)
    return compose(calib.a1_T_l[i], calib.l_T_r[i])

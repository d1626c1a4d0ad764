"""Synthetic needle-insertion demonstrations in the canonical trial layout.

The world frame is the undeformed tissue frame (z up). Arm 1 sweeps a
circular needle of fixed radius through a fixed arc. The sweep speed follows
a smooth random profile within each trial and the number of cells per trial
is random, so the next step depends on the current velocity. The needle drags
the tissue along its travel direction by ``stiffness * depth``, with depth a
smoothstep of insertion progress. Arm 2 holds the tissue and cancels that
drift at the desired exit point, so the tracked marker stays on target.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from drlfd import geometry as geo
from drlfd.dataset import N_CAMERAS, OUT_OF_VIEW, Cell, TrialRecord, frame_path, write_trial
from drlfd.validation import ValidationError

TISSUE_HALF = (0.03, 0.02)  # meters, x and y half extents
ARC_HALF_ANGLE = 1.0  # radians; half the angle the needle spends inside tissue
SWEEP = (-ARC_HALF_ANGLE - 0.35, ARC_HALF_ANGLE + 0.25)
DECAY_LENGTH = 0.02  # meters, tissue deformation falloff
NEAR_PLANE = 1e-3
FOCAL_SCALE = 1.6  # focal length in pixels per pixel of image width

WORLD_T_A1 = geo.make_transform(geo.rot_z(0.3), (-0.12, -0.05, 0.08))
WORLD_T_A2 = geo.make_transform(geo.rot_z(-0.5), (0.12, 0.06, 0.08))
LEFT_T_RIGHT = geo.make_transform(None, (0.01, 0.0, 0.0))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera pose (x right, y down, z forward) at ``eye`` aimed at ``target``."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return geo.make_transform(np.column_stack([x, y, z]), eye)


def default_camera_poses() -> tuple:
    """Three stereo pairs around the tissue, ordered (L1, R1, L2, R2, L3, R3)."""
    poses = []
    for az in np.radians([-120.0, -90.0, -60.0]):
        elev = np.radians(55.0)
        eye = 0.15 * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        left = look_at(eye, (0.0, 0.0, 0.0))
        poses += [left, left @ LEFT_T_RIGHT]
    return tuple(poses)


@dataclass
class SynthConfig:
    n_trials: int = 10
    cells_per_trial: tuple = (140, 200)
    image_size: tuple = (64, 64)  # (H, W)
    needle_radius: float = 0.012
    stiffness: float = 0.4
    camera_poses: tuple = field(default_factory=default_camera_poses)
    marker_color: tuple = (255, 0, 0)
    fps: float = 25.0
    seed: int = 0

    def validate(self) -> "SynthConfig":
        lo, hi = self.cells_per_trial
        if not (50 <= lo <= hi <= 400):
            raise ValidationError(f"cells_per_trial {self.cells_per_trial} must satisfy 50 <= lo <= hi <= 400",
                                  field="cells_per_trial", rule="range")
        if self.stiffness < 0:
            raise ValidationError("stiffness must be >= 0", field="stiffness", rule="range")
        if self.n_trials < 0:
            raise ValidationError("n_trials must be >= 0", field="n_trials", rule="range")
        if self.needle_radius <= 0:
            raise ValidationError("needle_radius must be positive", field="needle_radius", rule="range")
        if len(self.camera_poses) != N_CAMERAS:
            raise ValidationError(f"need {N_CAMERAS} camera poses", field="camera_poses", rule="length")
        for i, T in enumerate(self.camera_poses):
            geo.check_transform(T, name=f"camera{i + 1}")
        return self

    @property
    def resolution(self) -> tuple:
        H, W = self.image_size
        return (W, H)

    def focal(self) -> float:
        return FOCAL_SCALE * self.image_size[1]


@dataclass
class SynthScene:
    heights: np.ndarray  # tissue height field on a regular grid over the tissue rectangle
    exit_point: np.ndarray
    direction: np.ndarray  # needle travel direction in the tissue plane
    entry_point: np.ndarray
    center: np.ndarray  # needle circle center
    radius: float
    thetas: np.ndarray  # needle angle per step, length n + 1
    drift: np.ndarray  # tissue drift magnitude per step, length n + 1
    arm1: list  # world poses, length n + 1
    arm2: list
    grasp_point: np.ndarray  # initial Arm-2 grasp point
    marker_color: tuple = (255, 0, 0)

    @property
    def n_cells(self) -> int:
        return len(self.thetas) - 1

    def height_at(self, x: float, y: float) -> float:
        gy, gx = self.heights.shape
        u = (x + TISSUE_HALF[0]) / (2 * TISSUE_HALF[0]) * (gx - 1)
        v = (y + TISSUE_HALF[1]) / (2 * TISSUE_HALF[1]) * (gy - 1)
        u = float(np.clip(u, 0, gx - 1))
        v = float(np.clip(v, 0, gy - 1))
        i0, j0 = min(int(v), gy - 2), min(int(u), gx - 2)
        fv, fu = v - i0, u - j0
        H = self.heights
        return float((1 - fv) * ((1 - fu) * H[i0, j0] + fu * H[i0, j0 + 1])
                     + fv * ((1 - fu) * H[i0 + 1, j0] + fu * H[i0 + 1, j0 + 1]))

    def tissue_offset(self, point, t: int) -> np.ndarray:
        """Net displacement of a tissue point: needle drag minus Arm-2 correction."""
        w = np.exp(-np.linalg.norm(np.asarray(point) - self.entry_point) / DECAY_LENGTH)
        w_exit = np.exp(-np.linalg.norm(self.exit_point - self.entry_point) / DECAY_LENGTH)
        return self.drift[t] * (w - w_exit) * self.direction


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _sweep_angles(rng, n: int) -> np.ndarray:
    # speed 1 + A sin(...) with A < 1 keeps the sweep strictly monotone
    amp, cycles, phase = rng.uniform(0.3, 0.6), rng.uniform(1.0, 2.0), rng.uniform(0.0, 2 * np.pi)
    speed = 1.0 + amp * np.sin(2 * np.pi * cycles * (np.arange(n) + 0.5) / n + phase)
    progress = np.concatenate([[0.0], np.cumsum(speed)]) / speed.sum()
    return SWEEP[0] + (SWEEP[1] - SWEEP[0]) * progress


def make_scene(cfg: SynthConfig, trial_index: int) -> SynthScene:
    rng = np.random.default_rng([cfg.seed, trial_index])
    lo, hi = cfg.cells_per_trial
    n = int(rng.integers(lo, hi + 1))
    heights = rng.normal(0.0, 4e-4, size=(5, 7))
    scene = SynthScene(heights=heights, exit_point=np.zeros(3), direction=np.zeros(3),
                       entry_point=np.zeros(3), center=np.zeros(3), radius=cfg.needle_radius,
                       thetas=np.zeros(n + 1), drift=np.zeros(n + 1), arm1=[], arm2=[],
                       grasp_point=np.zeros(3), marker_color=tuple(cfg.marker_color))
    xe, ye = rng.uniform(-0.012, 0.012), rng.uniform(-0.008, 0.008)
    exit_point = np.array([xe, ye, scene.height_at(xe, ye)])
    yaw = rng.uniform(-0.4, 0.4)
    direction = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    r, a = cfg.needle_radius, ARC_HALF_ANGLE
    center = exit_point - direction * r * np.sin(a) + np.array([0.0, 0.0, r * np.cos(a)])
    entry = exit_point - direction * 2 * r * np.sin(a)

    side = rng.choice([-1.0, 1.0])
    normal = np.array([-direction[1], direction[0], 0.0])
    g = exit_point + side * normal * rng.uniform(0.010, 0.016) + direction * rng.uniform(-0.004, 0.004)
    grasp = np.array([g[0], g[1], scene.height_at(g[0], g[1])])
    grasp_yaw = rng.uniform(-0.8, 0.8)

    thetas = _sweep_angles(rng, n)
    depth = _smoothstep((thetas + a) / (2 * a)) * (2 * r * a)
    drift = cfg.stiffness * depth
    w_exit = np.exp(-np.linalg.norm(exit_point - entry) / DECAY_LENGTH)

    Rz = geo.rot_z(yaw)
    arm1, arm2 = [], []
    for th, dr in zip(thetas, drift):
        Rn = Rz @ geo.rot_y(-th)
        pos1 = center + Rn @ np.array([0.0, 0.0, r])
        arm1.append(geo.make_transform(Rn @ geo.rot_x(0.6), pos1))
        pos2 = grasp - dr * w_exit * direction
        R2 = geo.rot_z(grasp_yaw + 15.0 * dr) @ geo.rot_x(0.5)
        arm2.append(geo.make_transform(R2, pos2))

    scene.exit_point = exit_point
    scene.direction = direction
    scene.entry_point = entry
    scene.center = center
    scene.thetas = thetas
    scene.drift = drift
    scene.arm1 = arm1
    scene.arm2 = arm2
    scene.grasp_point = grasp
    return scene


def intrinsics(image_size, focal: Optional[float] = None) -> tuple:
    H, W = image_size
    f = FOCAL_SCALE * W if focal is None else focal
    return f, (W - 1) / 2.0, (H - 1) / 2.0


def project(world_T_cam, point, image_size, focal: Optional[float] = None):
    """Pinhole projection; ``None`` when the point is behind the camera."""
    f, cx, cy = intrinsics(image_size, focal)
    T = geo.invert(world_T_cam)
    pc = T[:3, :3] @ np.asarray(point, float) + T[:3, 3]
    if pc[2] <= NEAR_PLANE:
        return None
    return np.array([f * pc[0] / pc[2] + cx, f * pc[1] / pc[2] + cy])


def _in_image(uv, image_size) -> bool:
    H, W = image_size
    return uv is not None and 0 <= uv[0] < W and 0 <= uv[1] < H


def render_frame(scene: SynthScene, camera, t: int, image_size):
    """Flat-shaded view of step ``t``; returns ``(uint8 image, marker (u, v))``.

    The marker is ``(-1, -1)`` when the exit point is behind the camera or
    outside the image.
    """
    if not 0 <= t <= scene.n_cells:
        raise ValidationError(f"t={t} outside trajectory of {scene.n_cells} cells", field="t", rule="range")
    H, W = image_size
    img = Image.new("RGB", (W, H), (40, 40, 48))
    draw = ImageDraw.Draw(img)
    hx, hy = TISSUE_HALF

    corners = []
    for x, y in ((-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)):
        p = np.array([x, y, scene.height_at(x, y)])
        corners.append(project(camera, p + scene.tissue_offset(p, t), image_size))
    if all(c is not None for c in corners):
        draw.polygon([tuple(c) for c in corners], fill=(225, 170, 160))

    # needle: semicircle from the held tail to the tip
    th = scene.thetas[t]
    Rz = geo.rot_z(np.arctan2(scene.direction[1], scene.direction[0]))
    pts = []
    for ang in np.linspace(th - np.pi, th, 16):
        p = scene.center + Rz @ geo.rot_y(-ang) @ np.array([0.0, 0.0, -scene.radius])
        uv = project(camera, p, image_size)
        if uv is not None:
            pts.append(tuple(uv))
    if len(pts) > 1:
        draw.line(pts, fill=(90, 90, 100), width=1)

    dot = max(1.0, W / 64.0)
    for pose in (scene.arm1[t], scene.arm2[t]):
        uv = project(camera, pose[:3, 3], image_size)
        if uv is not None:
            draw.ellipse([uv[0] - dot, uv[1] - dot, uv[0] + dot, uv[1] + dot], fill=(40, 200, 60))

    marker = project(camera, scene.exit_point, image_size)
    if _in_image(marker, image_size):
        u, v = int(round(marker[0])), int(round(marker[1]))
        s = max(2, W // 32)
        draw.line([(u - s, v - s), (u + s, v + s)], fill=tuple(scene.marker_color), width=1)
        draw.line([(u - s, v + s), (u + s, v - s)], fill=tuple(scene.marker_color), width=1)
        uv = (float(marker[0]), float(marker[1]))
    else:
        uv = OUT_OF_VIEW
    return np.asarray(img, dtype=np.uint8), uv


def calibration(cfg: SynthConfig) -> geo.CalibrationSet:
    a1_T_world = geo.invert(WORLD_T_A1)
    a2_T_world = geo.invert(WORLD_T_A2)
    lefts = cfg.camera_poses[0::2]
    rights = cfg.camera_poses[1::2]
    return geo.CalibrationSet(
        [a1_T_world @ L for L in lefts],
        [a2_T_world @ L for L in lefts],
        [geo.invert(L) @ R for L, R in zip(lefts, rights)],
    )


def _joints(pose_in_base, extra: float) -> np.ndarray:
    # stand-in joint vector: a smooth injective function of the pose
    q = geo.pose_to_state7(pose_in_base)
    return np.array([extra, q[1], q[2], q[3], *(10.0 * pose_in_base[:3, 3])])[:6]


def gen_trial(cfg: SynthConfig, trial_index: int, out_root=None):
    """Build trial ``trial_index``; writes it under ``out_root`` when given.

    Returns ``(cells, frames, scene)`` in memory, or the written ``Path``.
    """
    cfg.validate()
    scene = make_scene(cfg, trial_index)
    n = scene.n_cells
    a1_T_w = geo.invert(WORLD_T_A1)
    a2_T_w = geo.invert(WORLD_T_A2)
    arm1 = [a1_T_w @ T for T in scene.arm1]
    arm2 = [a2_T_w @ T for T in scene.arm2]
    cam3_T_w = geo.invert(cfg.camera_poses[2])
    h = cam3_T_w[:3, :3] @ scene.exit_point + cam3_T_w[:3, 3]
    frames = {cam: [] for cam in range(1, N_CAMERAS + 1)}
    cells = []
    for t in range(n):
        g = np.zeros((N_CAMERAS, 2))
        for cam in range(1, N_CAMERAS + 1):
            img, uv = render_frame(scene, cfg.camera_poses[cam - 1], t, cfg.image_size)
            frames[cam].append(img)
            g[cam - 1] = uv
        cells.append(Cell(t=t, a=_joints(arm1[t], scene.thetas[t]), b=_joints(arm2[t], scene.drift[t]),
                          c=arm1[t], d=arm2[t], e=arm1[t + 1], f=arm2[t + 1], g=g, h=h.copy()))
    if out_root is None:
        return cells, frames, scene
    trial_id = f"trial_{trial_index:03d}"
    return write_trial(Path(out_root) / trial_id, trial_id, cells, calibration(cfg),
                       cfg.resolution, cfg.fps, frames)


def trial_checksum(path) -> str:
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def gen_dataset(cfg: SynthConfig, out_path) -> dict:
    """Write ``cfg.n_trials`` trials plus ``summary.json`` under ``out_path``."""
    cfg.validate()
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    trials = []
    for i in range(cfg.n_trials):
        try:
            path = gen_trial(cfg, i, out)
        except OSError as exc:
            raise OSError(f"failed writing trial {i} under {out}: {exc}") from exc
        n = json.loads((path / "meta.json").read_text())["cell_count"]
        trials.append({"trial_id": path.name, "cells": n, "frames": n * N_CAMERAS,
                       "checksum": trial_checksum(path)})
    summary = {"n_trials": cfg.n_trials, "seed": cfg.seed, "image_size": list(cfg.image_size),
               "stiffness": cfg.stiffness, "total_cells": sum(t["cells"] for t in trials),
               "total_frames": sum(t["frames"] for t in trials), "trials": trials}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary

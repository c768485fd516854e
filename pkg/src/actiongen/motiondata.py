"""Two-person motion clips: synthesis, rotation augmentation, preprocessing, IO.

The synthetic dataset stands in for captured motion. Captions come from a
small templated grammar over two actors and eight verbs; clips are
procedurally animated 14-joint skeletons at 120 fps whose motion matches
the verb (approaching actually closes the gap, waving oscillates a hand,
and so on). Each caption is paired with several distinct clips so the
caption-to-action relation is genuinely one-to-many.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import DTYPE

JOINTS = (
    "head", "neck",
    "l_shoulder", "l_elbow", "l_hand", "l_thigh", "l_shin", "l_foot",
    "r_shoulder", "r_elbow", "r_hand", "r_thigh", "r_shin", "r_foot",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}
N_JOINTS = 14
POSE_WIDTH = 3 * N_JOINTS          # 42
FRAME_WIDTH = 2 * POSE_WIDTH + 3   # 87
VERTICAL_AXIS = 1                  # y is up; rotation augmentation spins about it

CAPTURE_FPS = 120
TARGET_FPS = 3
MAX_FRAMES = 26


class DatasetError(ValueError):
    """A dataset file or record violates the schema."""


class DegenerateFeatureWarning(UserWarning):
    """A feature had (near) zero variance and its scale was clamped to 1."""


@dataclass
class ActionClip:
    """Aligned pose sequences for the two actors of one performance."""

    person_a: np.ndarray  # (m, 14, 3)
    person_b: np.ndarray  # (m, 14, 3)
    fps: int

    def __post_init__(self):
        self.person_a = np.asarray(self.person_a, dtype=DTYPE)
        self.person_b = np.asarray(self.person_b, dtype=DTYPE)
        for name, seq in (("person_a", self.person_a), ("person_b", self.person_b)):
            if seq.ndim != 3 or seq.shape[1:] != (N_JOINTS, 3):
                raise DatasetError(f"{name}: expected (m, {N_JOINTS}, 3), got {seq.shape}")
            if not np.isfinite(seq).all():
                raise DatasetError(f"{name}: non-finite coordinates")
        if len(self.person_a) != len(self.person_b):
            raise DatasetError(
                f"actor sequences differ in length: {len(self.person_a)} vs {len(self.person_b)}"
            )
        if len(self.person_a) == 0:
            raise DatasetError("empty clip")

    def __len__(self) -> int:
        return len(self.person_a)


@dataclass
class RawRecord:
    """One caption with its (possibly many) captured clips."""

    caption: str
    clips: list[ActionClip]


@dataclass
class CenteredAction:
    """Per-actor centered pose streams plus the relative-offset track."""

    pose_a: np.ndarray  # (m, 42)
    pose_b: np.ndarray  # (m, 42)
    dist: np.ndarray    # (m, 3)


@dataclass
class SampleRecord:
    """One caption with its processed 87-wide actions and validity masks."""

    caption: str
    actions: list[np.ndarray]                 # each (m_i, 87)
    masks: list[np.ndarray] = field(default_factory=list)  # each (m_i,) bool
    caption_ids: np.ndarray | None = None

    def __post_init__(self):
        if not self.actions:
            raise DatasetError(f"record {self.caption!r} has no actions")
        self.actions = [np.asarray(a, dtype=DTYPE) for a in self.actions]
        for a in self.actions:
            if a.ndim != 2 or a.shape[1] != FRAME_WIDTH:
                raise DatasetError(f"action must be (m, {FRAME_WIDTH}), got {a.shape}")
        if not self.masks:
            self.masks = [np.ones(len(a), dtype=bool) for a in self.actions]
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        for a, m in zip(self.actions, self.masks):
            if m.shape != (len(a),):
                raise DatasetError(f"mask shape {m.shape} does not match action length {len(a)}")


# ---------------------------------------------------------------------------
# synthetic skeleton animation

_BASE_POSE = np.array(
    [
        [0.00, 1.70, 0.00],   # head
        [0.00, 1.50, 0.00],   # neck
        [0.00, 1.45, 0.20],   # l_shoulder
        [0.02, 1.18, 0.26],   # l_elbow
        [0.04, 0.92, 0.28],   # l_hand
        [0.00, 0.95, 0.10],   # l_thigh
        [0.00, 0.50, 0.12],   # l_shin
        [0.02, 0.06, 0.13],   # l_foot
        [0.00, 1.45, -0.20],  # r_shoulder
        [0.02, 1.18, -0.26],  # r_elbow
        [0.04, 0.92, -0.28],  # r_hand
        [0.00, 0.95, -0.10],  # r_thigh
        [0.00, 0.50, -0.12],  # r_shin
        [0.02, 0.06, -0.13],  # r_foot
    ],
    dtype=DTYPE,
)

_ACTORS = ("A", "B")

# (template, animation kind, base speed m/s)
_CLAUSE_FORMS = (
    ("{x} walks towards {y}", "approach", 1.0),
    ("{x} runs towards {y}", "approach", 2.2),
    ("{x} waves at {y}", "wave", 0.0),
    ("{x} hugs {y}", "hug", 1.0),
    ("{x} bows to {y}", "bow", 0.0),
    ("{x} retreats from {y}", "retreat", 0.8),
    ("{x} approaches {y} slowly", "approach", 0.5),
    ("{x} turns to face {y}", "turn_face", 0.0),
    ("{x} turns away from {y}", "turn_away", 0.0),
)


def _rotate_about_vertical(points: np.ndarray, theta: float) -> np.ndarray:
    """Rotate (..., 3) points about the global vertical axis through the origin."""
    c, s = np.cos(theta), np.sin(theta)
    out = points.copy()
    x, z = points[..., 0], points[..., 2]
    out[..., 0] = c * x + s * z
    out[..., 2] = -s * x + c * z
    return out


def _facing_angle(direction_xz: np.ndarray) -> float:
    return float(np.arctan2(-direction_xz[1], direction_xz[0]))


@dataclass
class _ActorState:
    pos: np.ndarray      # (2,) x, z
    facing: float

    def pose(self, overlay: np.ndarray | None = None) -> np.ndarray:
        pts = _BASE_POSE if overlay is None else _BASE_POSE + overlay
        pts = _rotate_about_vertical(pts, self.facing)
        pts = pts.copy()
        pts[:, 0] += self.pos[0]
        pts[:, 2] += self.pos[1]
        return pts

    def neck_position(self) -> np.ndarray:
        return self.pose()[JOINT_INDEX["neck"]]


def _walk_overlay(t: float, phase: float, freq: float) -> np.ndarray:
    ov = np.zeros((N_JOINTS, 3), dtype=DTYPE)
    swing = np.sin(2.0 * np.pi * freq * t + phase)
    ov[JOINT_INDEX["l_foot"], 1] = 0.06 * max(0.0, swing)
    ov[JOINT_INDEX["r_foot"], 1] = 0.06 * max(0.0, -swing)
    ov[JOINT_INDEX["l_hand"], 0] = 0.08 * swing
    ov[JOINT_INDEX["r_hand"], 0] = -0.08 * swing
    return ov


def _animate_clause(kind, speed, states, actor, n_frames, fps, knobs):
    """Yield (pose_a, pose_b) for each frame of one clause, advancing states."""
    me, other = states[actor], states[1 - actor]
    dt = 1.0 / fps
    if kind in ("turn_face", "turn_away"):
        target = _facing_angle(other.pos - me.pos)
        if kind == "turn_away":
            target += np.pi
        start = me.facing
        delta = (target - start + np.pi) % (2.0 * np.pi) - np.pi
        if abs(delta) < 1e-6:
            delta = np.pi / 2.0  # already aligned: still perform a visible turn
    hug_split = int(round(0.6 * n_frames))

    for f in range(n_frames):
        t = (f + 1) * dt
        tau = (f + 1) / n_frames
        ov_me = np.zeros((N_JOINTS, 3), dtype=DTYPE)

        if kind in ("approach", "retreat") or (kind == "hug" and f < hug_split):
            gap = other.pos - me.pos
            dist = float(np.hypot(gap[0], gap[1]))
            direction = gap / dist
            step = speed * dt
            me.pos = me.pos + (step if kind != "retreat" else -step) * direction
            me.facing = _facing_angle(direction)
            ov_me = _walk_overlay(t, knobs["phase"], 1.4 * max(speed, 0.5))
        elif kind == "wave":
            rise = min(1.0, tau / 0.2)
            ov_me[JOINT_INDEX["r_hand"]] = (
                0.05,
                0.62 * rise,
                0.12 * rise * np.sin(2.0 * np.pi * knobs["wave_hz"] * t + knobs["phase"]),
            )
            ov_me[JOINT_INDEX["r_elbow"], 1] = 0.22 * rise
        elif kind == "bow":
            s = np.sin(np.pi * tau)
            ov_me[JOINT_INDEX["head"]] = (0.30 * s, -0.34 * s, 0.0)
            ov_me[JOINT_INDEX["neck"]] = (0.16 * s, -0.16 * s, 0.0)
        elif kind == "hug":
            # arms reach for the other actor's neck once the approach is done
            reach = (f + 1 - hug_split) / max(1, n_frames - hug_split)
            target_local = _rotate_about_vertical(
                np.concatenate([other.neck_position() - np.array([me.pos[0], 0.0, me.pos[1]])])[None, :],
                -me.facing,
            )[0]
            target_local[1] -= 0.15
            for hand in ("l_hand", "r_hand"):
                ov_me[JOINT_INDEX[hand]] = reach * (target_local - _BASE_POSE[JOINT_INDEX[hand]])
        elif kind in ("turn_face", "turn_away"):
            me.facing = start + delta * tau

        poses = [None, None]
        poses[actor] = me.pose(ov_me)
        poses[1 - actor] = other.pose()
        yield poses[0], poses[1]


def _scenario_clip(clauses, rng: np.random.Generator, fps: int) -> ActionClip:
    durations = rng.uniform(1.6, 4.2, size=len(clauses))
    total_cap = MAX_FRAMES / TARGET_FPS - 0.3
    if durations.sum() > total_cap:
        durations *= total_cap / durations.sum()

    travel = 0.0
    for (actor, kind, speed), dur in zip(clauses, durations):
        if kind == "approach":
            travel += speed * dur
        elif kind == "hug":
            travel += speed * 0.6 * dur
    gap = travel + rng.uniform(0.7, 1.4)
    lateral = rng.uniform(-0.3, 0.3)

    a = _ActorState(pos=np.array([-gap / 2.0, lateral]), facing=0.0)
    b = _ActorState(pos=np.array([gap / 2.0, -lateral]), facing=0.0)
    a.facing = _facing_angle(b.pos - a.pos)
    b.facing = _facing_angle(a.pos - b.pos)
    states = [a, b]

    knobs = {"phase": rng.uniform(0.0, 2.0 * np.pi), "wave_hz": rng.uniform(1.8, 2.8)}
    frames_a, frames_b = [], []
    for (actor, kind, speed), dur in zip(clauses, durations):
        n_frames = max(2, int(round(dur * fps)))
        for pa, pb in _animate_clause(kind, speed, states, actor, n_frames, fps, knobs):
            frames_a.append(pa)
            frames_b.append(pb)
    return ActionClip(person_a=np.array(frames_a), person_b=np.array(frames_b), fps=fps)


def _caption_space() -> list[tuple[str, tuple]]:
    """All grammar captions: the 18 single-clause forms first, compounds after."""
    singles = []
    for form_i, (tpl, kind, speed) in enumerate(_CLAUSE_FORMS):
        for x in (0, 1):
            text = tpl.format(x=_ACTORS[x], y=_ACTORS[1 - x])
            singles.append((text, ((x, kind, speed),)))
    compounds = []
    for i, (t1, sc1) in enumerate(singles):
        for j, (t2, sc2) in enumerate(singles):
            if i == j:
                continue
            compounds.append((f"{t1} and {t2}.", sc1 + sc2))
            compounds.append((f"{t1}, then {t2}.", sc1 + sc2))
    singles = [(f"{t}.", sc) for t, sc in singles]
    return singles, compounds


def synth_dataset(seed: int, n_captions: int, variants_per_caption: int) -> list[RawRecord]:
    """Deterministic synthetic caption-action corpus at capture frame rate."""
    if n_captions < 1:
        raise ValueError("n_captions must be >= 1")
    if variants_per_caption < 1:
        raise ValueError("variants_per_caption must be >= 1")
    rng = np.random.default_rng(seed)
    singles, compounds = _caption_space()
    order = rng.permutation(len(compounds))
    pool = singles + [compounds[i] for i in order]
    if n_captions > len(pool):
        raise ValueError(f"grammar provides only {len(pool)} unique captions, asked for {n_captions}")

    records = []
    for caption, clauses in pool[:n_captions]:
        clips = [_scenario_clip(clauses, rng, CAPTURE_FPS) for _ in range(variants_per_caption)]
        records.append(RawRecord(caption=caption, clips=clips))
    return records


# ---------------------------------------------------------------------------
# augmentation

def rotate_action(clip: ActionClip, theta: float) -> ActionClip:
    """Rotate both actors about the global vertical axis through the origin."""
    if not (0.0 <= theta < 2.0 * np.pi):
        raise ValueError(f"theta must lie in [0, 2*pi), got {theta}")
    return ActionClip(
        person_a=_rotate_about_vertical(clip.person_a, theta),
        person_b=_rotate_about_vertical(clip.person_b, theta),
        fps=clip.fps,
    )


def augment(records: list[RawRecord], n_angles: int = 36, seed: int = 0) -> list[RawRecord]:
    """Replace each caption-action pair with ``n_angles`` rotated copies."""
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        clips = []
        for clip in rec.clips:
            for theta in rng.uniform(0.0, 2.0 * np.pi, size=n_angles):
                clips.append(rotate_action(clip, float(theta)))
        out.append(RawRecord(caption=rec.caption, clips=clips))
    return out


def count_pairs(records: list[RawRecord] | list[SampleRecord]) -> int:
    return sum(len(getattr(r, "clips", None) or r.actions) for r in records)


# ---------------------------------------------------------------------------
# preprocessing

def downsample(
    frames: np.ndarray,
    target_fps: int = TARGET_FPS,
    max_len: int = MAX_FRAMES,
    source_fps: int = CAPTURE_FPS,
) -> np.ndarray:
    """Every (source/target)-th frame from index 0, truncated to max_len."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("downsample: empty input")
    if target_fps <= 0 or source_fps % target_fps != 0:
        raise ValueError(f"target fps {target_fps} must divide source fps {source_fps}")
    stride = source_fps // target_fps
    return frames[::stride][:max_len]


def downsample_clip(clip: ActionClip, target_fps: int = TARGET_FPS, max_len: int = MAX_FRAMES) -> ActionClip:
    return ActionClip(
        person_a=downsample(clip.person_a, target_fps, max_len, clip.fps),
        person_b=downsample(clip.person_b, target_fps, max_len, clip.fps),
        fps=target_fps,
    )


def center_poses(seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the mid-thigh point of each frame; returns (centered, centers)."""
    seq = np.asarray(seq, dtype=DTYPE)
    centers = 0.5 * (seq[:, JOINT_INDEX["l_thigh"], :] + seq[:, JOINT_INDEX["r_thigh"], :])
    return seq - centers[:, None, :], centers


def relative_positions(centers_a: np.ndarray, centers_b: np.ndarray) -> np.ndarray:
    centers_a = np.asarray(centers_a, dtype=DTYPE)
    centers_b = np.asarray(centers_b, dtype=DTYPE)
    if centers_a.shape != centers_b.shape:
        raise ValueError(f"center tracks differ: {centers_a.shape} vs {centers_b.shape}")
    return centers_b - centers_a


def preprocess_clip(clip: ActionClip) -> CenteredAction:
    """Center both actors and keep their relative offset track.

    Expects a clip already at the target frame rate (downsample first).
    """
    ca, centers_a = center_poses(clip.person_a)
    cb, centers_b = center_poses(clip.person_b)
    m = len(clip)
    return CenteredAction(
        pose_a=ca.reshape(m, POSE_WIDTH),
        pose_b=cb.reshape(m, POSE_WIDTH),
        dist=relative_positions(centers_a, centers_b),
    )


@dataclass
class NormalizationStats:
    """Per-feature z-score parameters for the three streams."""

    pose1_mean: np.ndarray
    pose1_std: np.ndarray
    pose2_mean: np.ndarray
    pose2_std: np.ndarray
    dist_mean: np.ndarray
    dist_std: np.ndarray


def _fit_stream(rows: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    bad = std < 1e-8
    if bad.any():
        warnings.warn(
            f"{label}: {int(bad.sum())} feature(s) with (near) zero variance, scale clamped to 1",
            DegenerateFeatureWarning,
            stacklevel=3,
        )
        std = np.where(bad, 1.0, std)
    return mean, std


def zscore_fit(actions: list[CenteredAction]) -> NormalizationStats:
    """Fit per-feature mean/std over all frames of the given (training) actions."""
    if not actions:
        raise ValueError("zscore_fit: no actions")
    p1 = np.concatenate([a.pose_a for a in actions], axis=0)
    p2 = np.concatenate([a.pose_b for a in actions], axis=0)
    d = np.concatenate([a.dist for a in actions], axis=0)
    m1, s1 = _fit_stream(p1, "pose1")
    m2, s2 = _fit_stream(p2, "pose2")
    md, sd = _fit_stream(d, "dist")
    return NormalizationStats(m1, s1, m2, s2, md, sd)


def assemble_frames(pose_a: np.ndarray, pose_b: np.ndarray, dist: np.ndarray) -> np.ndarray:
    pose_a, pose_b, dist = (np.asarray(x, dtype=DTYPE) for x in (pose_a, pose_b, dist))
    if not (len(pose_a) == len(pose_b) == len(dist)):
        raise ValueError(f"stream lengths differ: {len(pose_a)}, {len(pose_b)}, {len(dist)}")
    if pose_a.shape[1] != POSE_WIDTH or pose_b.shape[1] != POSE_WIDTH or dist.shape[1] != 3:
        raise ValueError(
            f"stream widths must be {POSE_WIDTH}/{POSE_WIDTH}/3, got "
            f"{pose_a.shape[1]}/{pose_b.shape[1]}/{dist.shape[1]}"
        )
    return np.concatenate([pose_a, pose_b, dist], axis=1)


def disassemble_frames(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frames = np.asarray(frames, dtype=DTYPE)
    if frames.ndim != 2 or frames.shape[1] != FRAME_WIDTH:
        raise ValueError(f"frames must be (m, {FRAME_WIDTH}), got {frames.shape}")
    return frames[:, :POSE_WIDTH], frames[:, POSE_WIDTH : 2 * POSE_WIDTH], frames[:, 2 * POSE_WIDTH :]


def zscore_apply(action: CenteredAction, stats: NormalizationStats) -> np.ndarray:
    return assemble_frames(
        (action.pose_a - stats.pose1_mean) / stats.pose1_std,
        (action.pose_b - stats.pose2_mean) / stats.pose2_std,
        (action.dist - stats.dist_mean) / stats.dist_std,
    )


def zscore_invert(frames: np.ndarray, stats: NormalizationStats) -> CenteredAction:
    p1, p2, d = disassemble_frames(frames)
    return CenteredAction(
        pose_a=p1 * stats.pose1_std + stats.pose1_mean,
        pose_b=p2 * stats.pose2_std + stats.pose2_mean,
        dist=d * stats.dist_std + stats.dist_mean,
    )


def split_records(records: list, train_frac: float, seed: int) -> tuple[list, list]:
    """Deterministic caption-level split; z-score stats must come from the first part."""
    if not (0.0 < train_frac <= 1.0):
        raise ValueError(f"train_frac must be in (0, 1], got {train_frac}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_train = max(1, int(round(train_frac * len(records))))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return train, val


# ---------------------------------------------------------------------------
# persistence

def save_jsonl(records: list[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "caption": rec.caption,
                "actions": [a.tolist() for a in rec.actions],
                "mask": [m.tolist() for m in rec.masks],
            }
            fh.write(json.dumps(obj))
            fh.write("\n")


def load_jsonl(path, vocab=None) -> list[SampleRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = SampleRecord(
                    caption=obj["caption"],
                    actions=[np.array(a, dtype=DTYPE) for a in obj["actions"]],
                    masks=[np.array(m, dtype=bool) for m in obj["mask"]],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{Path(path)}: line {lineno}: {exc}") from exc
            if vocab is not None:
                rec.caption_ids = vocab.encode_caption(rec.caption).ids
            records.append(rec)
    return records


def save_raw_jsonl(records: list[RawRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "caption": rec.caption,
                "clips": [
                    {"a": c.person_a.tolist(), "b": c.person_b.tolist(), "fps": c.fps}
                    for c in rec.clips
                ],
            }
            fh.write(json.dumps(obj))
            fh.write("\n")


def load_raw_jsonl(path) -> list[RawRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                clips = [
                    ActionClip(person_a=np.array(c["a"]), person_b=np.array(c["b"]), fps=int(c["fps"]))
                    for c in obj["clips"]
                ]
                records.append(RawRecord(caption=obj["caption"], clips=clips))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{Path(path)}: line {lineno}: {exc}") from exc
    return records


def save_stats(stats: NormalizationStats, path) -> None:
    obj = {
        "pose1": {"mean": stats.pose1_mean.tolist(), "std": stats.pose1_std.tolist()},
        "pose2": {"mean": stats.pose2_mean.tolist(), "std": stats.pose2_std.tolist()},
        "dist": {"mean": stats.dist_mean.tolist(), "std": stats.dist_std.tolist()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_stats(path) -> NormalizationStats:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        return NormalizationStats(
            pose1_mean=np.array(obj["pose1"]["mean"], dtype=DTYPE),
            pose1_std=np.array(obj["pose1"]["std"], dtype=DTYPE),
            pose2_mean=np.array(obj["pose2"]["mean"], dtype=DTYPE),
            pose2_std=np.array(obj["pose2"]["std"], dtype=DTYPE),
            dist_mean=np.array(obj["dist"]["mean"], dtype=DTYPE),
            dist_std=np.array(obj["dist"]["std"], dtype=DTYPE),
        )
    except KeyError as exc:
        raise DatasetError(f"{Path(path)}: missing stats key {exc}") from exc

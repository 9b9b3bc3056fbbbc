"""Gesture dataset handling: manifests, rotation augmentation, person folds,
and a synthetic depth-scene generator."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import pnm
from .segmentation import SegmentationParams, resize_mask, segment_full_resolution

log = logging.getLogger(__name__)

ANGLES = (-20, -15, -10, -5, 0, 5, 10, 15, 20)
MANIFEST_HEADER = ["person", "gesture", "repetition", "depth_path"]
N_FOLDS = 4


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    person_id: int
    gesture: int
    repetition: int
    depth_path: Path
    rotation_deg: int = 0

    def __post_init__(self):
        if self.rotation_deg not in ANGLES:
            raise ValueError(f"rotation {self.rotation_deg} not in {ANGLES}")


# ------------------------------------------------------------------ manifest

def load_manifest(path, n_classes=10, max_person=14, max_repetition=10, check_files=True):
    """Read ``person,gesture,repetition,depth_path`` rows; paths are relative to the manifest."""
    path = Path(path)
    root = path.parent
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        log.warning("manifest %s is empty", path)
        return []
    reader = csv.reader(text.splitlines())
    header = next(reader)
    if [h.strip() for h in header] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: row 1: expected header {','.join(MANIFEST_HEADER)}")
    samples = []
    for row_no, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 4:
            raise ManifestError(f"{path}: row {row_no}: expected 4 fields, got {len(row)}")
        try:
            person, gesture, rep = (int(v) for v in row[:3])
        except ValueError:
            raise ManifestError(f"{path}: row {row_no}: non-integer id field") from None
        if not 1 <= person <= max_person:
            raise ManifestError(f"{path}: row {row_no}: person {person} outside [1, {max_person}]")
        if not 0 <= gesture < n_classes:
            raise ManifestError(f"{path}: row {row_no}: gesture {gesture} outside [0, {n_classes})")
        if not 1 <= rep <= max_repetition:
            raise ManifestError(f"{path}: row {row_no}: repetition {rep} outside [1, {max_repetition}]")
        depth_path = root / row[3].strip()
        if check_files and not depth_path.is_file():
            raise ManifestError(f"{path}: row {row_no}: missing depth file {depth_path}")
        samples.append(Sample(person, gesture, rep, depth_path))
    if not samples:
        log.warning("manifest %s has no samples", path)
    return samples


def write_manifest(path, samples):
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            rel = Path(s.depth_path)
            if rel.is_absolute():
                rel = rel.relative_to(path.parent.resolve())
            writer.writerow([s.person_id, s.gesture, s.repetition, rel.as_posix()])


# -------------------------------------------------------------- augmentation

@lru_cache(maxsize=64)
def _rotation_index(shape, angle):
    h, w = shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    t = math.radians(angle)
    # inverse map of a counter-clockwise (as displayed) rotation
    sx = np.floor(dx * math.cos(t) - dy * math.sin(t) + cx + 0.5).astype(np.int64)
    sy = np.floor(dx * math.sin(t) + dy * math.cos(t) + cy + 0.5).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    return np.where(inside, sy, 0), np.where(inside, sx, 0), inside


def rotate_mask(mask, angle):
    """Nearest-neighbour rotation about the image centre; uncovered pixels become 0."""
    mask = np.asarray(mask)
    if angle == 0:
        return mask.copy()
    sy, sx, inside = _rotation_index(mask.shape, float(angle))
    return np.where(inside, mask[sy, sx], 0).astype(mask.dtype)


def augment_rotations(mask):
    """The 9 rotated copies of a full-resolution mask, ordered as ``ANGLES``."""
    return [rotate_mask(mask, a) for a in ANGLES]


def expand_rotations(samples):
    return [replace(s, rotation_deg=a) for s in samples for a in ANGLES]


def prepare_masks(samples, params=SegmentationParams(), threads=1):
    """Segment, rotate and resize every sample: uint8 array (n, 9, 50, 50)."""
    def one(sample):
        full = segment_full_resolution(pnm.read_pgm(sample.depth_path), params)
        return np.stack([resize_mask(m) for m in augment_rotations(full)])

    if not samples:
        return np.zeros((0, len(ANGLES), 50, 50), np.uint8)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, samples))
    else:
        out = [one(s) for s in samples]
    return np.stack(out)


# --------------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldPlan:
    groups: tuple  # of tuples of person ids

    def group_of(self, person):
        for k, g in enumerate(self.groups):
            if person in g:
                return k
        raise KeyError(f"person {person} is not in the fold plan")

    def split(self, persons, fold):
        """Boolean (train, test) masks over a per-sample person array."""
        persons = np.asarray(persons)
        test = np.isin(persons, self.groups[fold])
        known = np.isin(persons, [p for g in self.groups for p in g])
        if not known.all():
            raise KeyError(f"persons {sorted(set(persons[~known]))} are not in the fold plan")
        return ~test, test


def make_folds(persons, seed, n_folds=N_FOLDS):
    """Seeded partition of persons into ``n_folds`` groups of near-equal size."""
    persons = sorted(set(int(p) for p in persons))
    if len(persons) < n_folds:
        raise ValueError(f"need at least {n_folds} persons, got {len(persons)}")
    order = np.random.default_rng(seed).permutation(persons)
    return FoldPlan(tuple(tuple(sorted(int(p) for p in g)) for g in np.array_split(order, n_folds)))


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 10
    persons: int = 14
    repetitions: int = 10
    height: int = 120
    width: int = 120
    hand_depth: int = 40
    body_depth: int = 80
    wall_depth: int = 200
    occlusion_rate: float = 0.01


@dataclass(frozen=True)
class HandPose:
    """Geometry of one rendered hand, in pixels of the depth frame."""
    center: tuple
    angle: float  # degrees, counter-clockwise
    scale: float
    palm_radius: float
    finger_length: float
    finger_width: float
    finger_angles: tuple  # degrees from the hand's up axis


FINGER_STEP = 30.0
PALM_AXES = (13.0, 11.0)
FINGER_LENGTH = 24.0
FINGER_WIDTH = 6.0
FOREARM_WIDTH = 16.0


def finger_angles(k):
    """Fan of ``k`` fingers, one every 30 degrees, centred on the up axis."""
    if k == 0:
        return ()
    spread = FINGER_STEP * (k - 1)
    return tuple(-spread / 2 + FINGER_STEP * j for j in range(k))


def _sub_rng(seed, *keys):
    return np.random.default_rng([seed, *keys])


def hand_pose(config, seed, person, gesture, repetition):
    pr = _sub_rng(seed, 1, person)
    p_scale = pr.uniform(0.9, 1.1)
    p_shift = pr.uniform(-6, 6, 2)
    p_angle = pr.uniform(-10, 10)
    rr = _sub_rng(seed, 2, person, gesture, repetition)
    r_shift = rr.uniform(-4, 4, 2)
    r_angle = rr.uniform(-6, 6)
    length = FINGER_LENGTH * rr.uniform(0.9, 1.1)
    cy = config.height * 0.46 + p_shift[0] + r_shift[0]
    cx = config.width * 0.5 + p_shift[1] + r_shift[1]
    return HandPose((cy, cx), p_angle + r_angle, p_scale, PALM_AXES[0] * p_scale,
                    length * p_scale, FINGER_WIDTH * p_scale, finger_angles(gesture))


def _segment_distance(px, py, ex, ey):
    # distance from points to the segment (0,0)-(ex,ey)
    t = np.clip((px * ex + py * ey) / (ex * ex + ey * ey), 0, 1)
    return np.hypot(px - t * ex, py - t * ey)


def hand_region(pose, shape):
    """Boolean mask of palm, fingers and forearm for ``pose``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - pose.center[0], xx - pose.center[1]
    t = math.radians(pose.angle)
    # into the hand frame: u to the right, v upwards
    u = (dx * math.cos(t) - dy * math.sin(t)) / pose.scale
    v = (-dx * math.sin(t) - dy * math.cos(t)) / pose.scale
    region = (u / PALM_AXES[0]) ** 2 + (v / PALM_AXES[1]) ** 2 <= 1
    region |= (np.abs(u) <= FOREARM_WIDTH / 2) & (v <= 0)
    reach = PALM_AXES[1] + pose.finger_length / pose.scale
    for a in pose.finger_angles:
        r = math.radians(a)
        ex, ey = reach * math.sin(r), reach * math.cos(r)
        region |= _segment_distance(u, v, ex, ey) <= FINGER_WIDTH / 2
    return region


def render_depth(config, seed, person, gesture, repetition):
    """One synthetic uint16 depth frame and the pose used to draw it."""
    pose = hand_pose(config, seed, person, gesture, repetition)
    shape = (config.height, config.width)
    rng = _sub_rng(seed, 3, person, gesture, repetition)
    depth = np.full(shape, config.wall_depth, np.int64)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    torso = ((yy - shape[0] * 0.8) / (shape[0] * 0.5)) ** 2 + ((xx - shape[1] * 0.5) / (shape[1] * 0.4)) ** 2 <= 1
    depth[torso] = config.body_depth + rng.integers(-2, 3, shape)[torso]
    hand = hand_region(pose, shape)
    base = config.hand_depth + int(rng.integers(-2, 3))
    depth[hand] = base + rng.integers(0, 3, shape)[hand]
    depth[rng.random(shape) < config.occlusion_rate] = 0
    return depth.astype(np.uint16), pose


def synth_generate(out_dir, config=SynthConfig(), seed=0):
    """Write ``dataset.csv`` and ``depth/pNN_gKK_rMM.pgm``; returns the samples."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    samples = []
    for person in range(1, config.persons + 1):
        for gesture in range(config.n_classes):
            for rep in range(1, config.repetitions + 1):
                depth, _ = render_depth(config, seed, person, gesture, rep)
                rel = Path("depth") / f"p{person:02d}_g{gesture:02d}_r{rep:02d}.pgm"
                pnm.write_pgm(out_dir / rel, depth, 65535)
                samples.append(Sample(person, gesture, rep, out_dir / rel))
    write_manifest(out_dir / "dataset.csv", [replace(s, depth_path=Path("depth") / s.depth_path.name)
                                             for s in samples])
    return samples

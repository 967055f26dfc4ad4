"""Task generators: sinusoid families, glyph classification episodes, and
environment parameter distributions.

A synthetic glyph generator stands in for Omniglot so the full pipeline runs
without downloads; a directory loader ingests the real dataset when present.
All generators are pure functions of their rng.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pendulum import EnvParams

GLYPH_SIZE = 28
SAMPLES_PER_CLASS = 20
SINE_X_RANGE = (-5.0, 5.0)
AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, 2.0 * np.pi)

GLYPH_MAGIC = b"HEXGLYPH"
GLYPH_FORMAT_VERSION = 1


class EpisodeConstructionError(ValueError):
    """Episode cannot be built from the available samples."""


# -- sinusoid regression ------------------------------------------------------


@dataclass(frozen=True)
class SinusoidTask:
    """y = amplitude * sin(x + phase)."""

    amplitude: float
    phase: float

    def evaluate(self, x):
        return self.amplitude * np.sin(np.asarray(x) + self.phase)


def sample_sinusoid(rng):
    return SinusoidTask(
        amplitude=rng.uniform(*AMPLITUDE_RANGE),
        phase=rng.uniform(*PHASE_RANGE),
    )


def sample_points(task, k, rng):
    """K pairs with x uniform on the input range and exact sine targets."""
    if k < 1:
        raise ValueError("need at least one point")
    x = rng.uniform(*SINE_X_RANGE, size=(k, 1))
    return x, task.evaluate(x)


# -- supervised episodes --------------------------------------------------------


@dataclass
class SupervisedEpisode:
    """One meta-learning unit: disjoint train and validation sets."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    meta: object = None


def sinusoid_episode(k, rng):
    """K training points and 2K validation points from one sampled task."""
    task = sample_sinusoid(rng)
    train_x, train_y = sample_points(task, k, rng)
    val_x, val_y = sample_points(task, 2 * k, rng)
    return SupervisedEpisode(train_x, train_y, val_x, val_y, meta=task)


def sinusoid_episode_for_task(task, k, rng):
    train_x, train_y = sample_points(task, k, rng)
    val_x, val_y = sample_points(task, 2 * k, rng)
    return SupervisedEpisode(train_x, train_y, val_x, val_y, meta=task)


# -- glyph datasets ---------------------------------------------------------------


@dataclass
class GlyphDataset:
    """Grayscale images in [0,1] with integer class labels and a class split."""

    images: np.ndarray  # (N, 28, 28)
    labels: np.ndarray  # (N,)
    train_classes: list = field(default_factory=list)
    heldout_classes: list = field(default_factory=list)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def class_indices(self, class_id):
        return np.flatnonzero(self.labels == class_id)


def split_classes(dataset, rng, train_fraction=0.8):
    """Assign classes to disjoint train/held-out pools in place."""
    classes = np.unique(dataset.labels)
    perm = rng.permutation(classes)
    n_train = max(1, int(round(train_fraction * classes.size)))
    n_train = min(n_train, classes.size - 1) if classes.size > 1 else 1
    dataset.train_classes = sorted(int(c) for c in perm[:n_train])
    dataset.heldout_classes = sorted(int(c) for c in perm[n_train:])
    return dataset


def generate_synthetic_glyphs(n_classes, samples_per_class=SAMPLES_PER_CLASS,
                              rng=None, size=GLYPH_SIZE):
    """Random stroke glyphs: each class is 3-6 polyline strokes, each sample
    a jittered rasterization of the class skeleton."""
    if rng is None:
        rng = np.random.default_rng(0)
    images = []
    labels = []
    lo, hi = 3.0, size - 4.0
    for class_id in range(n_classes):
        n_strokes = int(rng.integers(3, 7))
        strokes = [
            rng.uniform(lo, hi, size=(int(rng.integers(2, 4)), 2))
            for _ in range(n_strokes)
        ]
        for _ in range(samples_per_class):
            shift = rng.normal(0.0, 0.7, size=2)
            jittered = [
                s + rng.normal(0.0, 0.6, size=s.shape) + shift for s in strokes
            ]
            images.append(_rasterize(jittered, size))
            labels.append(class_id)
    return GlyphDataset(
        images=np.array(images), labels=np.array(labels, dtype=np.int64)
    )


def _rasterize(strokes, size):
    canvas = np.zeros((size, size))
    for pts in strokes:
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            n = int(3 * max(abs(x1 - x0), abs(y1 - y0))) + 2
            ts = np.linspace(0.0, 1.0, n)
            xs = np.clip(np.round(x0 + (x1 - x0) * ts).astype(int), 0, size - 1)
            ys = np.clip(np.round(y0 + (y1 - y0) * ts).astype(int), 0, size - 1)
            canvas[ys, xs] = 1.0
            for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                ny = np.clip(ys + dy, 0, size - 1)
                nx = np.clip(xs + dx, 0, size - 1)
                np.maximum.at(canvas, (ny, nx), 0.5)
    return canvas


def load_omniglot(root, size=GLYPH_SIZE):
    """Read `<root>/<alphabet>/<character>/<sample>.png` into a GlyphDataset.

    Images are downsampled to 28x28 and normalized so ink is bright on a
    dark background. Unreadable files are skipped with a warning; classes
    that end up empty are excluded.
    """
    from PIL import Image

    root = Path(root)
    images = []
    labels = []
    class_id = -1
    for alphabet in sorted(p for p in root.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(character.glob("*.png"))
            loaded = []
            for f in files:
                try:
                    with Image.open(f) as im:
                        arr = np.asarray(
                            im.convert("L").resize((size, size)), dtype=np.float64
                        )
                except OSError as err:
                    warnings.warn(f"skipping unreadable image {f}: {err}")
                    continue
                loaded.append(1.0 - arr / 255.0)
            if not loaded:
                continue
            class_id += 1
            images.extend(loaded)
            labels.extend([class_id] * len(loaded))
    if not images:
        raise EpisodeConstructionError(f"no readable classes under {root}")
    return GlyphDataset(
        images=np.array(images), labels=np.array(labels, dtype=np.int64)
    )


def augment_rotations(dataset):
    """Add exact 90/180/270-degree rotations: 4x the samples per class."""
    images = dataset.images
    if images.shape[1] != images.shape[2]:
        raise ValueError("rotation augmentation needs square images")
    rotated = [images]
    for k in (1, 2, 3):
        rotated.append(np.rot90(images, k=k, axes=(1, 2)))
    return GlyphDataset(
        images=np.concatenate(rotated, axis=0),
        labels=np.tile(dataset.labels, 4),
        train_classes=list(dataset.train_classes),
        heldout_classes=list(dataset.heldout_classes),
    )


# -- few-shot episode construction ---------------------------------------------------


@dataclass(frozen=True)
class FewShotEpisodeSpec:
    """Binary episode recipe: target class versus the rest of the pool."""

    target_class: int
    k: int
    class_pool: tuple

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.target_class not in self.class_pool:
            raise ValueError("target class must belong to the class pool")


def build_episode(dataset, spec, rng):
    """K positive + K negative training samples, 2K fresh validation samples.

    Validation and training sets are disjoint by image identity; negatives
    are drawn only from non-target classes in the pool.
    """
    pos_idx = dataset.class_indices(spec.target_class)
    if pos_idx.size < 2 * spec.k:
        raise EpisodeConstructionError(
            f"class {spec.target_class} has {pos_idx.size} samples, "
            f"needs {2 * spec.k}"
        )
    pos_pick = rng.choice(pos_idx, size=2 * spec.k, replace=False)
    negatives = [c for c in spec.class_pool if c != spec.target_class]
    if not negatives:
        raise EpisodeConstructionError("class pool has no negative classes")
    neg_classes = rng.choice(np.array(negatives), size=2 * spec.k, replace=True)
    neg_pick = np.array([
        rng.choice(dataset.class_indices(c)) for c in neg_classes
    ])

    def pack(pos, neg):
        x = dataset.images[np.concatenate([pos, neg])][..., None]
        y = np.zeros((2 * len(pos), 2))
        y[: len(pos), 1] = 1.0  # positive class
        y[len(pos):, 0] = 1.0
        return x, y

    train_x, train_y = pack(pos_pick[: spec.k], neg_pick[: spec.k])
    val_x, val_y = pack(pos_pick[spec.k:], neg_pick[spec.k:])
    return SupervisedEpisode(
        train_x, train_y, val_x, val_y,
        meta={
            "target_class": spec.target_class,
            "train_indices": np.concatenate([pos_pick[: spec.k], neg_pick[: spec.k]]),
            "val_indices": np.concatenate([pos_pick[spec.k:], neg_pick[spec.k:]]),
            "negative_classes": neg_classes,
        },
    )


def sample_episode_spec(dataset, k, rng, heldout=False):
    pool = dataset.heldout_classes if heldout else dataset.train_classes
    if not pool:
        raise EpisodeConstructionError("dataset has no class split assigned")
    target = int(pool[rng.integers(len(pool))])
    return FewShotEpisodeSpec(target_class=target, k=k, class_pool=tuple(pool))


# -- glyph dataset serialization --------------------------------------------------


def save_glyphs(path, dataset):
    """Single binary file: header, raw float64 images, raw int64 labels."""
    n, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(GLYPH_MAGIC)
        fh.write(struct.pack("<IIII", GLYPH_FORMAT_VERSION, n, h, w))
        fh.write(dataset.images.astype("<f8").tobytes())
        fh.write(dataset.labels.astype("<i8").tobytes())


def load_glyphs(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(GLYPH_MAGIC))
        if magic != GLYPH_MAGIC:
            raise IOError(f"{path}: bad glyph magic {magic!r}")
        version, n, h, w = struct.unpack("<IIII", fh.read(16))
        if version != GLYPH_FORMAT_VERSION:
            raise IOError(
                f"{path}: glyph format version {version}, "
                f"this build reads {GLYPH_FORMAT_VERSION}"
            )
        images = np.frombuffer(fh.read(8 * n * h * w), dtype="<f8").reshape(n, h, w)
        labels = np.frombuffer(fh.read(8 * n), dtype="<i8")
    return GlyphDataset(images=images.copy(), labels=labels.astype(np.int64))


# -- environment parameter distributions --------------------------------------------


ENV_TABLES = {
    "T": {
        "distance_penalty": (1e-3, 1e-1),
        "goal_position": (0.3, 0.4),
        "start_position": (-0.15, 0.15),
        "motor_torque_scale": (0.0, 5.0),
        "gravity": (0.01, 4.9),
        "motor_actuation": (185.0, 215.0),
    },
    "T'": {
        "distance_penalty": (1e-3, 1e-2),
        "goal_position": (0.0, 3.0),
        "start_position": (-0.25, 0.25),
        "motor_torque_scale": (0.0, 3.0),
        "gravity": (4.9, 9.8),
        "motor_actuation": (175.0, 225.0),
    },
}


def sample_env_params(distribution, rng):
    """Draw one task from distribution 'T' (train) or "T'" (validation).

    The distance penalty spans two decades, so it samples log-uniformly;
    every other scalar is uniform on its interval; control polarity flips
    with probability one half.
    """
    if distribution not in ENV_TABLES:
        raise ValueError(f"unknown environment distribution {distribution!r}")
    box = ENV_TABLES[distribution]
    lo, hi = box["distance_penalty"]
    distance_penalty = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return EnvParams(
        distance_penalty=distance_penalty,
        goal_position=float(rng.uniform(*box["goal_position"])),
        start_position=float(rng.uniform(*box["start_position"])),
        motor_torque_scale=float(rng.uniform(*box["motor_torque_scale"])),
        inverted_control=bool(rng.random() < 0.5),
        gravity=float(rng.uniform(*box["gravity"])),
        motor_actuation=float(rng.uniform(*box["motor_actuation"])),
    )

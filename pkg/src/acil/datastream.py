"""Episodic data streams with disjoint classes per episode.

Builds synthetic Gaussian-blob streams or streams loaded from a text
dataset file, and keeps the annotation ledger that makes label-cost
accounting exact: a sample id is charged at most once per run, no matter
how often it is re-selected.
"""

from __future__ import annotations

import gzip
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, DatasetFormatError

SYNTHETIC_SOURCE = "synthetic-gaussian"
FILE_SOURCE = "file"

# Isotropic class blobs; means are kept >= _MEAN_SEPARATION * _CLUSTER_STD apart.
_CLUSTER_STD = 1.0
_MEAN_SEPARATION = 4.0

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Sample:
    """One data point: a feature vector plus label/annotation state.

    ``annotated`` records whether the label has been purchased; the ground
    truth ``true_label`` is always present so that revealing a label never
    requires an oracle round-trip.
    """

    id: int
    features: np.ndarray
    true_label: int
    annotated: bool = False


@dataclass(frozen=True)
class EpisodeData:
    """One episode: small labeled set, large unlabeled set, held-out test set.

    ``incoming_exemplars`` is the exemplar set propagated from the previous
    episode (empty at episode 0). The structure is immutable; only the
    ``annotated`` flag of member samples changes during a run.
    """

    index: int
    labeled: tuple[Sample, ...]
    unlabeled: tuple[Sample, ...]
    incoming_exemplars: tuple[Sample, ...]
    test: tuple[Sample, ...]

    def classes(self) -> list[int]:
        """Sorted class ids present in this episode's labeled + unlabeled data."""
        return sorted({s.true_label for s in self.labeled} | {s.true_label for s in self.unlabeled})


@dataclass(frozen=True)
class StreamConfig:
    num_episodes: int = 5
    classes_per_episode: int = 2
    labeled_per_class: int = 10
    unlabeled_per_class: int = 200
    test_per_class: int = 50
    feature_dim: int = 8
    seed: int = 0
    source: str = SYNTHETIC_SOURCE
    path: str | None = None
    # Total classes offered by the source. None means "exactly as many as the
    # episodes need" for the synthetic source, or "whatever the file declares".
    num_classes: int | None = None

    def validate(self) -> None:
        for key in ("num_episodes", "classes_per_episode", "labeled_per_class",
                    "unlabeled_per_class", "test_per_class", "feature_dim"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1, got {getattr(self, key)}", key=key)
        if self.labeled_per_class >= self.unlabeled_per_class:
            raise ConfigurationError(
                "labeled_per_class must be smaller than unlabeled_per_class "
                f"({self.labeled_per_class} >= {self.unlabeled_per_class})",
                key="labeled_per_class")
        if self.source not in (SYNTHETIC_SOURCE, FILE_SOURCE):
            raise ConfigurationError(f"unknown stream source {self.source!r}", key="source")
        if self.source == FILE_SOURCE and not self.path:
            raise ConfigurationError("source 'file' requires a dataset path", key="path")
        needed = self.num_episodes * self.classes_per_episode
        if self.num_classes is not None and needed > self.num_classes:
            raise ConfigurationError(
                f"stream needs {needed} classes but the source provides {self.num_classes}",
                key="num_classes")


@dataclass
class AnnotationLedger:
    """Run-wide annotation accounting with per-unique-id charging."""

    per_episode_counts: list[int] = field(default_factory=list)
    annotated_ids: set[int] = field(default_factory=set)

    @property
    def cumulative(self) -> int:
        return sum(self.per_episode_counts)

    def charge(self, episode: int, samples) -> int:
        """Charge the given samples to ``episode`` and return the new-id count.

        ``episode`` must be the episode currently accumulating charges or the
        next one. Accepts Sample objects (their ``annotated`` flag is set) or
        bare integer ids. Already-charged ids cost nothing.
        """
        if episode == len(self.per_episode_counts):
            self.per_episode_counts.append(0)
        elif episode != len(self.per_episode_counts) - 1:
            raise ContractViolation(
                f"episode {episode} is not the ledger's current "
                f"({len(self.per_episode_counts) - 1}) or next ({len(self.per_episode_counts)}) episode")
        new = 0
        for item in samples:
            if isinstance(item, Sample):
                sid = item.id
                item.annotated = True
            else:
                sid = int(item)
            if sid not in self.annotated_ids:
                self.annotated_ids.add(sid)
                new += 1
        self.per_episode_counts[episode] += new
        return new


def charge_annotations(ledger: AnnotationLedger, episode: int, samples) -> int:
    """Functional wrapper over :meth:`AnnotationLedger.charge`."""
    return ledger.charge(episode, samples)


def _lattice_points(count: int, dim: int) -> np.ndarray:
    """First ``count`` distinct nonnegative integer vectors (min L2 distance 1)."""
    points = []
    for radius in itertools.count():
        for p in itertools.product(range(radius + 1), repeat=dim):
            if max(p) == radius:
                points.append(p)
                if len(points) == count:
                    return np.asarray(points, dtype=np.float64)


def class_means(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Deterministic well-separated class means.

    Lattice points scaled so pairwise distances are >= 4 cluster widths, then
    rotated by a seeded orthogonal matrix and shuffled; rotations preserve the
    separation guarantee.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    base = _lattice_points(num_classes, dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q *= np.sign(np.diag(r))  # fix QR sign ambiguity
    means = (_MEAN_SEPARATION * _CLUSTER_STD) * (base @ q.T)
    return means[rng.permutation(num_classes)]


def generate_synthetic_stream(config: StreamConfig) -> list[EpisodeData]:
    """Build a disjoint-class episodic stream of isotropic Gaussian blobs.

    Deterministic in (config, seed): calling twice yields element-for-element
    identical streams. Classes are assigned to episodes in ascending id order;
    labeled/unlabeled/test splits are disjoint by sample id.
    """
    config.validate()
    if config.source != SYNTHETIC_SOURCE:
        raise ConfigurationError(f"expected source {SYNTHETIC_SOURCE!r}, got {config.source!r}",
                                 key="source")
    used = config.num_episodes * config.classes_per_episode
    total = config.num_classes if config.num_classes is not None else used
    means = class_means(total, config.feature_dim, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))

    per_class = config.labeled_per_class + config.unlabeled_per_class + config.test_per_class
    episodes = []
    next_id = 0
    for n in range(config.num_episodes):
        classes = range(n * config.classes_per_episode, (n + 1) * config.classes_per_episode)
        labeled, unlabeled, test = [], [], []
        for c in classes:
            points = means[c] + _CLUSTER_STD * rng.standard_normal((per_class, config.feature_dim))
            for i, row in enumerate(points):
                sample = Sample(id=next_id, features=row, true_label=c, annotated=False)
                next_id += 1
                if i < config.labeled_per_class:
                    sample.annotated = True
                    labeled.append(sample)
                elif i < config.labeled_per_class + config.unlabeled_per_class:
                    unlabeled.append(sample)
                else:
                    sample.annotated = True
                    test.append(sample)
        episodes.append(EpisodeData(index=n, labeled=tuple(labeled), unlabeled=tuple(unlabeled),
                                    incoming_exemplars=(), test=tuple(test)))
    return episodes


def parse_dataset_file(path: str) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Parse the text dataset format.

    Header line ``d=<int> classes=<int>``, then one record per line:
    ``<class_id>,<f_1>,...,<f_d>``. Returns (d, classes, features, labels).
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        parts = header.split()
        try:
            if len(parts) != 2 or not parts[0].startswith("d=") or not parts[1].startswith("classes="):
                raise ValueError
            dim = int(parts[0][2:])
            num_classes = int(parts[1][8:])
        except ValueError:
            raise DatasetFormatError(
                f"bad header {header.strip()!r}; expected 'd=<int> classes=<int>'", line=1) from None
        if dim < 1 or num_classes < 1:
            raise DatasetFormatError(f"header declares d={dim} classes={num_classes}", line=1)

        features, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != dim + 1:
                raise DatasetFormatError(
                    f"record {len(labels)} (line {lineno}) has {len(fields) - 1} features, expected {dim}",
                    line=lineno)
            try:
                label = int(fields[0])
                row = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise DatasetFormatError(
                    f"record {len(labels)} (line {lineno}) is not numeric: {exc}", line=lineno) from None
            if not 0 <= label < num_classes:
                raise DatasetFormatError(
                    f"record {len(labels)} (line {lineno}) has class {label} outside [0, {num_classes})",
                    line=lineno)
            labels.append(label)
            features.append(row)
    return dim, num_classes, np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def write_dataset_file(path: str, features: np.ndarray, labels: np.ndarray,
                       num_classes: int | None = None) -> None:
    """Write features/labels in the text dataset format understood by the loader."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"d={features.shape[1]} classes={num_classes}\n")
        for label, row in zip(labels, features):
            fh.write(f"{int(label)}," + ",".join(format(v, ".8g") for v in row) + "\n")


def load_file_stream(path: str, config: StreamConfig) -> list[EpisodeData]:
    """Carve a dataset file into the same episodic structure as the synthetic stream.

    Classes are assigned to episodes by ascending class id; each class's
    records are shuffled by the seed before the labeled/unlabeled/test split.
    """
    config.validate()
    dim, num_classes, features, labels = parse_dataset_file(path)
    if dim != config.feature_dim:
        raise ConfigurationError(
            f"feature_dim={config.feature_dim} but the file declares d={dim}", key="feature_dim")
    if config.num_classes is not None and config.num_classes != num_classes:
        raise ConfigurationError(
            f"num_classes={config.num_classes} but the file declares classes={num_classes}",
            key="num_classes")
    used = config.num_episodes * config.classes_per_episode
    if used > num_classes:
        raise ConfigurationError(
            f"stream needs {used} classes but the file provides {num_classes}", key="num_episodes")

    per_class = config.labeled_per_class + config.unlabeled_per_class + config.test_per_class
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2,)))
    by_class = {c: np.flatnonzero(labels == c) for c in range(used)}
    for c in range(used):
        if len(by_class[c]) < per_class:
            raise ConfigurationError(
                f"class {c} has {len(by_class[c])} samples, needs {per_class}", key="labeled_per_class")
        by_class[c] = by_class[c][rng.permutation(len(by_class[c]))]

    episodes = []
    for n in range(config.num_episodes):
        classes = range(n * config.classes_per_episode, (n + 1) * config.classes_per_episode)
        labeled, unlabeled, test = [], [], []
        for c in classes:
            order = by_class[c]
            cuts = (config.labeled_per_class,
                    config.labeled_per_class + config.unlabeled_per_class,
                    per_class)
            for dest, annotated, indices in (
                    (labeled, True, order[:cuts[0]]),
                    (unlabeled, False, order[cuts[0]:cuts[1]]),
                    (test, True, order[cuts[1]:cuts[2]])):
                for idx in indices:
                    dest.append(Sample(id=int(idx), features=features[idx],
                                       true_label=int(labels[idx]), annotated=annotated))
        episodes.append(EpisodeData(index=n, labeled=tuple(labeled), unlabeled=tuple(unlabeled),
                                    incoming_exemplars=(), test=tuple(test)))
    return episodes


def _read_idx(path: str, expected_magic: int):
    opener = gzip.open if _is_gzip(path) else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: truncated IDX file")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if data.size != int(np.prod(dims)):
        raise DatasetFormatError(f"{path}: payload size {data.size} != declared {np.prod(dims)}")
    return data.reshape(dims)


def _is_gzip(path: str) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) == b"\x1f\x8b"


def convert_idx_to_dataset(images_path: str, labels_path: str, out_path: str) -> tuple[int, int]:
    """Convert an IDX image/label file pair to the text dataset format.

    Pixels are scaled to [0, 1] and flattened row-major. Returns the number
    of records written and the feature dimension. Gzipped inputs are handled
    transparently.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    write_dataset_file(out_path, flat, labels.astype(np.int64))
    return images.shape[0], flat.shape[1]

"""Clip-feature datasets: the in-memory representation, JSONL manifests,
synthetic open-set splits, feature-space augmentation and batching.

A video is a fixed-length ordered stack of ``c`` clip feature vectors of
dimension ``D``. Features are held as float32 (the manifest precision) and
promoted to float64 by the network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


class DimensionMismatchError(ManifestError):
    pass


class MissingLabelError(ManifestError):
    pass


# Instrumentation for the unsupervised contract: every read of a target
# sample's ground truth through ``VideoSample.label`` is counted. Evaluation
# code reads labels through ``ground_truth`` which is not counted.
_target_label_reads = 0


def target_label_reads() -> int:
    return _target_label_reads


def reset_target_label_reads() -> None:
    global _target_label_reads
    _target_label_reads = 0


class VideoSample:
    """One video: ``clips`` is a read-only (c, D) array.

    ``label`` is the class index for source samples. For target samples the
    ground truth is kept (index ``K`` for target-private classes) but every
    access through :attr:`label` is counted, see :func:`target_label_reads`.
    """

    __slots__ = ("id", "domain", "_label", "clips")

    def __init__(self, id: str, domain: str, label: int | None, clips):
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        arr = np.array(clips, dtype=np.float32) if not isinstance(clips, np.ndarray) else clips
        if arr.ndim != 2:
            raise DimensionMismatchError(f"sample {id!r}: clips must be a (c, D) array, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise DimensionMismatchError(f"sample {id!r}: need at least 2 clips, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"sample {id!r}: non-finite clip feature")
        if domain == SOURCE and label is None:
            raise MissingLabelError(f"source sample {id!r} has no label")
        if label is not None and int(label) < 0:
            raise ValueError(f"sample {id!r}: negative label {label}")
        arr = arr.copy()
        arr.flags.writeable = False
        self.id = str(id)
        self.domain = domain
        self._label = None if label is None else int(label)
        self.clips = arr

    @property
    def label(self) -> int | None:
        global _target_label_reads
        if self.domain == TARGET:
            _target_label_reads += 1
        return self._label

    @property
    def c(self) -> int:
        return self.clips.shape[0]

    @property
    def D(self) -> int:
        return self.clips.shape[1]

    def with_clips(self, clips: np.ndarray) -> "VideoSample":
        return VideoSample(self.id, self.domain, self._label, clips)

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.domain == other.domain
            and self._label == other._label
            and self.clips.dtype == other.clips.dtype
            and np.array_equal(self.clips, other.clips)
        )

    def __repr__(self):
        return f"VideoSample(id={self.id!r}, domain={self.domain!r}, c={self.c}, D={self.D})"


def ground_truth(sample: VideoSample) -> int | None:
    """Uncounted label access, reserved for evaluation and serialization."""
    return sample._label


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    num_shared_classes: int
    clip_dim: int
    clips_per_video: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.clips_per_video < 2:
            raise ValueError("clips_per_video must be >= 2")
        if self.num_shared_classes < 1 or self.clip_dim < 1:
            raise ValueError("K and D must be >= 1")
        K = self.num_shared_classes
        for s in self.samples:
            if s.clips.shape != (self.clips_per_video, self.clip_dim):
                raise DimensionMismatchError(
                    f"sample {s.id!r}: clips shape {s.clips.shape}, "
                    f"expected ({self.clips_per_video}, {self.clip_dim})"
                )
            y = s._label
            if s.domain == SOURCE and not 0 <= y < K:
                raise ValueError(f"source sample {s.id!r}: label {y} outside [0, {K - 1}]")
            if s.domain == TARGET and y is not None and y > K:
                raise ValueError(f"target sample {s.id!r}: label {y} outside [0, {K}]")

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[VideoSample]:
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def K(self) -> int:
        return self.num_shared_classes

    def features(self) -> np.ndarray:
        """All clips stacked as a float64 (N, c, D) array."""
        if not self.samples:
            return np.zeros((0, self.clips_per_video, self.clip_dim))
        return np.stack([s.clips for s in self.samples]).astype(np.float64)

    def source_labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# JSONL manifests
# ---------------------------------------------------------------------------

def _f32(x) -> float:
    # shortest decimal that round-trips the float32 value
    return float(np.format_float_positional(np.float32(x), unique=True, trim="-"))


def write_manifest(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        header = {"K": dataset.K, "D": dataset.clip_dim, "c": dataset.clips_per_video}
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            rec = {
                "id": s.id,
                "domain": s.domain,
                "label": ground_truth(s),
                "clips": [[_f32(v) for v in clip] for clip in s.clips],
            }
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path) -> Dataset:
    path = Path(path)
    samples = []
    header = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if header is None:
                try:
                    header = {k: int(obj[k]) for k in ("K", "D", "c")}
                except (KeyError, TypeError, ValueError):
                    raise ManifestError(f"{path}:{lineno}: header must be an object with integer K, D, c") from None
                continue
            try:
                sid, domain, label, clips = obj["id"], obj["domain"], obj["label"], obj["clips"]
            except (KeyError, TypeError):
                raise ManifestError(f"{path}:{lineno}: sample needs id, domain, label, clips") from None
            if domain == SOURCE and label is None:
                raise MissingLabelError(f"{path}:{lineno}: source sample {sid!r} has no label")
            if len(clips) != header["c"] or any(len(clip) != header["D"] for clip in clips):
                raise DimensionMismatchError(
                    f"{path}:{lineno}: sample {sid!r} does not match c={header['c']}, D={header['D']}"
                )
            try:
                samples.append(VideoSample(sid, domain, label, np.array(clips, dtype=np.float32)))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    if header is None:
        raise ManifestError(f"{path}: missing header line")
    return Dataset(samples, header["K"], header["D"], header["c"])


def strip_labels(dataset: Dataset) -> Dataset:
    """Copy of a target dataset with ground truth removed."""
    samples = [VideoSample(s.id, s.domain, None, s.clips) if s.domain == TARGET else s for s in dataset]
    return Dataset(samples, dataset.K, dataset.clip_dim, dataset.clips_per_video)


def ground_truth_map(dataset: Dataset) -> dict:
    return {s.id: ground_truth(s) for s in dataset if s.domain == TARGET}


def attach_ground_truth(dataset: Dataset, mapping: dict) -> Dataset:
    samples = []
    for s in dataset:
        if s.domain == TARGET:
            if s.id not in mapping:
                raise KeyError(f"no ground truth for target sample {s.id!r}")
            s = VideoSample(s.id, s.domain, mapping[s.id], s.clips)
        samples.append(s)
    return Dataset(samples, dataset.K, dataset.clip_dim, dataset.clips_per_video)


# ---------------------------------------------------------------------------
# Synthetic open-set splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    K: int = 6
    num_private: int = 6
    D: int = 16
    c: int = 3
    samples_per_class: int = 50
    domain_shift: float = 0.5
    cluster_std: float = 0.5
    temporal_signature: bool = False
    order_strength: float = 0.5
    feature_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("K", "num_private", "D", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.c < 2:
            raise ValueError("c must be >= 2")
        if not self.cluster_std > 0:
            raise ValueError("cluster_std must be > 0")
        if self.domain_shift < 0:
            raise ValueError("domain_shift must be >= 0")
        if self.order_strength < 0:
            raise ValueError("order_strength must be >= 0")
        if not self.feature_scale > 0:
            raise ValueError("feature_scale must be > 0")
        if self.temporal_signature and self.K < 2:
            raise ValueError("temporal_signature needs K >= 2")


def temporal_pairs(K: int) -> list[tuple[int, int]]:
    """Shared-class pairs that differ only by clip order when
    ``temporal_signature`` is on: (0, 1), (2, 3), ..."""
    return [(k, k + 1) for k in range(0, K - 1, 2)]


def class_means(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class, per-position clip means for both domains.

    Returns ``(source_means, target_means)`` of shapes (K, c, D) and
    (K + num_private, c, D); private classes occupy the last rows.

    With ``temporal_signature`` every class mean is a position-independent
    content vector plus a per-position component of scale
    ``order_strength``. Each pair from :func:`temporal_pairs` shares one
    clip pool in cyclically rolled order, and private class ``j`` (for
    ``j < K``) replays shared class ``j``'s pool in reversed order, so those
    private classes differ from a shared class by clip order alone.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    n_cls = config.K + config.num_private
    c, D = config.c, config.D
    if config.temporal_signature:
        content = rng.standard_normal((n_cls, 1, D))
        means = content + config.order_strength * rng.standard_normal((n_cls, c, D))
        for a, b in temporal_pairs(config.K):
            means[b] = np.roll(means[a], 1, axis=0)
        if c >= 3:
            for j in range(min(config.num_private, config.K)):
                means[config.K + j] = means[j][::-1]
    else:
        means = rng.standard_normal((n_cls, c, D))
    shift = rng.standard_normal((c, D))
    shift /= np.linalg.norm(shift, axis=1, keepdims=True)
    target = means + config.domain_shift * shift
    return config.feature_scale * means[: config.K], config.feature_scale * target


def synth_dataset(config: SynthConfig) -> tuple[Dataset, Dataset]:
    src_means, tgt_means = class_means(config)
    n = config.samples_per_class
    shape = (config.c, config.D)

    def draw(domain, means, labels, stream):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, stream]))
        out = []
        for cls, label in enumerate(labels):
            noise = rng.standard_normal((n,) + shape) * (config.cluster_std * config.feature_scale)
            feats = (means[cls] + noise).astype(np.float32)
            for i in range(n):
                out.append(VideoSample(f"{domain[0]}{cls:03d}_{i:04d}", domain, label, feats[i]))
        return out

    src = draw(SOURCE, src_means, list(range(config.K)), 1)
    tgt_labels = list(range(config.K)) + [config.K] * config.num_private
    tgt = draw(TARGET, tgt_means, tgt_labels, 2)
    return (
        Dataset(src, config.K, config.D, config.c),
        Dataset(tgt, config.K, config.D, config.c),
    )


# ---------------------------------------------------------------------------
# Augmentation and clip shuffling
# ---------------------------------------------------------------------------

def augment_clips(clips: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Array-level augmentation of one (c, D) stack, returned as float64.

    ``scale * (keep * x) + noise`` with keep ~ Bernoulli(1 - strength/2),
    scale ~ U[1 - strength, 1 + strength] (one per video) and
    noise ~ N(0, strength^2). Clip order is untouched.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    x = np.asarray(clips, dtype=np.float64)
    if strength == 0:
        return x.copy()
    keep = rng.random(x.shape) >= strength / 2
    scale = rng.uniform(1 - strength, 1 + strength)
    noise = rng.standard_normal(x.shape) * strength
    return scale * (x * keep) + noise


def augment(sample: VideoSample, strength: float, rng: np.random.Generator) -> VideoSample:
    if strength < 0:
        raise ValueError("strength must be >= 0")
    if strength == 0:
        return sample
    return sample.with_clips(augment_clips(sample.clips, strength, rng))


def nonidentity_permutation(c: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the c! - 1 non-identity permutations of range(c)."""
    if c < 2:
        raise ValueError("need c >= 2 to shuffle")
    ident = np.arange(c)
    while True:
        perm = rng.permutation(c)
        if not np.array_equal(perm, ident):
            return perm


def shuffle_clips(sample: VideoSample, rng: np.random.Generator) -> VideoSample:
    perm = nonidentity_permutation(sample.c, rng)
    return sample.with_clips(sample.clips[perm])


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Paired source/target mini-batch, all arrays float64.

    ``*_views`` have shape (2, b, c, D): view 1 feeds the anchor, view 2 the
    positive. ``*_shuffled`` hold one clip-shuffled copy of view 1 per
    sample. ``target_clean`` is the un-augmented target input used for
    rejection and pseudo-labelling. No target labels are carried.
    """

    source_views: np.ndarray
    source_labels: np.ndarray
    source_shuffled: np.ndarray
    target_views: np.ndarray
    target_shuffled: np.ndarray
    target_clean: np.ndarray
    target_ids: list = field(default_factory=list)

    @property
    def b(self) -> int:
        return self.source_labels.shape[0]


def _epoch_order(n: int, n_batches: int, b: int, rng: np.random.Generator) -> np.ndarray:
    # shorter domain cycles through fresh permutations to fill the epoch
    reps = math.ceil(n_batches * b / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[: n_batches * b]


def batches_per_epoch(n_source: int, n_target: int, b: int) -> int:
    return max(n_source // b, n_target // b)


def make_batches(
    source: Dataset,
    target: Dataset,
    b: int,
    seed: int,
    epoch: int = 0,
    aug_strength: float = 0.05,
) -> list[Batch]:
    """One epoch of paired batches; deterministic in ``(seed, epoch)``.

    The epoch length is ``max(|S| // b, |T| // b)``; the smaller domain is
    cycled through fresh permutations. Leftover samples are dropped.
    """
    if b < 2:
        raise ValueError("batch size must be >= 2")
    for name, ds in ((SOURCE, source), (TARGET, target)):
        if len(ds) < b:
            raise ValueError(f"{name} dataset has {len(ds)} samples, fewer than batch size {b}")
    if (source.clips_per_video, source.clip_dim) != (target.clips_per_video, target.clip_dim):
        raise DimensionMismatchError("source and target disagree on c or D")

    ss = np.random.SeedSequence([seed, epoch])
    order_seq, aug_seq = ss.spawn(2)
    order_rng = np.random.default_rng(order_seq)
    n_batches = batches_per_epoch(len(source), len(target), b)
    src_order = _epoch_order(len(source), n_batches, b, order_rng)
    tgt_order = _epoch_order(len(target), n_batches, b, order_rng)

    src_x = source.features()
    tgt_x = target.features()
    src_y = source.source_labels()
    c, D = source.clips_per_video, source.clip_dim

    def views(x, idx, seqs):
        out = np.empty((2, len(idx), c, D))
        shuf = np.empty((len(idx), c, D))
        for n, i in enumerate(idx):
            r1, r2, r3 = (np.random.default_rng(s) for s in seqs[3 * n : 3 * n + 3])
            out[0, n] = augment_clips(x[i], aug_strength, r1)
            out[1, n] = augment_clips(x[i], aug_strength, r2)
            shuf[n] = out[0, n][nonidentity_permutation(c, r3)]
        return out, shuf

    # independent sub-seeds per (sample slot, view / shuffle)
    sample_seqs = aug_seq.spawn(6 * n_batches * b)
    batches = []
    for k in range(n_batches):
        si = src_order[k * b : (k + 1) * b]
        ti = tgt_order[k * b : (k + 1) * b]
        base = 6 * k * b
        sv, ssh = views(src_x, si, sample_seqs[base : base + 3 * b])
        tv, tsh = views(tgt_x, ti, sample_seqs[base + 3 * b : base + 6 * b])
        batches.append(
            Batch(
                source_views=sv,
                source_labels=src_y[si].copy(),
                source_shuffled=ssh,
                target_views=tv,
                target_shuffled=tsh,
                target_clean=tgt_x[ti].copy(),
                target_ids=[target[i].id for i in ti],
            )
        )
    return batches


def stack_samples(samples: Sequence[VideoSample]) -> np.ndarray:
    return np.stack([s.clips for s in samples]).astype(np.float64)

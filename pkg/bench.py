"""Synthetic domain-shift benchmark.

Classes are built from shared attribute directions: every class owns a
distinct subset of attributes, and its prototype is the normalized sum of
those directions plus a small class-specific direction. Images are prototypes
plus isotropic Gaussian spread. The target domain applies a rotation inside a
random subspace, an additive bias and extra noise, all scaled by one shift
magnitude, so magnitude 0 leaves the source distribution untouched.
"""
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Any, Dict, List, Tuple

import attr
import numpy as np

from numcore import Array, l2_normalize
import models
import store


@attr.s(auto_attribs=True, frozen=True)
class ShiftSpec:
    magnitude: float = 0.6
    max_angle: float = float(np.pi / 2)
    subspace_dim: int = 16
    bias_scale: float = 0.5
    noise: float = 0.3

    def __attrs_post_init__(self) -> None:
        if self.magnitude < 0:
            raise ValueError(f"Shift magnitude must be >= 0, got {self.magnitude}")
        if self.subspace_dim < 2 or self.subspace_dim % 2:
            raise ValueError(
                f"Subspace dimension must be even and >= 2, got {self.subspace_dim}"
            )


@attr.s(auto_attribs=True, frozen=True)
class BenchmarkSpec:
    classes: int = 20
    d_in: int = 32
    attributes: int = 12
    attributes_per_class: int = 3
    class_weight: float = 0.5
    spread: float = 0.35
    source_per_class: int = 50
    heldout_size: int = 1000
    target_size: int = 2000
    teacher_shift_size: int = 600
    teacher_confusion: bool = False
    gallery_size: int = 100
    item_attributes: int = 3
    caption_size: int = 200

    def __attrs_post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError(f"Need at least 2 classes, got {self.classes}")
        if self.d_in < 4:
            raise ValueError(f"Need d_in >= 4, got {self.d_in}")
        if not 1 <= self.attributes_per_class <= self.attributes:
            raise ValueError(
                f"attributes_per_class={self.attributes_per_class} does not fit "
                f"{self.attributes} attributes"
            )
        if comb(self.attributes, self.attributes_per_class) < self.classes:
            raise ValueError(
                f"{self.classes} classes cannot have distinct attribute sets: only "
                f"{comb(self.attributes, self.attributes_per_class)} exist"
            )
        if not 1 <= self.item_attributes <= self.attributes:
            raise ValueError(f"item_attributes={self.item_attributes} out of range")
        if comb(self.attributes, self.item_attributes) < self.gallery_size:
            raise ValueError(
                f"Gallery of {self.gallery_size} needs distinct attribute sets: only "
                f"{comb(self.attributes, self.item_attributes)} exist"
            )
        if self.teacher_confusion and self.classes % 2:
            raise ValueError("Teacher confusion pairs classes, so classes must be even")


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Shift:
    """An affine shift x ↦ R x + b with extra isotropic noise."""

    rotation: Array
    bias: Array
    noise: float

    def apply(self, images: Array, rng: np.random.Generator) -> Array:
        shifted = images @ self.rotation.T + self.bias
        if self.noise > 0:
            shifted = shifted + rng.normal(0.0, self.noise, images.shape)
        return shifted


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Split:
    images: Array
    labels: Array

    def __len__(self) -> int:
        return len(self.labels)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class ShiftBenchmark:
    spec: BenchmarkSpec
    shift_spec: ShiftSpec
    seed: int
    attribute_dirs: Array
    class_attributes: Array
    prototypes: Array
    shift: Shift
    source: Split
    heldout: Split
    target: Split
    teacher_shift: Split
    teacher_source_labels: Array
    teacher_shift_labels: Array
    gallery_images: Array
    gallery_attributes: Array
    captions: Split

    def bags(self, labels: Array) -> Array:
        counts = np.zeros((len(labels), self.spec.attributes))
        for row, label in enumerate(labels):
            counts[row, self.class_attributes[label]] = 1.0
        return counts

    def student_pairs(self) -> models.PairedSet:
        return models.PairedSet(
            self.source.images, self.source.labels, self.bags(self.source.labels)
        )

    def teacher_pairs(self) -> models.PairedSet:
        """Source plus a labelled slice of the shifted domain, with teacher labels."""
        images = np.concatenate([self.source.images, self.teacher_shift.images])
        labels = np.concatenate([self.teacher_source_labels, self.teacher_shift_labels])
        return models.PairedSet(images, labels, self.bags(labels))

    def class_words(self) -> List[Tuple[int, ...]]:
        return [tuple(int(a) for a in row) for row in self.class_attributes]

    def gallery_words(self) -> List[Tuple[int, ...]]:
        return [tuple(int(a) for a in row) for row in self.gallery_attributes]


def _distinct_subsets(
    universe: int, size: int, count: int, rng: np.random.Generator
) -> Array:
    every = list(combinations(range(universe), size))
    chosen = rng.choice(len(every), size=count, replace=False)
    return np.array([every[i] for i in chosen], dtype=np.int64)


def _unit_rows(rng: np.random.Generator, rows: int, d: int) -> Array:
    return l2_normalize(rng.normal(size=(rows, d)))


def make_shift(spec: ShiftSpec, d: int, rng: np.random.Generator) -> Shift:
    """Rotate pairs of axes of a random subspace by magnitude · max_angle."""
    k = min(spec.subspace_dim, d - d % 2)
    basis, _ = np.linalg.qr(rng.normal(size=(d, k)))
    angle = spec.magnitude * spec.max_angle
    block = np.eye(k)
    cos, sin = np.cos(angle), np.sin(angle)
    for i in range(0, k, 2):
        block[i : i + 2, i : i + 2] = [[cos, -sin], [sin, cos]]
    rotation = np.eye(d) + basis @ (block - np.eye(k)) @ basis.T
    bias = spec.magnitude * spec.bias_scale * _unit_rows(rng, 1, d)[0]
    noise = spec.magnitude * spec.noise / np.sqrt(d)
    return Shift(rotation, bias, float(noise))


def _draw(
    prototypes: Array, labels: Array, spread: float, rng: np.random.Generator
) -> Array:
    d = prototypes.shape[1]
    return prototypes[labels] + rng.normal(0.0, spread / np.sqrt(d), (len(labels), d))


def _balanced_labels(classes: int, size: int, rng: np.random.Generator) -> Array:
    return rng.permutation(np.arange(size) % classes).astype(np.int64)


def _confuse(labels: Array, rng: np.random.Generator) -> Array:
    """Swap labels inside the class pairs (0, 1), (2, 3), ... with probability 1/2."""
    flip = rng.random(len(labels)) < 0.5
    return np.where(flip, labels ^ 1, labels).astype(np.int64)


def gen_benchmark(
    spec: BenchmarkSpec, shift_spec: ShiftSpec, seed: int
) -> ShiftBenchmark:
    # Independent streams so that changing the shift leaves the source intact.
    (
        structure,
        source_rng,
        shift_rng,
        target_rng,
        teacher_rng,
        gallery_rng,
        caption_rng,
    ) = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(7)]

    d = spec.d_in
    attribute_dirs = _unit_rows(structure, spec.attributes, d)
    class_attributes = _distinct_subsets(
        spec.attributes, spec.attributes_per_class, spec.classes, structure
    )
    class_dirs = _unit_rows(structure, spec.classes, d)
    prototypes = l2_normalize(
        attribute_dirs[class_attributes].sum(axis=1) + spec.class_weight * class_dirs
    )

    source_labels = np.repeat(np.arange(spec.classes), spec.source_per_class)
    source = Split(
        _draw(prototypes, source_labels, spec.spread, source_rng), source_labels
    )
    heldout_labels = _balanced_labels(spec.classes, spec.heldout_size, source_rng)
    heldout = Split(
        _draw(prototypes, heldout_labels, spec.spread, source_rng), heldout_labels
    )

    shift = make_shift(shift_spec, d, shift_rng)

    def shifted(size: int, rng: np.random.Generator) -> Split:
        labels = _balanced_labels(spec.classes, size, rng)
        clean = _draw(prototypes, labels, spec.spread, rng)
        return Split(shift.apply(clean, rng), labels)

    target = shifted(spec.target_size, target_rng)
    teacher_shift = shifted(spec.teacher_shift_size, teacher_rng)
    teacher_source_labels = source.labels.copy()
    teacher_shift_labels = teacher_shift.labels.copy()
    if spec.teacher_confusion:
        teacher_source_labels = _confuse(teacher_source_labels, teacher_rng)
        teacher_shift_labels = _confuse(teacher_shift_labels, teacher_rng)

    gallery_attributes = _distinct_subsets(
        spec.attributes, spec.item_attributes, spec.gallery_size, gallery_rng
    )
    item_prototypes = l2_normalize(attribute_dirs[gallery_attributes].sum(axis=1))
    gallery_clean = _draw(
        item_prototypes, np.arange(spec.gallery_size), spec.spread, gallery_rng
    )
    gallery_images = shift.apply(gallery_clean, gallery_rng)

    captions = shifted(spec.caption_size, caption_rng)

    return ShiftBenchmark(
        spec=spec,
        shift_spec=shift_spec,
        seed=seed,
        attribute_dirs=attribute_dirs,
        class_attributes=class_attributes,
        prototypes=prototypes,
        shift=shift,
        source=source,
        heldout=heldout,
        target=target,
        teacher_shift=teacher_shift,
        teacher_source_labels=teacher_source_labels,
        teacher_shift_labels=teacher_shift_labels,
        gallery_images=gallery_images,
        gallery_attributes=gallery_attributes,
        captions=captions,
    )


# Files

_SPLITS = ("source", "heldout", "target", "teacher_shift", "captions")


def save_benchmark(path: Path, bench: ShiftBenchmark) -> None:
    arrays: Dict[str, Array] = {
        "attribute_dirs": bench.attribute_dirs,
        "class_attributes": bench.class_attributes,
        "prototypes": bench.prototypes,
        "shift_rotation": bench.shift.rotation,
        "shift_bias": bench.shift.bias,
        "teacher_source_labels": bench.teacher_source_labels,
        "teacher_shift_labels": bench.teacher_shift_labels,
        "gallery_images": bench.gallery_images,
        "gallery_attributes": bench.gallery_attributes,
    }
    for name in _SPLITS:
        split: Split = getattr(bench, name)
        arrays[f"{name}_images"] = split.images
        arrays[f"{name}_labels"] = split.labels
    meta = {
        "kind": "benchmark",
        "seed": bench.seed,
        "spec": attr.asdict(bench.spec),
        "shift": attr.asdict(bench.shift_spec),
        "shift_noise": bench.shift.noise,
    }
    store.write_arrays(path, arrays, meta=meta, real_dtype="<f8")


def load_benchmark(path: Path) -> ShiftBenchmark:
    arrays, meta, _ = store.read_arrays(path)
    if meta.get("kind") != "benchmark":
        raise ValueError(f"{path} is not a benchmark file")
    splits: Dict[str, Any] = {
        name: Split(arrays[f"{name}_images"], arrays[f"{name}_labels"])
        for name in _SPLITS
    }
    return ShiftBenchmark(
        spec=BenchmarkSpec(**meta["spec"]),
        shift_spec=ShiftSpec(**meta["shift"]),
        seed=int(meta["seed"]),
        attribute_dirs=arrays["attribute_dirs"],
        class_attributes=arrays["class_attributes"],
        prototypes=arrays["prototypes"],
        shift=Shift(
            arrays["shift_rotation"], arrays["shift_bias"], float(meta["shift_noise"])
        ),
        teacher_source_labels=arrays["teacher_source_labels"],
        teacher_shift_labels=arrays["teacher_shift_labels"],
        gallery_images=arrays["gallery_images"],
        gallery_attributes=arrays["gallery_attributes"],
        **splits,
    )


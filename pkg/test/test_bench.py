import attr
from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np
import pytest

from .strategies import seeds
import bench
from bench import BenchmarkSpec, ShiftSpec
import models
from numcore import ParamTree

SMALL = BenchmarkSpec(
    classes=4,
    d_in=8,
    attributes=6,
    attributes_per_class=2,
    source_per_class=5,
    heldout_size=12,
    target_size=16,
    teacher_shift_size=8,
    gallery_size=6,
    caption_size=6,
)
SHIFT = ShiftSpec(subspace_dim=4)


def generate(seed=0, spec=SMALL, shift=SHIFT):
    return bench.gen_benchmark(spec, shift, seed)


class TestSpecs:
    @pytest.mark.parametrize(
        "changes",
        [
            dict(classes=1),
            dict(d_in=3),
            dict(attributes_per_class=7),
            dict(classes=16),
            dict(gallery_size=21),
            dict(item_attributes=0),
            dict(classes=5, teacher_confusion=True),
        ],
    )
    def test_infeasible_benchmarks(self, changes):
        values = dict(classes=4, attributes=6, attributes_per_class=2, gallery_size=6)
        values.update(changes)

        with pytest.raises(ValueError):
            BenchmarkSpec(**values)

    @pytest.mark.parametrize(
        "changes", [dict(magnitude=-0.1), dict(subspace_dim=3), dict(subspace_dim=0)]
    )
    def test_invalid_shifts(self, changes):
        with pytest.raises(ValueError):
            ShiftSpec(**changes)


class TestGeneration:
    def test_split_sizes(self):
        b = generate()

        assert b.source.images.shape == (20, 8)
        assert len(b.heldout) == 12
        assert len(b.target) == 16
        assert b.gallery_images.shape == (6, 8)
        assert b.gallery_attributes.shape == (6, 3)
        assert len(b.captions) == 6

    def test_labels_are_balanced(self):
        counts = np.bincount(generate().target.labels, minlength=4)

        assert counts.tolist() == [4, 4, 4, 4]

    def test_classes_have_distinct_attribute_sets(self):
        words = generate().class_words()

        assert len(set(words)) == len(words) == 4
        assert all(len(w) == 2 for w in words)

    def test_gallery_items_are_distinct(self):
        words = generate().gallery_words()

        assert len(set(words)) == 6

    @settings(max_examples=10, deadline=None)
    @given(seeds())
    def test_same_seed_same_benchmark(self, seed):
        a, b = generate(seed), generate(seed)

        for name in ("source", "heldout", "target", "teacher_shift", "captions"):
            assert np.array_equal(getattr(a, name).images, getattr(b, name).images)
            assert np.array_equal(getattr(a, name).labels, getattr(b, name).labels)
        assert np.array_equal(a.gallery_images, b.gallery_images)

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate(1).target.images, generate(2).target.images)

    def test_shift_leaves_the_source_alone(self):
        calm = generate(3, shift=ShiftSpec(magnitude=0.2, subspace_dim=4))
        wild = generate(3, shift=ShiftSpec(magnitude=1.0, subspace_dim=4))

        assert np.array_equal(calm.source.images, wild.source.images)
        assert np.array_equal(calm.heldout.images, wild.heldout.images)
        assert not np.array_equal(calm.target.images, wild.target.images)

    def test_zero_magnitude_is_the_identity(self):
        b = generate(4, shift=ShiftSpec(magnitude=0.0, subspace_dim=4))
        rng = np.random.default_rng(0)
        images = rng.normal(size=(5, 8))

        assert np.array_equal(b.shift.rotation, np.eye(8))
        assert not b.shift.bias.any()
        assert b.shift.noise == 0.0
        assert np.array_equal(b.shift.apply(images, rng), images)

    @given(st.floats(0.0, 2.0), seeds())
    def test_rotation_is_orthogonal(self, magnitude, seed):
        spec = ShiftSpec(magnitude=magnitude, subspace_dim=4)
        shift = bench.make_shift(spec, 8, np.random.default_rng(seed))

        assert np.allclose(shift.rotation @ shift.rotation.T, np.eye(8), atol=1e-9)

    def test_teacher_confusion_swaps_within_pairs(self):
        spec = attr.evolve(SMALL, teacher_confusion=True)
        b = generate(5, spec=spec)

        swapped = b.teacher_source_labels != b.source.labels
        assert swapped.any()
        assert np.array_equal(
            b.teacher_source_labels[swapped], b.source.labels[swapped] ^ 1
        )

    def test_teacher_pairs_extend_the_source(self):
        b = generate()

        pairs = b.teacher_pairs()

        assert len(pairs) == len(b.source) + len(b.teacher_shift)
        assert pairs.bags.sum(axis=1).tolist() == [2.0] * len(pairs)


class TestFiles:
    def test_round_trip(self, tmp_path):
        b = generate(6)

        bench.save_benchmark(tmp_path / "bench", b)
        loaded = bench.load_benchmark(tmp_path / "bench")

        assert loaded.spec == b.spec
        assert loaded.shift_spec == b.shift_spec
        assert loaded.seed == 6
        assert np.array_equal(loaded.target.images, b.target.images)
        assert np.array_equal(loaded.class_attributes, b.class_attributes)
        assert loaded.shift.noise == b.shift.noise

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("one", "two"):
            bench.save_benchmark(tmp_path / name, generate(7))

        for suffix in (".bin", ".json"):
            one, two = tmp_path / f"one{suffix}", tmp_path / f"two{suffix}"
            assert one.read_bytes() == two.read_bytes()

    def test_rejects_checkpoints(self, tmp_path):
        m = models.DualEncoder.initialize(models.PretrainConfig(d_in=8, classes=4))
        models.save_encoder(tmp_path / "student", m)

        with pytest.raises(ValueError):
            bench.load_benchmark(tmp_path / "student")


def prototype_encoder(b):
    """A nearest-prototype cosine classifier for the benchmark's classes."""
    d = b.spec.d_in
    blocks = {
        models.IMAGE_PROJ: np.eye(d),
        models.TEXT_PROJ: np.eye(d),
        models.PROMPT: np.zeros((1, d)),
        models.CLASS_TABLE: b.prototypes,
        models.WORD_TABLE: b.attribute_dirs,
    }
    return models.DualEncoder(ParamTree.build(blocks))


def accuracy(b, split):
    return models.zero_shot_accuracy(prototype_encoder(b), split.images, split.labels)


class TestShiftStrength:
    def test_no_shift_matches_the_source_domain(self):
        spec = attr.evolve(SMALL, heldout_size=20000, target_size=20000)
        b = generate(8, spec=spec, shift=ShiftSpec(magnitude=0.0, subspace_dim=4))

        assert accuracy(b, b.target) == pytest.approx(accuracy(b, b.heldout), abs=0.02)

    def test_accuracy_falls_as_the_shift_grows(self):
        spec = attr.evolve(SMALL, target_size=2000)

        def mean_accuracy(magnitude):
            shift = ShiftSpec(magnitude=magnitude, subspace_dim=4)
            benchmarks = [generate(seed, spec, shift) for seed in range(5)]
            return np.mean([accuracy(b, b.target) for b in benchmarks])

        means = [mean_accuracy(m) for m in (0.0, 0.3, 0.6, 0.9)]

        assert all(later <= earlier for earlier, later in zip(means, means[1:]))
        assert means[-1] < means[0]

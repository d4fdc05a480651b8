import math

import numpy as np
import pytest

from meduniseg.registry import ModalityDescriptor, TaskDescriptor
from meduniseg.synth import (
    PhantomGenerationError,
    PhantomSpec,
    class_fractions,
    generate_dataset,
    read_dataset,
    render_ball,
    sample_batch,
    tree_digest,
    write_dataset,
)

CT = ModalityDescriptor(0, "pseudo-CT", 1, "3D")
FUNDUS = ModalityDescriptor(1, "pseudo-fundus", 3, "2D")


def sphere_spec(dims=(16, 48, 48), classes=2, seed=7):
    task = TaskDescriptor(0, "sphere", classes, 0)
    return PhantomSpec("sphere", task, CT, dims, (0.2,), (0.05,), tuple(0.5 * k for k in range(1, classes)), 0.1, seed)


def disk_spec(dims=(1, 64, 64), shape="disk", classes=2):
    task = TaskDescriptor(1, "disk", classes, 1)
    return PhantomSpec(shape, task, FUNDUS, dims, (0.6, 0.3, 0.1), (0.05,) * 3, tuple(0.5 * k for k in range(1, classes)), 0.1, 3)


def brute_force_ball(dims, center, radius):
    count = 0
    for z in range(dims[0]):
        for y in range(dims[1]):
            for x in range(dims[2]):
                if (z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2 <= radius**2:
                    count += 1
    return count


def test_sphere_rasterization_matches_brute_force_and_volume():
    dims, center, r = (48, 48, 48), (24, 24, 24), 8
    mask = render_ball(dims, center, r)
    oracle = brute_force_ball(dims, center, r)
    assert mask.sum() == oracle
    analytic = 4 / 3 * math.pi * r**3
    assert abs(oracle - analytic) / analytic <= 0.05


def test_generation_is_deterministic():
    a = generate_dataset(sphere_spec(), 3, 2)
    b = generate_dataset(sphere_spec(), 3, 2)
    for sa, sb in zip(a.train_samples + a.test_samples, b.train_samples + b.test_samples):
        assert sa.image.tobytes() == sb.image.tobytes()
        assert sa.label.tobytes() == sb.label.tobytes()


def test_different_seed_changes_data():
    a = generate_dataset(sphere_spec(seed=1), 1, 1)
    b = generate_dataset(sphere_spec(seed=2), 1, 1)
    assert a.train_samples[0].image.tobytes() != b.train_samples[0].image.tobytes()


def test_2d_samples_have_depth_one():
    ds = generate_dataset(disk_spec(), 4, 2)
    for s in ds.train_samples + ds.test_samples:
        assert s.image.shape == (3, 1, 64, 64)
        assert s.label.shape == (1, 64, 64)


@pytest.mark.parametrize(
    "spec",
    [sphere_spec(classes=3), sphere_spec(dims=(32, 48, 48), classes=4), disk_spec(classes=3), disk_spec(shape="annulus", classes=3)],
    ids=["sphere3", "sphere4", "disk3", "annulus3"],
)
def test_every_foreground_class_present(spec):
    ds = generate_dataset(spec, 6, 2)
    for s in ds.train_samples + ds.test_samples:
        present = set(np.unique(s.label).tolist())
        assert present == set(range(spec.class_count))


def test_labels_follow_noiseless_geometry():
    spec = sphere_spec(classes=3)
    spec = PhantomSpec(spec.shape, spec.task, spec.modality, spec.dims, (0.0,), (0.0,), (1.0, 2.0), 0.0, 5)
    s = generate_dataset(spec, 1, 1).train_samples[0]
    np.testing.assert_array_equal(s.image[0], s.label.astype(np.float32))


def test_cuboid_phantom():
    task = TaskDescriptor(0, "box", 2, 0)
    spec = PhantomSpec("cuboid", task, CT, (16, 32, 32), (0.5,), (0.05,), (-0.8,), 0.1, 2)
    ds = generate_dataset(spec, 3, 1)
    assert all(s.label.max() == 1 for s in ds.train_samples)


def test_too_small_dims_rejected():
    with pytest.raises(PhantomGenerationError):
        generate_dataset(sphere_spec(dims=(4, 4, 4), classes=4), 1, 1)


@pytest.mark.parametrize("dims", [(2, 32, 32), (0, 32, 32)])
def test_2d_contract_enforced(dims):
    with pytest.raises(PhantomGenerationError):
        generate_dataset(disk_spec(dims=dims), 1, 1)


def test_requires_at_least_one_sample_per_split():
    with pytest.raises(PhantomGenerationError):
        generate_dataset(sphere_spec(), 0, 1)


def test_class_balance_within_configured_bounds():
    spec = sphere_spec(classes=3)
    ds = generate_dataset(spec, 8, 2)
    lo, hi = spec.foreground_bounds
    for s in ds.train_samples:
        frac = np.bincount(s.label.ravel(), minlength=3) / s.label.size
        assert np.all((frac[1:] >= lo) & (frac[1:] <= hi))
    pooled = class_fractions(ds)
    assert pooled[0] > pooled[1] > pooled[2] > 0


def test_train_test_disjoint():
    ds = generate_dataset(sphere_spec(), 5, 3)
    assert not {s.index for s in ds.train_samples} & {s.index for s in ds.test_samples}
    assert ds.sample_count == 8


def test_sample_batch_shapes_3d():
    ds = generate_dataset(sphere_spec(), 3, 1)
    batch = sample_batch(ds, 2, np.random.default_rng(0))
    assert batch.images.shape == (2, 1, 16, 48, 48)
    assert batch.labels.shape == (2, 16, 48, 48)
    assert batch.images.dtype == np.float32


def test_sample_batch_single_sample_with_replacement():
    ds = generate_dataset(sphere_spec(), 1, 1)
    batch = sample_batch(ds, 4, np.random.default_rng(0))
    for i in range(4):
        np.testing.assert_array_equal(batch.images[i], ds.train_samples[0].image)


def test_sample_batch_replay():
    ds = generate_dataset(sphere_spec(), 5, 1)

    def draws(seed):
        rng = np.random.default_rng(seed)
        return [sample_batch(ds, 2, rng).indices.tolist() for _ in range(100)]

    assert draws(11) == draws(11)
    assert draws(11) != draws(12)


def test_sample_batch_rejects_empty_batch():
    ds = generate_dataset(sphere_spec(), 1, 1)
    with pytest.raises(ValueError):
        sample_batch(ds, 0, np.random.default_rng(0))


def test_sample_batch_random_crop():
    ds = generate_dataset(sphere_spec(), 2, 1)
    batch = sample_batch(ds, 3, np.random.default_rng(0), patch=(8, 32, 32))
    assert batch.images.shape == (3, 1, 8, 32, 32)


def test_disk_round_trip_is_byte_identical(tmp_path):
    spec = sphere_spec(classes=3)
    ds = generate_dataset(spec, 2, 1)
    write_dataset(ds, tmp_path / "a", phantom=spec)
    back = read_dataset(tmp_path / "a")
    for x, y in zip(ds.train_samples + ds.test_samples, back.train_samples + back.test_samples):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.label.tobytes() == y.label.tobytes()
    write_dataset(back, tmp_path / "b", phantom=spec)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    raw = np.fromfile(tmp_path / "a" / "images" / "00000.f32", dtype="<f4")
    assert raw.size == 16 * 48 * 48

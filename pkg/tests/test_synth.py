import numpy as np
import pytest

from hollowconv.hollow import is_hollow
from hollowconv.synth import (
    PRESETS, HollowObjectParams, PhantomDataset, boundary_sharpness, check_stack, class_fractions,
    convolve_same, gen_dataset, gen_hollow_object, gen_phantom_stack, homothetic_kernel,
    kernel_scale_study, outer_contour, study_panel,
)
from oracles import radius_rule


def test_ring_is_the_analytic_annulus():
    obj = gen_hollow_object(HollowObjectParams())
    assert np.array_equal(obj.mask, radius_rule(100, 20, 20, 5))
    assert np.array_equal(obj.image[obj.mask == 1], np.ones(obj.mask.sum()))
    assert set(np.unique(obj.image[obj.mask == 0])) == {0.0}


@pytest.mark.parametrize("bad", [
    dict(wall=0.0), dict(wall=20.0), dict(family="blob"), dict(semi_axes=(20.0, 15.0)),
    dict(semi_axes=(60.0, 60.0)), dict(wall_intensity=0.1),
])
def test_invalid_objects_rejected(bad):
    with pytest.raises(ValueError):
        gen_hollow_object(HollowObjectParams(**bad))


def test_objects_deterministic():
    p = HollowObjectParams(family="ellipse", semi_axes=(20.0, 14.0), noise=0.1)
    assert gen_hollow_object(p, seed=3).image.tobytes() == gen_hollow_object(p, seed=3).image.tobytes()
    assert gen_hollow_object(p, seed=3).image.tobytes() != gen_hollow_object(p, seed=4).image.tobytes()


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_stacks_satisfy_invariants(preset):
    for seed in range(3):
        stack = gen_phantom_stack(seed, T=12, size=64, preset=preset)
        assert stack.images.shape == (12, 1, 64, 64) and stack.masks.shape == (12, 3, 64, 64)
        check_stack(stack)
        for name, frac in class_fractions(stack).items():
            lo, hi = PRESETS[preset].fractions[name]
            assert lo <= frac <= hi, (preset, seed, name, frac)


def test_stacks_deterministic_and_drift_bounded():
    a, b = gen_phantom_stack(5), gen_phantom_stack(5)
    assert a.images.tobytes() == b.images.tobytes() and a.masks.tobytes() == b.masks.tobytes()
    outer = a.masks[:, 0].reshape(12, -1).sum(axis=1).astype(float)
    # band area grows at most quadratically with a <= 10% axis change per slice
    assert np.all(np.abs(np.diff(outer)) / outer[:-1] < 1.1 ** 2 - 1 + 0.1)
    assert not np.array_equal(a.masks[0], a.masks[-1])


def test_zero_deformation_gives_identical_slices():
    stack = gen_phantom_stack(2, deformation=0.0)
    assert all(np.array_equal(stack.masks[0], m) for m in stack.masks)
    assert all(np.array_equal(stack.images[0], im) for im in stack.images)


def test_stack_wall_bands_are_hollow():
    stack = gen_phantom_stack(7)
    for t in range(12):
        assert is_hollow(stack.masks[t, 0])


def test_stack_argument_checks():
    with pytest.raises(ValueError, match="preset"):
        gen_phantom_stack(0, preset="hard")
    with pytest.raises(ValueError, match="too small"):
        gen_phantom_stack(0, size=16)
    with pytest.raises(ValueError, match="deformation"):
        gen_phantom_stack(0, deformation=0.5)


def test_check_stack_catches_overlap():
    stack = gen_phantom_stack(0)
    stack.masks[3, 1] |= stack.masks[3, 0]
    with pytest.raises(AssertionError, match="overlap"):
        check_stack(stack)


def test_dataset_round_trip(tmp_path):
    data = gen_dataset(2, 1, T=4, size=32, seed=9)
    assert list(data.split("train")) == [0, 1] and list(data.split("test")) == [2]
    assert data.mean == pytest.approx(float(data.images[:2].mean()))
    data.save(tmp_path / "d")
    back = PhantomDataset.load(tmp_path / "d")
    assert back.images.tobytes() == data.images.tobytes()
    assert back.masks.tobytes() == data.masks.tobytes()
    assert back.n_train == 2 and back.mean == data.mean and back.std == data.std
    with pytest.raises(FileNotFoundError):
        PhantomDataset.load(tmp_path / "missing")


def ring():
    return gen_hollow_object(HollowObjectParams())


def test_sharpness_examples():
    obj = ring()
    assert boundary_sharpness(obj.mask.astype(float), obj.mask) > 10
    assert boundary_sharpness(np.full((100, 100), 0.4), obj.mask) == 0.0
    base = boundary_sharpness(obj.image, obj.mask)
    noisy = gen_hollow_object(HollowObjectParams(noise=0.05), seed=1).image
    for scale, shift in [(3.0, 2.0), (0.5, -1.0), (10.0, 0.0)]:
        assert boundary_sharpness(obj.image * scale + shift, obj.mask) == pytest.approx(base, rel=1e-5)
        assert boundary_sharpness(noisy * scale + shift, obj.mask) == pytest.approx(
            boundary_sharpness(noisy, obj.mask), rel=1e-5)


def test_outer_contour_is_outer_edge_of_band():
    mask = ring().mask
    contour = outer_contour(mask)
    assert contour.any() and np.all(mask[contour] == 1)
    c = 49.5
    ii, jj = np.nonzero(contour)
    r = np.hypot(ii - c, jj - c)
    assert r.min() > 20 - 5 + 2


def test_identity_kernel_reproduces_input():
    obj = ring()
    assert np.array_equal(convolve_same(obj.image, np.ones((1, 1))), obj.image)
    result = kernel_scale_study(obj, (1, 3))
    assert np.allclose(result.outputs[0], obj.image)
    assert result.score(1) == pytest.approx(boundary_sharpness(obj.image, obj.mask), rel=1e-9)


def test_homothetic_kernels_are_hollow_and_normalized():
    p = HollowObjectParams()
    for k in (3, 10, 20, 40):
        kern = homothetic_kernel(p, k)
        assert kern.shape == (k, k) and kern.sum() == pytest.approx(1.0)
        assert is_hollow(kern > 0)


def test_convolve_same_keeps_size_for_even_kernels():
    img = np.random.default_rng(0).normal(size=(30, 30))
    for k in (3, 4, 10):
        assert convolve_same(img, np.ones((k, k)) / k ** 2).shape == (30, 30)


def test_argmax_ratio_survives_doubling():
    base = kernel_scale_study(ring(), (3, 5, 10, 20, 40))
    double = gen_hollow_object(HollowObjectParams(size=200, semi_axes=(40.0, 40.0), wall=10.0))
    scaled = kernel_scale_study(double, (6, 10, 20, 40, 80))
    i, j = base.kernel_sizes.index(base.best), scaled.kernel_sizes.index(scaled.best)
    assert abs(i - j) <= 1


def test_study_panel_layout():
    obj = ring()
    result = kernel_scale_study(obj, (3, 10))
    panel = study_panel(obj, result, gap=2)
    assert panel.dtype == np.uint8 and panel.shape == (100, 3 * 100 + 2 * 2)
    with pytest.raises(ValueError, match="exceeds"):
        kernel_scale_study(obj, (3, 200))

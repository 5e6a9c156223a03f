import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carparse.carmodel import sample_family
from carparse.errors import InconsistentTopology
from carparse.geometry import PointCloud
from carparse.shape_space import (SHAPE_DIM, build_shape_space, load_shape_space, project_shape,
                                  save_shape_space, synthesize_shape, truncated)


def _rms(a, b):
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


@pytest.fixture(scope="module")
def family(template):
    return sample_family(40, seed=0, template=template)[1]


def test_dimension_is_22(space):
    assert SHAPE_DIM == 22
    assert space.dim == 22 and space.basis.shape == (3 * space.N, 22)


def test_basis_orthonormal_and_sorted(space):
    B = space.basis
    assert np.abs(B.T @ B - np.eye(space.dim)).max() < 1e-9
    assert np.all(np.diff(space.singular_values) <= 0)
    assert np.all(space.singular_values >= 0)


def test_rank_one_family():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(200, 3))
    direction = rng.normal(size=(200, 3))
    models = [base + a * direction + 1e-6 * rng.normal(size=base.shape) for a in np.linspace(-1, 1, 23)]
    sp = build_shape_space(models)
    sv = sp.singular_values
    assert sv[0] > 1e3 * sv[1]
    assert sv[0] ** 2 / np.sum(sv ** 2) > 0.999


def test_identical_models_are_degenerate():
    pts = np.random.default_rng(1).normal(size=(50, 3))
    sp = build_shape_space([pts, pts.copy()])
    assert np.all(sp.singular_values == 0)
    assert sp.n_effective == 0 and sp.padded
    assert np.abs(sp.basis.T @ sp.basis - np.eye(22)).max() < 1e-9


def test_few_models_clamped_and_padded():
    rng = np.random.default_rng(2)
    sp = build_shape_space([rng.normal(size=(30, 3)) for _ in range(5)])
    assert sp.n_effective == 4 and sp.dim == 22
    assert np.all(sp.singular_values[4:] == 0)


def test_topology_mismatch():
    with pytest.raises(InconsistentTopology):
        build_shape_space([np.zeros((10, 3)), np.zeros((11, 3))])


def test_zero_params_give_mean(space):
    assert np.array_equal(synthesize_shape(space, np.zeros(22)).points, space.mean_shape)
    params, rms = project_shape(space, space.mean_shape)
    assert np.abs(params).max() < 1e-12 and rms < 1e-12


def test_labels_inherited(space):
    pc = synthesize_shape(space, np.ones(22))
    assert np.array_equal(pc.labels, space.point_labels)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_synthesize_project_round_trip(space, seed):
    # components without data variance have no geometric effect, so only live ones are identifiable
    s0 = np.random.default_rng(seed).uniform(-3, 3, size=22) * (space.singular_values > 0)
    x = synthesize_shape(space, s0)
    s, rms = project_shape(space, x)
    assert np.abs(s - s0).max() < 1e-9
    assert rms < 1e-9
    assert _rms(synthesize_shape(space, s).points, x.points) < 1e-9


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_sampled_shapes_have_positive_extent(space, seed):
    s = np.random.default_rng(seed).uniform(-2, 2, size=22)
    ext = np.ptp(synthesize_shape(space, s).points, axis=0)
    assert np.all(ext > 0.5)


def test_training_models_in_span_reproduce(template):
    _, verts = sample_family(12, seed=3, template=template)
    sp = build_shape_space(verts)
    for v in verts:
        s, rms = project_shape(sp, v)
        assert rms < 1e-6
        assert _rms(synthesize_shape(sp, s).points, v) < 1e-6


def test_truncation_residual_matches_gram_oracle(family):
    sp = build_shape_space(family)
    X = np.stack([v.reshape(-1) for v in family], axis=1)
    C = X - X.mean(axis=1, keepdims=True)
    # eigen-decomposition of the model Gram matrix: an independent route to the PCA spectrum
    evals, V = np.linalg.eigh(C.T @ C)
    order = np.argsort(evals)[::-1]
    evals, V = np.clip(evals[order], 0, None), V[:, order]
    n = sp.N
    for k in (1, 5, 22):
        sub = truncated(sp, k)
        for j in (0, 17, 39):
            _, rms = project_shape(sub, family[j])
            expect = np.sqrt(np.sum(evals[k:] * V[j, k:] ** 2) / n)
            assert rms == pytest.approx(expect, rel=1e-6, abs=1e-9)


def test_reconstruction_error_non_increasing(space, family):
    for v in family[:10]:
        errs = [project_shape(truncated(space, k), v)[1] for k in range(1, 23)]
        assert np.all(np.diff(errs) <= 1e-12)


def test_container_round_trip(tmp_path, space):
    path = tmp_path / "space.bin"
    save_shape_space(space, path)
    back = load_shape_space(path)
    assert np.array_equal(back.basis, space.basis)
    assert np.array_equal(back.mean_shape, space.mean_shape)
    assert np.array_equal(back.singular_values, space.singular_values)
    assert np.array_equal(back.faces, space.faces)
    assert back.n_effective == space.n_effective

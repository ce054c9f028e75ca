import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpm.filtering import (
    FilterSpec,
    box_filter,
    box_filter_centers,
    discretization_diagnostics,
    divfree_project,
    downsample,
    downsample_centers,
    make_coarse_target,
    projection_operator_residual,
    window_offsets,
)
from dpm.grid import GridSpec
from dpm.solver import divergence, u_rms


def naive_box(u, r):
    """Explicit loop over the filter window (independent of the shifted-sum code)."""
    n = u.shape[1]
    offs = list(window_offsets(r))
    out = np.zeros_like(u)
    for m in range(3):
        for a in offs:
            for b in offs:
                for c in offs:
                    out[m] += np.roll(u[m], (-a, -b, -c), axis=(0, 1, 2))
    return out / len(offs) ** 3


class TestFilterSpec:
    def test_rejects_bad_ratio(self):
        with pytest.raises(ValueError):
            FilterSpec(0)
        with pytest.raises(ValueError):
            FilterSpec(2, kernel="gaussian")

    def test_check_divisibility(self):
        assert FilterSpec(4).check(16) == 4
        with pytest.raises(ValueError):
            FilterSpec(3).check(16)

    @pytest.mark.parametrize("r", [1, 2, 3, 4, 8])
    def test_window_has_r_points(self, r):
        assert len(window_offsets(r)) == r


class TestBoxFilter:
    @pytest.mark.parametrize("r", [2, 4])
    def test_matches_naive(self, r, rng):
        u = rng.standard_normal((3, 8, 8, 8))
        assert np.allclose(box_filter(u, FilterSpec(r)), naive_box(u, r))

    def test_preserves_mean_and_constants(self, rng):
        u = rng.standard_normal((3, 8, 8, 8))
        f = box_filter(u, FilterSpec(4))
        assert np.allclose(f.mean(axis=(1, 2, 3)), u.mean(axis=(1, 2, 3)))
        assert np.allclose(box_filter(np.ones_like(u), FilterSpec(2)), 1.0)

    def test_commutes_with_divergence(self, state16):
        spec = FilterSpec(4)
        dx = state16.grid.dx
        assert np.max(np.abs(divergence(box_filter(state16.u, spec), dx))) < 1e-12

    def test_center_filter_sampling_is_cell_average(self, rng):
        f = rng.standard_normal((8, 8, 8))
        spec = FilterSpec(4)
        coarse = downsample_centers(box_filter_centers(f, spec), spec)
        block = f.reshape(2, 4, 2, 4, 2, 4).mean(axis=(1, 3, 5))
        assert np.allclose(coarse, block)


class TestDownsample:
    def test_shape_and_locations(self, rng):
        u = rng.standard_normal((3, 8, 8, 8))
        U = downsample(u, FilterSpec(2))
        assert U.shape == (3, 4, 4, 4)
        assert U[0, 1, 2, 3] == u[0, 2, 4, 6]
        assert U[1, 1, 2, 3] == u[1, 2, 4, 6]

    def test_ratio_one_identity(self, rng):
        u = rng.standard_normal((3, 4, 4, 4))
        assert np.array_equal(downsample(u, FilterSpec(1)), u)


class TestDivfreeProject:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_constraint_and_idempotence(self, seed):
        r = np.random.default_rng(seed)
        U = r.standard_normal((3, 8, 8, 8))
        dx = 2 * np.pi / 8
        w, lam = divfree_project(U, dx)
        assert np.max(np.abs(divergence(w, dx))) <= 1e-12 * u_rms(U) / dx
        w2, _ = divfree_project(w, dx)
        assert np.max(np.abs(w2 - w)) <= 1e-12 * np.max(np.abs(w))

    def test_fixed_points(self, state16):
        w, _ = divfree_project(state16.u, state16.grid.dx)
        assert np.allclose(w, state16.u, atol=1e-12)

    def test_is_nearest(self, rng):
        dx = 0.5
        U = rng.standard_normal((3, 8, 8, 8))
        w, _ = divfree_project(U, dx)
        other, _ = divfree_project(rng.standard_normal(U.shape), dx)
        assert np.sum((U - w) ** 2) <= np.sum((U - (w + 0.01 * other)) ** 2)
        # the residual is orthogonal to divergence-free fields
        assert abs(np.sum(projection_operator_residual(U, dx) * other)) < 1e-10

    def test_coarse_target(self, state16):
        t = make_coarse_target(state16.u, state16.grid, FilterSpec(2), time=0.5, provenance="x")
        assert t.grid.n == 8 and t.time == 0.5
        assert np.max(np.abs(divergence(t.w, t.grid.dx))) < 1e-12
        # filtered fine field is divergence-free but the sampled field is not
        assert np.max(np.abs(divergence(t.U_bar, t.grid.dx))) > 1e-6


class TestDiagnostics:
    def test_keys_and_zero_error_for_linear_shear(self):
        g = GridSpec(16)
        u = np.zeros((3,) + g.shape)
        u[1] = np.sin(g.face_coords(1)[0])  # u_1 untouched: zero difference error
        d = discretization_diagnostics(u, g, FilterSpec(2))
        assert d["delta_u1_mean"] == 0.0
        assert d["grad_mean_dns"] > 0
        assert d["sample_ratio"] == 2

    def test_explicit_sampling(self, state16):
        spec = FilterSpec(4)
        d = discretization_diagnostics(box_filter(state16.u, spec), state16.grid, spec, sample_ratio=2)
        assert d["filter_ratio"] == 4 and d["sample_ratio"] == 2
        assert d["max_div_dns"] < 1e-12

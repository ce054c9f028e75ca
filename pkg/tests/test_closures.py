import numpy as np
import pytest

from dpm.closures import (
    DynamicSmagorinsky,
    LinearClosure,
    NoModel,
    Smagorinsky,
    apply_test_filter,
    dynamic_coefficient,
    eddy_viscosity_forcing,
    smagorinsky_forcing,
    strain_magnitude,
    strain_rate,
    tensor_face_divergence,
    tensor_face_divergence_T,
)
from dpm.grid import GridSpec


class TestTensorDivergence:
    def test_transpose(self, rng):
        tau = rng.standard_normal((3, 3, 6, 6, 6))
        f = rng.standard_normal((3, 6, 6, 6))
        assert np.isclose(np.sum(tensor_face_divergence(tau, 0.3) * f),
                          np.sum(tau * tensor_face_divergence_T(f, 0.3)))

    def test_constant_tensor_has_no_divergence(self):
        tau = np.ones((3, 3, 4, 4, 4))
        assert np.allclose(tensor_face_divergence(tau, 0.1), 0.0)

    def test_smooth_field_second_order(self):
        errs = []
        for n in (16, 32):
            g = GridSpec(n)
            x = g.center_coords()
            tau = np.zeros((3, 3) + g.shape)
            tau[0, 0] = np.sin(x[0])
            tau[0, 1] = np.cos(x[1])
            xf = g.face_coords(0)
            exact = np.cos(xf[0]) - np.sin(xf[1])
            errs.append(np.max(np.abs(tensor_face_divergence(tau, g.dx)[0] - exact)))
        assert 1.8 < np.log2(errs[0] / errs[1]) < 2.2


class TestStrain:
    def test_symmetric_and_traceless_for_divfree(self, state8):
        S = strain_rate(state8.u, state8.grid.dx)
        assert np.allclose(S, S.transpose(1, 0, 2, 3, 4))
        assert np.allclose(np.trace(S), 0.0, atol=1e-12)

    def test_uniform_shear(self):
        g = GridSpec(8)
        u = np.zeros((3,) + g.shape)
        # u_0 = sin(y): S_01 = cos(y)/2 at second order
        u[0] = np.sin(g.face_coords(0)[1])
        S = strain_rate(u, g.dx)
        c = g.center_coords()
        assert np.max(np.abs(S[0, 1] - 0.5 * np.cos(c[1]))) < 0.05
        assert np.allclose(strain_magnitude(S), np.sqrt(4 * S[0, 1] ** 2))


class TestSmagorinsky:
    def test_dissipative(self, state16):
        f = smagorinsky_forcing(state16.u, state16.grid)
        assert np.sum(f * state16.u) < 0

    def test_quadratic_in_coefficient(self, state8):
        a = Smagorinsky(0.1).forcing(state8.u, state8.grid)
        b = Smagorinsky(0.2).forcing(state8.u, state8.grid)
        assert np.allclose(b, 4 * a)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Smagorinsky(0.0)

    def test_no_model_zero(self, state8):
        assert not NoModel().forcing(state8.u, state8.grid).any()


class TestDynamic:
    def test_test_filter_preserves_constants(self):
        assert np.allclose(apply_test_filter(np.full((3, 4, 4, 4), 2.0)), 2.0)

    def test_coefficient_nonnegative(self, state16):
        assert dynamic_coefficient(state16.u, state16.grid.dx) >= 0.0

    def test_zero_flow(self):
        g = GridSpec(8)
        u = np.zeros((3,) + g.shape)
        assert dynamic_coefficient(u, g.dx) == 0.0
        assert not DynamicSmagorinsky().forcing(u, g).any()

    def test_forcing_uses_coefficient(self, state16):
        C = dynamic_coefficient(state16.u, state16.grid.dx)
        f = DynamicSmagorinsky().forcing(state16.u, state16.grid)
        if C > 0:
            assert np.allclose(f, eddy_viscosity_forcing(state16.u, state16.grid.dx, C))


class TestLinearClosure:
    def test_vjp_transpose(self, state8, rng):
        c = LinearClosure([0.3, -0.2], ("identity", "laplacian"))
        du, v = rng.standard_normal((2,) + state8.u.shape)
        dth = rng.standard_normal(2)
        lhs = np.sum(c.forcing_jvp(state8.u, du, dth, state8.grid) * v)
        gu, gth = c.forcing_vjp(state8.u, v, state8.grid)
        assert np.isclose(lhs, np.sum(du * gu) + gth @ dth)

    def test_param_count_checked(self):
        with pytest.raises(ValueError):
            LinearClosure([1.0, 2.0], ("identity",))
        with pytest.raises(ValueError):
            LinearClosure([1.0], ("cubic",)).forcing(np.zeros((3, 4, 4, 4)), GridSpec(4))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneatomlaser import FourStateParams, build_four_state, critical_numbers, scale_cavity
from oneatomlaser.hilbert import coherent_state
from oneatomlaser.semiclassical import (SCState, _system, field_growth_rate, knee_and_quench, lasing_window,
                                        sc_rhs, sc_scan, sc_steady)

from .oracles import lindblad_action, model_matrices

CS = FourStateParams.cs_defaults(I3=2.0, I4=3.0)


def random_atom(rng, n=4):
    m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    rho = m @ m.conj().T
    return rho / np.trace(rho)


class TestEquations:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_rhs_exact_for_product_states(self, seed):
        """For |alpha><alpha| (x) sigma the factorization is exact at that instant."""
        rng = np.random.default_rng(seed)
        N = 30
        alpha = complex(*rng.uniform(-0.8, 0.8, 2))
        sigma = random_atom(rng)
        p = CS.with_intensities(I3=rng.uniform(0, 5))
        m = build_four_state(p, truncation=N)
        psi = coherent_state(N, alpha)
        rho = np.kron(sigma, np.outer(psi, psi.conj()))
        H, cs = model_matrices(m)
        drho = lindblad_action(H, cs, rho)
        d_alpha = np.trace(m.observables["a"].toarray() @ drho)
        d_sigma = np.einsum("injn->ij", drho.reshape(4, N + 1, 4, N + 1))
        out = sc_rhs(SCState(np.array([alpha]), sigma, ("g3", "g4", "e3", "e4")), p)
        assert out.alpha[0] == pytest.approx(d_alpha, abs=1e-9)
        np.testing.assert_allclose(out.sigma, d_sigma, atol=1e-9)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_jacobian_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        sysm = _system(CS)
        x = sysm.pack([complex(*rng.normal(size=2)) * 0.1], random_atom(rng))
        J = sysm.jacobian(0.0, x)
        h = 1e-6
        fd = np.column_stack([(sysm.rhs(0, x + h * e) - sysm.rhs(0, x - h * e)) / (2 * h)
                              for e in np.eye(len(x))])
        np.testing.assert_allclose(J, fd, atol=1e-6 * np.abs(J).max())

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_trace_conserved(self, seed):
        rng = np.random.default_rng(seed)
        out = sc_rhs(SCState(np.array([0.3 + 0.1j]), random_atom(rng), ()), CS)
        assert abs(np.trace(out.sigma)) < 1e-12
        np.testing.assert_allclose(out.sigma, out.sigma.conj().T, atol=1e-12)


class TestSteady:
    def test_no_pump_fixed_point(self):
        st_ = sc_steady(CS.with_intensities(I3=0.0))
        assert st_.photons == 0.0
        assert st_.populations["g3"] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("I3", [1.5, 3.0])
    def test_lasing_fixed_point(self, I3):
        p = CS.with_intensities(I3=I3)
        s = sc_steady(p)
        assert s.photons > 0
        d = sc_rhs(s, p)
        assert np.abs(d.alpha).max() < 1e-8 * np.sqrt(s.photons) * p.g43
        assert np.abs(d.sigma).max() < 1e-8 * p.g43
        assert sum(s.populations.values()) == pytest.approx(1.0, abs=1e-12)

    def test_population_inversion_at_threshold(self):
        s = sc_steady(CS.with_intensities(I3=0.9))
        assert s.populations["e3"] > s.populations["g4"]

    def test_growth_rate_sign(self):
        assert field_growth_rate(CS, I3=0.3) < 0
        assert field_growth_rate(CS, I3=2.0) > 0
        assert field_growth_rate(CS, I3=20.0) < 0


class TestScan:
    def test_continuation_has_no_hysteresis(self):
        grid = np.linspace(0.0, 10.0, 51)
        scan = sc_scan(CS, grid, bidirectional=True)
        assert not scan.hysteresis

    def test_knee_and_linear_window_agree(self):
        grid = np.linspace(0.0, 10.0, 101)
        knee, quench = knee_and_quench(sc_scan(CS, grid))
        onset, stop = lasing_window(CS)
        assert abs(knee - onset) < 0.05
        assert abs(quench - stop) < 0.05

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            sc_scan(CS, [1.0, 0.5])

    @given(st.floats(1.0, 5000), st.floats(0.0, 8.0))
    @settings(max_examples=25, deadline=None)
    def test_scaling_invariance(self, f, I3):
        a = sc_steady(CS, I3=I3)
        p = scale_cavity(CS, f)
        b = sc_steady(p, I3=I3)
        n0, n0f = critical_numbers(CS).n0, critical_numbers(p).n0
        assert b.photons / n0f == pytest.approx(a.photons / n0, rel=1e-7, abs=1e-9)
        for k, v in a.populations.items():
            assert b.populations[k] == pytest.approx(v, abs=1e-8)

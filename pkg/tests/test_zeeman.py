import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneatomlaser import constants as C
from oneatomlaser.zeeman import (ATOM_LABELS, ConstantPhase, ConstantVelocity, ZeemanParams, build_zeeman,
                                 cavity_coupling, I3_to_pump_ratio, level_slice, pseudo_field_hamiltonian,
                                 pump_hamiltonian, pump_ratio_to_I3, sigma_cartesian, sigma_q, velocity_to_omega)

from .oracles import cg_table, lindblad_action

PAIRS = ((3, 3), (3, 4), (4, 3), (4, 4))


def block(op, Fg, Fe):
    return op.toarray()[level_slice("g", Fg), level_slice("e", Fe)]


@pytest.fixture(scope="module")
def model():
    return build_zeeman(ZeemanParams.cs_defaults(I3=2.0))


class TestSigma:
    @pytest.mark.parametrize("Fg,Fe", PAIRS)
    @pytest.mark.parametrize("q", [-1, 0, 1])
    def test_matches_cg_table(self, Fg, Fe, q):
        table = cg_table(Fg, 1)
        s = block(sigma_q(Fg, Fe, q), Fg, Fe)
        for i, m in enumerate(range(-Fg, Fg + 1)):
            for j, mp in enumerate(range(-Fe, Fe + 1)):
                ref = table.get((m, q, Fe, mp), 0.0) if mp == m + q else 0.0
                assert s[i, j] == pytest.approx(ref, abs=1e-12)

    @pytest.mark.parametrize("Fg,Fe", PAIRS)
    def test_only_ground_excited_block(self, Fg, Fe):
        full = sigma_q(Fg, Fe, 0).toarray()
        mask = np.zeros_like(full, dtype=bool)
        mask[level_slice("g", Fg), level_slice("e", Fe)] = True
        assert not np.any(full[~mask])

    @pytest.mark.parametrize("Fg,Fe", PAIRS)
    @pytest.mark.parametrize("q", [-1, 0, 1])
    def test_excited_product_diagonal(self, Fg, Fe, q):
        s = sigma_q(Fg, Fe, q).toarray()
        prod = s.conj().T @ s
        np.testing.assert_allclose(prod, np.diag(np.diag(prod)), atol=1e-14)

    @pytest.mark.parametrize("Fg,Fe", PAIRS)
    def test_ground_weights(self, Fg, Fe):
        total = sum(sigma_q(Fg, Fe, q).toarray() @ sigma_q(Fg, Fe, q).toarray().conj().T for q in (-1, 0, 1))
        table = cg_table(Fg, 1)
        sl = level_slice("g", Fg)
        w = [sum(table.get((m, q, Fe, m + q), 0.0) ** 2 for q in (-1, 0, 1)) for m in range(-Fg, Fg + 1)]
        np.testing.assert_allclose(np.diag(total)[sl].real, w, atol=1e-12)
        np.testing.assert_allclose(total, np.diag(np.diag(total)), atol=1e-14)

    def test_cartesian_combinations(self):
        s = sigma_cartesian(4, 3)
        sp1, s0, sm1 = (sigma_q(4, 3, q).toarray() for q in (1, 0, -1))
        np.testing.assert_allclose(s["x"].toarray(), -(sp1 - sm1) / math.sqrt(2))
        np.testing.assert_allclose(s["y"].toarray(), 1j * (sp1 + sm1) / math.sqrt(2))
        np.testing.assert_allclose(s["z"].toarray(), s0)

    @pytest.mark.parametrize("pair,q", [((3, 5), 0), ((3, 3), 2)])
    def test_invalid(self, pair, q):
        with pytest.raises(ValueError):
            sigma_q(*pair, q)


class TestPump:
    def test_zero_phase_keeps_y_term(self):
        h = pump_hamiltonian(2.0, (3, 3), 0.0, 0.0).toarray()
        y = sigma_cartesian(3, 3)["y"].toarray()
        np.testing.assert_allclose(h, 2.0 * (y + y.conj().T), atol=1e-14)

    def test_quarter_phase_keeps_xz_terms(self):
        h = pump_hamiltonian(2.0, (4, 4), math.pi / 2, math.pi / 2).toarray()
        s = sigma_cartesian(4, 4)
        ref = 2.0 / (2 * math.sqrt(2)) * sum(s[k].toarray() + s[k].toarray().conj().T for k in ("x", "z"))
        np.testing.assert_allclose(h, ref, atol=1e-14)

    @given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(0, 50))
    @settings(max_examples=25, deadline=None)
    def test_hermitian(self, tx, tz, om):
        assert pump_hamiltonian(om, (3, 3), tx, tz).is_hermitian()


class TestPseudoField:
    def test_zero_field(self):
        assert pseudo_field_hamiltonian(0.0).nnz == 0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            pseudo_field_hamiltonian(-0.1)

    @pytest.mark.parametrize("kind,F", [("g", 4), ("g", 3), ("e", 4)])
    def test_zeeman_ladder(self, kind, F):
        B = 0.75
        sl = level_slice(kind, F)
        ev = np.linalg.eigvalsh(pseudo_field_hamiltonian(B).toarray()[sl, sl])
        step = C.mhz(C.BOHR_MAGNETON_MHZ_PER_G * abs(C.CS_G_FACTORS[(kind, F)]) * B)
        np.testing.assert_allclose(ev, step * np.arange(-F, F + 1), atol=1e-12)

    def test_f4_splitting_value(self):
        sl = level_slice("g", 4)
        ev = np.linalg.eigvalsh(pseudo_field_hamiltonian(0.75).toarray()[sl, sl])
        assert C.to_mhz(ev[1] - ev[0]) == pytest.approx(0.262, abs=0.001)


class TestModel:
    def test_dimension(self, model):
        assert model.dim == 288
        assert model.space.factors[0].labels == ATOM_LABELS
        assert model.cavity_channels == ("cavity_a", "cavity_b")

    def test_truncation_validated(self):
        with pytest.raises(ValueError):
            ZeemanParams(fock_truncation=0)

    def test_decay_sum_rule(self, model):
        total = sum(c.op.toarray().conj().T @ c.op.toarray() for c in model.collapse if not c.cavity)
        d = np.diag(total).real
        nf = 9
        for F in (3, 4):
            sl = level_slice("e", F)
            rates = d[np.arange(sl.start, sl.stop) * nf]
            np.testing.assert_allclose(rates, 2 * C.CS_GAMMA, rtol=1e-10)
        for F in (3, 4):
            sl = level_slice("g", F)
            assert np.all(d[np.arange(sl.start, sl.stop) * nf] == 0)
        np.testing.assert_allclose(total, np.diag(d), atol=1e-12)

    @given(st.floats(0, 5))
    @settings(max_examples=5, deadline=None)
    def test_hamiltonian_hermitian(self, t):
        p = ZeemanParams.cs_defaults(I3=2.0, phase_model=ConstantVelocity(0.1, 0.2, 0.3, 0.4, 12.0, 17.0))
        assert build_zeeman(p).hamiltonian(t).is_hermitian()

    def test_trace_preserving(self, model):
        rng = np.random.default_rng(3)
        d = model.dim
        m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        rho = m @ m.conj().T
        rho /= np.trace(rho)
        H = model.hamiltonian(0.37).toarray()
        cs = [c.op.toarray() for c in model.collapse]
        assert abs(np.trace(lindblad_action(H, cs, rho))) < 1e-10

    def test_constant_phase_static_except_offresonant(self):
        p = ZeemanParams.cs_defaults(I3=2.0, include_offresonant_e4=False)
        assert not build_zeeman(p).is_time_dependent
        assert build_zeeman(ZeemanParams.cs_defaults(I3=2.0)).is_time_dependent

    def test_one_excitation_splitting(self):
        """Eigenvalues of the resonant coupling on |e3', 0> + |g4, 1_a or 1_b> are the singular values
        of the CG-weighted dipole matrix."""
        p = ZeemanParams.cs_defaults(include_offresonant_e4=False, B_pseudo=0.0)
        H = cavity_coupling(p)[0].op.toarray()
        nf = 9
        e3 = [i * nf for i in range(level_slice("e", 3).start, level_slice("e", 3).stop)]
        g4 = level_slice("g", 4)
        # photon index is n_a (N+1) + n_b with N = 2
        one_a = [i * nf + 3 for i in range(g4.start, g4.stop)]
        one_b = [i * nf + 1 for i in range(g4.start, g4.stop)]
        idx = e3 + one_a + one_b
        sub = H[np.ix_(idx, idx)]
        ev = np.linalg.eigvalsh(sub)
        # independent construction of the dipole matrix from the lowering-operator CG table
        table = cg_table(4, 1)

        def comp(q):
            out = np.zeros((9, 7))
            for i, m in enumerate(range(-4, 5)):
                for j, mp in enumerate(range(-3, 4)):
                    if mp == m + q:
                        out[i, j] = table.get((m, q, 3, mp), 0.0)
            return out

        x = -(comp(1) - comp(-1)) / math.sqrt(2)
        z = comp(0)
        D = p.coupling(4, 3) * np.vstack([x, z])
        sv = np.linalg.svd(D, compute_uv=False)
        pos = np.sort(ev[ev > 1e-9])
        np.testing.assert_allclose(pos, np.sort(sv[sv > 1e-9]), rtol=1e-10)
        assert pos.max() <= p.g0

    def test_pump_ratio(self):
        assert I3_to_pump_ratio(pump_ratio_to_I3(0.17, 13.0), 13.0) == pytest.approx(0.17)
        p = ZeemanParams.from_pump_ratio(0.83, I4=13.0)
        assert 7 / 9 * (p.Omega3 / p.Omega4) ** 2 == pytest.approx(0.83)

    def test_velocity_phase_rates(self):
        lo, hi = velocity_to_omega(10.0), velocity_to_omega(20.0)
        assert C.to_mhz(lo) * 1e3 == pytest.approx(117, abs=1)
        assert C.to_mhz(hi) * 1e3 == pytest.approx(235, abs=1)

    @given(st.integers(0, 2 ** 32 - 1), st.booleans())
    @settings(max_examples=25, deadline=None)
    def test_random_velocity(self, seed, independent):
        pm = ConstantVelocity.random(np.random.default_rng(seed), independent_axes=independent)
        th = np.array([pm.theta0_3x, pm.theta0_3z, pm.theta0_4x, pm.theta0_4z])
        assert np.all((th >= 0) & (th < 2 * math.pi))
        if independent:
            assert 10 <= pm.v_x <= 20 and 10 <= pm.v_z <= 20
        else:
            assert 10 - 1e-9 <= math.hypot(pm.v_x, pm.v_z) <= 20 + 1e-9

    def test_constant_phase_default(self):
        assert ConstantPhase().theta == pytest.approx(math.pi / 2)

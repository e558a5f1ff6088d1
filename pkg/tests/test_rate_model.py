import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from vbspin import rate_model as rm
from vbspin.core import E_0, G_0, S, DegeneracyError, ElectronicRates, get_preset

rate_sets = st.builds(
    ElectronicRates,
    gamma_P=st.floats(0, 200),
    gamma_E=st.floats(1, 2000),
    gamma_ISC=st.floats(0, 2000),
    gamma_s=st.floats(0.1, 100),
    r=st.floats(0, 1),
    k=st.floats(0, 1),
    gamma_1=st.floats(0, 1),
)


@given(rate_sets, st.floats(0, 50), st.floats(0, 50))
def test_columns_conserve_and_offdiagonals_nonnegative(rates, op, om):
    M = rm.build_rate_matrix(rates, (op, om))
    assert np.abs(M.sum(axis=0)).max() <= 1e-12 * max(1.0, np.abs(M).max())
    off = M - np.diag(np.diag(M))
    assert off.min() >= 0


def test_matrix_entries(this_work):
    r = this_work.replace(r=0.04)
    M = rm.build_rate_matrix(r)
    assert M[E_0, E_0] == pytest.approx(-(r.gamma_E + r.r * r.gamma_ISC + r.gamma_1))
    assert M[S, S] == pytest.approx(-(1 + 2 * r.k) * r.gamma_s)
    P = rm.build_rate_matrix(r.replace(gamma_P=20.0))
    assert P[G_0, G_0] == pytest.approx(-(20.0 + r.gamma_1))


def test_ground_state_stationary_without_pumping(this_work):
    M = rm.build_rate_matrix(this_work.replace(gamma_P=0.0, gamma_1=0.0))
    assert np.abs(M @ rm.basis_state("g0")).max() == 0.0


@pytest.mark.parametrize("label, tau", [("e0", 1.178), ("e-1", 0.468)])
def test_excited_lifetimes(this_work, label, tau):
    M = rm.build_rate_matrix(this_work)
    t = np.linspace(0, 5, 2001)
    tr = rm.evolve_populations(M, rm.basis_state(label), t)
    idx = ["g+1", "g0", "g-1", "e+1", "e0", "e-1", "s"].index(label)
    pop = tr.states[:, idx]
    t_e = np.interp(-np.exp(-1.0), -pop, t)  # pop is decreasing
    assert t_e == pytest.approx(tau, abs=2e-3)


def test_null_generator_constant():
    p0 = rm.unpolarized_ground()
    tr = rm.evolve_populations(np.zeros((7, 7)), p0, [0.0, 1.0, 100.0])
    assert np.all(tr.states == p0)


def test_evolve_rejects_bad_input(this_work):
    M = rm.build_rate_matrix(this_work)
    with pytest.raises(ValueError):
        rm.evolve_populations(M, np.ones(7), [0.0, 1.0])
    bad = M.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        rm.evolve_populations(bad, rm.basis_state("g0"), [0.0, 1.0])
    with pytest.raises(ValueError):
        rm.evolve_populations(M, rm.basis_state("g0"), [1.0, 0.0])


@given(rate_sets.filter(lambda r: r.gamma_P > 0.01 or r.gamma_1 > 0.01))
def test_trajectory_conservation_and_positivity(rates):
    M = rm.build_rate_matrix(rates)
    tr = rm.evolve_populations(M, rm.unpolarized_ground(), np.linspace(0, 2000, 41))
    rm.check_populations(tr.states, atol_sum=1e-9, min_value=-1e-9)


def test_steady_state_against_dense_nullspace(this_work):
    M = rm.build_rate_matrix(this_work.replace(gamma_P=20.0))
    p = rm.steady_state(M)
    assert np.abs(M @ p).max() <= 1e-10
    ns = sla.null_space(M)
    assert ns.shape[1] == 1
    q = ns[:, 0] / ns[:, 0].sum()
    assert np.abs(p - q).max() < 1e-12
    assert p.min() >= 0


def test_steady_state_pure_t1_uniform_ground(this_work):
    p = rm.steady_state(rm.build_rate_matrix(this_work.replace(gamma_P=0.0, gamma_1=0.1)))
    assert p[:3] == pytest.approx([1 / 3] * 3, abs=1e-12)
    assert p[3:].sum() == pytest.approx(0.0, abs=1e-12)


def test_steady_state_degenerate():
    with pytest.raises(DegeneracyError):
        rm.steady_state(rm.build_rate_matrix(ElectronicRates(gamma_P=0.0, gamma_1=0.0)))


@given(rate_sets.filter(lambda r: r.gamma_P > 0.5 and r.gamma_ISC > 1 and r.gamma_1 > 0.01))
def test_long_time_limit_matches_steady_state(rates):
    M = rm.build_rate_matrix(rates)
    ev = np.sort(np.abs(np.linalg.eigvals(M)))
    slowest = ev[ev > 1e-9 * ev.max()][0]
    t_long = 100.0 / slowest * 1e3  # ns
    p_t = rm.evolve_populations(M, rm.basis_state("g0"), [0.0, t_long]).states[-1]
    assert np.abs(p_t - rm.steady_state(M)).max() < 1e-6


def test_polarization_examples():
    assert rm.polarization(rm.basis_state("g0")) == 1.0
    assert rm.polarization(rm.unpolarized_ground()) == pytest.approx(1 / 3)
    assert rm.polarization([0, 0.5, 0, 0, 0.4, 0, 0.1]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rm.polarization(rm.basis_state("s"))


def test_polarization_at_20mhz(this_work):
    p = rm.steady_state(rm.build_rate_matrix(this_work.replace(gamma_P=20.0)))
    assert rm.polarization(p) >= 0.95


def test_polarization_monotone_in_pumping(this_work):
    r = this_work.replace(r=0.0, gamma_1=1e-6)
    grid = np.logspace(-1, np.log10(200), 40)
    pol = [rm.polarization(rm.steady_state(rm.build_rate_matrix(r.replace(gamma_P=g)))) for g in grid]
    assert np.all(np.diff(pol) >= -1e-12)


def test_polarization_ordering_against_other_presets(this_work):
    def pol(r, gp):
        return rm.polarization(rm.steady_state(rm.build_rate_matrix(r.replace(gamma_P=gp))))

    ours = pol(this_work, 20.0)
    for name in ("vb-whitefield", "vb-jacques", "vb-baber"):
        assert ours > pol(get_preset(name), 20.0)
    assert ours > pol(get_preset("nv"), 2.0)


def test_odmr_contrast(this_work):
    assert rm.odmr_contrast(this_work, 0.0, 20.0) == 0.0
    assert rm.odmr_contrast(this_work.replace(r=0.04), 1e4, 20.0) == pytest.approx(0.40, abs=0.03)
    omegas = np.logspace(-2, 4, 40)
    c = [rm.odmr_contrast(this_work, om, 20.0) for om in omegas]
    assert np.all(np.diff(c) >= -1e-12)
    with pytest.raises(ValueError):
        rm.odmr_contrast(this_work, 1.0, 0.0)


def test_differential_decay(this_work):
    assert rm.differential_decay(this_work, [0.0])[0] == 0.0
    tp = rm.differential_peak_time(this_work)
    assert tp == pytest.approx(0.71, abs=0.01)
    t = np.linspace(0, 3, 30001)
    assert t[np.argmax(rm.differential_decay(this_work, t))] == pytest.approx(tp, abs=1e-3)
    with pytest.raises(ValueError):
        rm.differential_decay(this_work, [-1.0])


def test_differential_matches_population_oracle(this_work):
    r = this_work.replace(gamma_1=0.0)
    M = rm.build_rate_matrix(r)
    t = np.linspace(0, 10, 201)
    a = rm.evolve_populations(M, rm.basis_state("e0"), t).excited()
    b = rm.evolve_populations(M, rm.basis_state("e-1"), t).excited()
    assert np.abs((a - b) - rm.differential_decay(r, t)).max() < 1e-8


def test_trajectory_csv(tmp_path, this_work):
    tr = rm.evolve_populations(rm.build_rate_matrix(this_work), rm.basis_state("g0"), [0.0, 1.0])
    p = tmp_path / "t.csv"
    tr.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t_ns,g+1,g0,g-1,e+1,e0,e-1,s"
    assert len(lines) == 3

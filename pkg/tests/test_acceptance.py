"""Acceptance criteria C1-C8.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion at the end of the run.  Details are attached with
``record_property("detail", ...)`` so they show up even when a test fails.

The 14N grid points (C5 coarse check, C6) are expensive, so they are read
from ``tests/.sweep_cache`` through the same resumable sweep machinery the
CLI uses.  A missing point is recomputed (several minutes each).
"""

import time
from pathlib import Path

import numpy as np
import pytest

from vbspin import rate_model as rm
from vbspin.cli import parse_range, run_sweep, sweep_settings
from vbspin.core import ISOTOPE_RATIO, ElectronicRates, MagneticField, get_preset, get_system
from vbspin.fitting import (
    FitProblem,
    FitSettings,
    fit,
    fit_exponential,
    fit_nv,
    synthetic_nv_suite,
    synthetic_vb_suite,
)
from vbspin.instrument import FIDELITY_14N, FIDELITY_15N, Instrument
from vbspin.lindblad import (
    LindbladModel,
    check_state,
    field_sweep,
    find_dip,
    maximally_mixed_ground,
    state_from_populations,
)
from vbspin.protocols import (
    cw_odmr_spectrum,
    excited_state_differential_protocol,
    peak_asymmetry,
    pl_time_trace_protocol,
    spin_resolved_protocol,
)

CACHE = Path(__file__).parent / ".sweep_cache"
ALPHA_14N, ALPHA_15N, ALPHA_PL = 1.319, 1.649, 1.864
ESLAC_POWER_MW = 45.0
TOL = dict(trace_tol=1e-8, herm_tol=1e-10, pos_tol=-1e-8)


def _pol(rates, gamma_P):
    return rm.polarization(rm.steady_state(rm.build_rate_matrix(rates.replace(gamma_P=gamma_P))))


# ------------------------------------------------------------ C1


@pytest.mark.criterion("C1")
def test_c1_lifetimes(this_work, record_property):
    start = time.perf_counter()
    M = rm.build_rate_matrix(this_work)
    t = np.linspace(0.0, 6.0, 601)
    for label, idx, tau in (("e0", 4, this_work.tau0), ("e-1", 5, this_work.tau1)):
        tr = rm.evolve_populations(M, rm.basis_state(label), t)
        rm.check_populations(tr.states, atol_sum=1e-9, min_value=-1e-8)
        fitted, _ = fit_exponential(t, tr.states[:, idx])
        record_property("detail", f"tau({label}) = {fitted:.4f} ns vs {tau:.4f}")
        assert fitted == pytest.approx(tau, rel=0.01)
    assert this_work.tau0 == pytest.approx(1.178, abs=5e-4)
    assert this_work.tau1 == pytest.approx(0.468, abs=5e-4)
    assert abs(this_work.tau0 - 1.18) <= 0.09 and abs(this_work.tau1 - 0.47) <= 0.05
    assert time.perf_counter() - start < 1.0


# ------------------------------------------------------------ C2


@pytest.mark.criterion("C2")
def test_c2_polarization(this_work, record_property):
    start = time.perf_counter()
    for r in (0.0, 0.04):
        p = _pol(this_work.replace(r=r), 20.0)
        record_property("detail", f"p(r={r:g}) = {p:.4f}")
        assert p >= 0.95
    ours = _pol(this_work.replace(r=0.0), 20.0)
    for name in ("vb-whitefield", "vb-jacques", "vb-baber"):
        assert ours > _pol(get_preset(name), 20.0)
    nv = _pol(get_preset("nv"), 2.0)
    record_property("detail", f"NV p = {nv:.4f}")
    assert ours > nv
    assert time.perf_counter() - start < 1.0


# ------------------------------------------------------------ C3


@pytest.mark.criterion("C3")
def test_c3_odmr_contrast(this_work, record_property):
    start = time.perf_counter()
    c = rm.odmr_contrast(this_work.replace(r=0.04), 1e4, 20.0)
    record_property("detail", f"C(r=0.04, 20 MHz) = {c:.3f}")
    assert c == pytest.approx(0.40, abs=0.03)
    grid = [5.0, 10.0, 20.0, 40.0, 60.0, 80.0]
    best = max(rm.odmr_contrast(this_work.replace(r=0.0), 1e4, g) for g in grid)
    record_property("detail", f"max C(r=0) = {best:.3f}")
    assert best > 0.46
    assert time.perf_counter() - start < 1.0


# ------------------------------------------------------------ C4


@pytest.mark.criterion("C4")
def test_c4_rate_model_oracle(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    cfg = get_system("vb-15n").without_hyperfine()
    t = np.linspace(0.0, 400.0, 100)
    worst = 0.0
    for _ in range(5):
        rates = ElectronicRates(
            gamma_P=rng.uniform(1, 60), gamma_E=rng.uniform(200, 1500), gamma_ISC=rng.uniform(200, 2000),
            gamma_s=rng.uniform(5, 50), r=rng.uniform(0, 0.5), k=rng.uniform(0, 1),
            gamma_1=rng.uniform(0, 0.5), gamma_2=rng.uniform(0, 20))
        model = LindbladModel(cfg, rates, MagneticField(rng.uniform(10, 150), 0.0))
        states = model.evolve(state_from_populations(rm.unpolarized_ground(), model.N), t)
        for s in states:
            check_state(s, **TOL)
        pops = np.array([s.level_populations() for s in states])
        ref = rm.evolve_populations(rm.build_rate_matrix(rates), rm.unpolarized_ground(), t).states
        worst = max(worst, float(np.abs(pops - ref).max()))
    record_property("detail", f"max deviation {worst:.2e}")
    assert worst < 1e-6
    assert time.perf_counter() - start < 60.0


# ------------------------------------------------------------ C5

BZ_15N = np.arange(60.0, 150.1, 2.0)
THETAS = (0.0, 1.0, 2.0)
LAC_WINDOW = (108.0, 140.0)


def _timescales(points, nb, nt):
    return np.array([p.timescale for p in points], float).reshape(nt, nb)


def _ordering(Bz, ts):
    """sign(B_peak - B_dip) of the timescale inside the GSLAC window."""
    w = (Bz >= LAC_WINDOW[0]) & (Bz <= LAC_WINDOW[1]) & np.isfinite(ts)
    Bw, tw = Bz[w], ts[w]
    return float(np.sign(Bw[np.argmax(tw)] - Bw[np.argmin(tw)]))


@pytest.fixture(scope="module")
def sweep_15n():
    cfg = get_system("vb-15n")
    rates = get_preset("vb-this-work").replace(gamma_P=20.0)
    pts = field_sweep(cfg, rates, BZ_15N, THETAS)
    return _timescales(pts, BZ_15N.size, len(THETAS))


@pytest.fixture(scope="module")
def sweep_mirror():
    cfg = get_system("vb-15n").rescale_nuclei(1.0 / ISOTOPE_RATIO)
    rates = get_preset("vb-this-work").replace(gamma_P=20.0)
    Bz = BZ_15N[(BZ_15N >= LAC_WINDOW[0]) & (BZ_15N <= LAC_WINDOW[1])]
    return Bz, _timescales(field_sweep(cfg, rates, Bz, [1.0]), Bz.size, 1)[0]


@pytest.mark.criterion("C5")
@pytest.mark.slow
def test_c5_lac_dips_15n(sweep_15n, record_property):
    eslac = [find_dip(BZ_15N, row, 65.0, 85.0) for row in sweep_15n]
    gslac = [find_dip(BZ_15N, row, 110.0, 138.0) for row in sweep_15n]
    record_property("detail", f"ESLAC dips {eslac}, GSLAC dips {gslac} (theta = 0, 1, 2 deg)")
    assert any(d is not None and abs(d - 75.0) <= 3.0 for d in eslac)
    assert any(d is not None and abs(d - 124.0) <= 3.0 for d in gslac)
    assert np.isfinite(sweep_15n).mean() > 0.9


@pytest.mark.criterion("C5")
@pytest.mark.slow
def test_c5_isotope_reversal(sweep_15n, sweep_mirror, record_property):
    s15 = _ordering(BZ_15N, sweep_15n[1])
    Bz, ts = sweep_mirror
    smir = _ordering(Bz, ts)
    record_property("detail", f"peak-dip order 15N {s15:+.0f}, mirrored {smir:+.0f}")
    assert s15 != 0 and smir == -s15


@pytest.mark.criterion("C5")
@pytest.mark.slow
def test_c5_coarse_14n(record_property):
    """Ten-point 14N grid across the GSLAC at 1 deg; ordering must match the mirrored tensors."""
    Bz = parse_range("112:130:2")
    cfg = get_system("vb-14n")
    rates = get_preset("vb-this-work").replace(gamma_P=20.0)
    pts, _ = run_sweep(cfg, rates, Bz, [1.0], sweep_settings(cfg, rates), CACHE / "vb-14n_theta1",
                       log=lambda *_: None)
    ts = np.array([p.timescale for p in pts])
    record_property("detail", "14N timescales " + " ".join(f"{b:.0f}:{v:.0f}" for b, v in zip(Bz, ts)))
    assert len(pts) == 10 and np.all(np.isfinite(ts))
    assert _ordering(Bz, ts) < 0


# ------------------------------------------------------------ C6


@pytest.fixture(scope="module")
def eslac_points():
    cfg = get_system("vb-14n")
    rates = get_preset("vb-this-work").replace(gamma_P=ALPHA_14N * ESLAC_POWER_MW)
    pts, _ = run_sweep(cfg, rates, np.array([32.0, 74.0]), [0.0], sweep_settings(cfg, rates),
                       CACHE / "vb-14n_eslac", log=lambda *_: None)
    return cfg, rates, pts


@pytest.mark.criterion("C6")
def test_c6_sign_consistency(eslac_points, record_property):
    cfg, rates, pts = eslac_points
    for p in pts:
        assert p.nuclear_pops is not None
        assert p.nuclear_pops.sum() == pytest.approx(1.0, abs=1e-9) and p.nuclear_pops.min() >= -1e-8
        B = MagneticField(p.Bz)
        center = cfg.D_gs - cfg.gamma_e * p.Bz
        spec = cw_odmr_spectrum(cfg, rates, B, np.linspace(center - 20, center + 20, 5), 5.0,
                                nuclear=p.nuclear_pops)
        asym = peak_asymmetry(spec)
        record_property("detail", f"B={p.Bz:.0f}: asymmetry {asym:+.3f}, <I_z> {np.mean(p.iz):+.4f}")
        assert np.sign(asym) == np.sign(np.mean(p.iz)) != 0


@pytest.mark.criterion("C6")
def test_c6_eslac_enhancement(eslac_points, record_property):
    _, _, (low, high) = eslac_points
    ratio = np.abs(high.iz) / np.abs(low.iz)
    record_property("detail", "|I_z(74)|/|I_z(32)| per nucleus " + " ".join(f"{v:.2f}" for v in ratio))
    assert np.all(np.sign(high.iz) == np.sign(low.iz))
    assert np.all(ratio >= 5.0)


# ------------------------------------------------------------ C7

VB_SAMPLES = {"14n": (ALPHA_14N, FIDELITY_14N), "15n": (ALPHA_15N, FIDELITY_15N)}


@pytest.mark.criterion("C7")
@pytest.mark.slow
def test_c7_vb_fit_recovery(this_work, record_property):
    start = time.perf_counter()
    ds = synthetic_vb_suite(this_work, [5.0, 10.0, 20.0, 30.0, 40.0], np.arange(0.0, 1501.0, 5.0),
                            VB_SAMPLES, noise=0.01, seed=7)
    assert sum(d.kind == "spin_resolved" for d in ds) == 30
    res = fit(FitProblem(ds), FitSettings(n_starts=3))
    errs = {
        "gamma_ISC": res.derived["gamma_ISC"] / this_work.gamma_ISC - 1,
        "gamma_E": res.derived["gamma_E"] / this_work.gamma_E - 1,
        "gamma_s": res.params["gamma_s"] / this_work.gamma_s - 1,
        "k": res.params["k"] / this_work.k - 1,
    }
    dr = res.params["r"] - this_work.r
    record_property("detail", " ".join(f"{k} {v:+.1%}" for k, v in errs.items()) + f" r {dr:+.3f}")
    assert res.ok
    assert all(abs(v) <= 0.10 for v in errs.values())
    assert abs(dr) <= 0.02
    assert time.perf_counter() - start < 600.0


@pytest.mark.criterion("C7")
def test_c7_nv_fit_recovery(record_property):
    nv = get_preset("nv")
    powers = [100 * 2 ** (k / 2) for k in range(8)]
    res = fit_nv(synthetic_nv_suite(nv, powers, np.linspace(0, 5000, 101), noise=0.01),
                 nv.gamma_s, nv.gamma_ISC)
    record_property("detail", f"NV r = {res.r:.3f} (truth {nv.r:.3f})")
    assert res.converged
    assert abs(res.r - 8 / 53) <= 0.05


# ------------------------------------------------------------ C8


@pytest.mark.criterion("C8")
def test_c8_checked_propagation(this_work, record_property):
    inst = Instrument()
    t = np.arange(0.0, 1501.0, 150.0)
    for engine in ("rate", "lindblad"):
        for ch in (0, 1, -1):
            spin_resolved_protocol(this_work, 20.0, ALPHA_14N, FIDELITY_14N, ch, t, engine, inst, check=True)
        pl_time_trace_protocol(this_work, 10.0, ALPHA_PL, engine, np.arange(0.0, 401.0, 20.0), check=True)
        excited_state_differential_protocol(this_work, engine=engine, check=True,
                                            times_ns=np.arange(-1.0, 10.0, 0.05))
    model = LindbladModel(get_system("vb-15n"), this_work.replace(gamma_P=20.0), MagneticField(124.0, 1.0))
    states = model.evolve(maximally_mixed_ground(model.N), np.arange(0.0, 601.0, 50.0))
    for s in states:
        check_state(s, **TOL)
    check_state(model.steady_state(), **TOL)
    record_property("detail", "rate and Lindblad engines, sweep trajectory and steady state")

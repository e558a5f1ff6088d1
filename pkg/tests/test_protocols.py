import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vbspin import rate_model as rm
from vbspin.core import MagneticField, get_system
from vbspin.instrument import FIDELITY_14N, BeamModel, FidelityModel, Instrument, IRFModel
from vbspin.lindblad import LindbladModel, crossing_time
from vbspin.protocols import (
    LindbladEngine,
    Laser,
    PiPulse,
    PulseSequence,
    RateEngine,
    Readout,
    SequenceRunner,
    Wait,
    cw_odmr_spectrum,
    default_differential_times,
    excited_state_differential_protocol,
    make_engine,
    nv_effective_model,
    nv_effective_rate,
    odmr_lines,
    peak_asymmetry,
    pl_time_trace_protocol,
    spin_resolved_protocol,
)
from vbspin.fitting import fit_differential

ALPHA_PL = 1.864
T_GRID = np.arange(0.0, 1501.0, 30.0)


def test_sequence_validation():
    with pytest.raises(ValueError):
        PulseSequence((Laser(1.0, math.inf),))
    with pytest.raises(ValueError):
        PulseSequence((Readout(), Laser(1.0, 5.0)))
    with pytest.raises(ValueError):
        PulseSequence((Laser(1.0, math.inf), PiPulse(0), Readout()))
    with pytest.raises(ValueError):
        PulseSequence((Laser(1.0, -1.0), Readout()))
    with pytest.raises(ValueError):
        SequenceRunner(RateEngine(rm.ElectronicRates()), 0.0).run(PulseSequence((Wait(1.0), Readout())))


def test_make_engine_rejects_unknown(this_work):
    with pytest.raises(ValueError):
        make_engine("monte-carlo", this_work)


# ------------------------------------------------------------ PL traces


def _saturation_time(rates, power, t_end=20000.0, step=5.0):
    tr = pl_time_trace_protocol(rates, power, ALPHA_PL, times_ns=np.arange(0, t_end + 1, step),
                                instrument=Instrument.ideal())
    # skip the prompt excitation jump, time the slow approach
    return crossing_time(tr.times, tr.signal / tr.signal[-1], 1 - math.exp(-1), baseline="transient")


def test_pl_trace_low_power_scaling(this_work):
    # without T1 the slow approach is set by pumping alone
    no_t1 = this_work.replace(gamma_1=0.0)
    t1 = _saturation_time(no_t1, 0.1, 200000.0, 20.0)
    t2 = _saturation_time(no_t1, 0.2, 200000.0, 20.0)
    assert t1 / t2 == pytest.approx(2.0, rel=0.05)
    # with T1 the inverse timescale is affine in the pumping rate
    inv = [1 / _saturation_time(this_work, p, 100000.0, 10.0) for p in (0.1, 0.2, 0.4)]
    assert inv[2] - inv[1] == pytest.approx(2 * (inv[1] - inv[0]), rel=0.1)


def test_pl_trace_high_power_saturates(this_work):
    powers = np.array([20.0, 40.0, 80.0, 160.0, 320.0, 640.0])
    ts = np.array([_saturation_time(this_work, p, 3000.0, 0.5) for p in powers])
    slopes = -np.diff(ts) / np.diff(powers)
    assert np.all(slopes > 0)
    assert slopes[-1] < 0.02 * slopes[0]
    assert ts[-1] > 40.0  # bounded below by the singlet cycle


def test_pl_trace_starts_unpolarized(this_work):
    tr = pl_time_trace_protocol(this_work, 10.0, ALPHA_PL, times_ns=[0.0, 1.0], background=0.3)
    assert tr.signal[0] == pytest.approx(0.3)
    assert tr.metadata["protocol"] == "pl_trace"
    with pytest.raises(ValueError):
        pl_time_trace_protocol(this_work, 0.0, ALPHA_PL)


# ------------------------------------------------------------ spin-resolved


def test_plus_one_channel_rises(this_work):
    m = spin_resolved_protocol(this_work, 20.0, 1.319, 1.0, +1, T_GRID)
    assert m.signal[0] < m.signal[-1]


@pytest.mark.parametrize("gamma_P", [40.0, 60.0])
def test_minus_one_channel_nonmonotonic_at_high_power(this_work, gamma_P):
    t = np.arange(0.0, 1501.0, 5.0)
    m = spin_resolved_protocol(this_work, gamma_P / 1.319, 1.319, FIDELITY_14N, -1, t)
    k = int(np.argmin(m.signal))
    assert 0 < k < t.size - 1
    assert m.signal[0] - m.signal[k] > 1e-3 * m.signal[0]
    assert m.signal[-1] - m.signal[k] > 1e-3 * m.signal[0]


def test_perfect_swap_bookkeeping(this_work):
    inst = Instrument.ideal()
    m = spin_resolved_protocol(this_work, 15.0, 1.319, 1.0, -1, [0.0], instrument=inst)
    runner = SequenceRunner(RateEngine(this_work), 1.319)
    ref = runner.run(PulseSequence((Laser(15.0, math.inf), Readout(inst.readout_window_ns))))
    assert m.signal[0] == pytest.approx(ref, rel=1e-12)


def test_zero_fidelity_channels_coincide(this_work):
    out = [spin_resolved_protocol(this_work, 15.0, 1.319, 0.0, ch, T_GRID).signal for ch in (0, 1, -1)]
    assert np.abs(out[0] - out[1]).max() < 1e-12 and np.abs(out[0] - out[2]).max() < 1e-12
    assert np.ptp(out[0]) < 1e-12


def test_spin_resolved_validation(this_work):
    with pytest.raises(ValueError):
        spin_resolved_protocol(this_work, 10.0, 1.0, 1.0, 2, T_GRID)
    with pytest.raises(ValueError):
        spin_resolved_protocol(this_work, 10.0, 1.0, 1.0, 0, [-1.0])


# ------------------------------------------------------------ differential


def test_differential_zero_for_equal_branching(this_work):
    m = excited_state_differential_protocol(this_work.replace(r=1.0))
    assert np.abs(m.signal).max() < 1e-12


def test_differential_starts_at_zero_before_irf(this_work):
    m = excited_state_differential_protocol(this_work, irf=None, times_ns=[0.0, 0.5])
    assert m.signal[0] == 0.0 and m.signal[1] > 0


def test_differential_matches_analytic(this_work):
    t = default_differential_times()
    m = excited_state_differential_protocol(this_work.replace(gamma_1=0.0), irf=None, times_ns=t)
    ref = np.where(t >= 0, rm.differential_decay(this_work.replace(gamma_1=0.0), np.clip(t, 0, None)), 0.0)
    assert np.abs(m.signal - ref).max() < 1e-9


def test_differential_recovers_lifetimes(this_work):
    m = excited_state_differential_protocol(this_work)
    f = fit_differential(m.times, m.signal, IRFModel(), guess=(1.0, 0.6))
    assert f["tau0"] == pytest.approx(1.178, abs=0.01)
    assert f["tau1"] == pytest.approx(0.468, abs=0.01)


# ------------------------------------------------------------ numerics


def test_grid_refinement(this_work):
    coarse = excited_state_differential_protocol(this_work, times_ns=default_differential_times(0.005))
    fine = excited_state_differential_protocol(this_work, times_ns=default_differential_times(0.0025))
    peak = np.abs(coarse.signal).max()
    assert np.abs(fine.signal[::2] - coarse.signal).max() < 1e-6 * peak
    t = np.arange(0.0, 301.0, 5.0)
    a = pl_time_trace_protocol(this_work, 10.0, ALPHA_PL, times_ns=t, magnus_step_ns=0.25)
    b = pl_time_trace_protocol(this_work, 10.0, ALPHA_PL, times_ns=t, magnus_step_ns=0.125)
    assert np.abs(a.signal - b.signal).max() < 1e-6 * a.signal.max()


def test_engine_equivalence(this_work):
    lind = LindbladEngine(this_work)
    rate = RateEngine(this_work)
    t = np.arange(0.0, 601.0, 60.0)
    pairs = [
        lambda e: pl_time_trace_protocol(this_work, 10.0, ALPHA_PL, engine=e, times_ns=t).signal,
        lambda e: spin_resolved_protocol(this_work, 10.0, 1.319, FidelityModel(0.615, -0.00341), -1, t,
                                         engine=e).signal,
        lambda e: excited_state_differential_protocol(this_work, engine=e,
                                                      times_ns=np.arange(-1, 6, 0.02)).signal,
    ]
    for fn in pairs:
        a, b = fn(rate), fn(lind)
        assert np.abs(a - b).max() < 1e-5 * np.abs(a).max()


def test_check_paths_run(this_work):
    t = np.arange(0.0, 101.0, 20.0)
    pl_time_trace_protocol(this_work, 10.0, ALPHA_PL, times_ns=t, check=True)
    spin_resolved_protocol(this_work, 10.0, 1.319, 0.6, 1, t, engine=LindbladEngine(this_work), check=True)


# ------------------------------------------------------------ ODMR


@pytest.mark.parametrize("iso, counts", [("vb-14n", [1, 3, 6, 7, 6, 3, 1]), ("vb-15n", [1, 3, 3, 1])])
def test_odmr_line_combinatorics(iso, counts):
    cfg = get_system(iso)
    N = int(np.prod(cfg.nuclear_dims))
    lines = odmr_lines(cfg, MagneticField(32.0), np.full(N, 1.0 / N))
    for tr in (-1, 1):
        w = sorted((ln.m_sum, ln.weight) for ln in lines if ln.transition == tr)
        assert len(w) == len(counts)
        assert [x[1] for x in w] == pytest.approx(np.array(counts) / N)


@given(st.lists(st.floats(0.01, 1.0), min_size=8, max_size=8))
def test_odmr_weight_conservation(raw):
    cfg = get_system("vb-15n")
    pops = np.asarray(raw) / np.sum(raw)
    lines = odmr_lines(cfg, MagneticField(74.0), pops)
    for tr in (-1, 1):
        assert sum(ln.weight for ln in lines if ln.transition == tr) == pytest.approx(1.0, abs=1e-6)


def test_odmr_spectrum_contrast_and_asymmetry(this_work):
    cfg = get_system("vb-14n", n_nuclei=1)
    rates = this_work.replace(gamma_P=60.0)
    B = MagneticField(74.0)
    center = cfg.D_gs - cfg.gamma_e * 74.0
    freqs = np.linspace(center - 150, center + 150, 61)
    spec = cw_odmr_spectrum(cfg, rates, B, freqs, omega=5.0)
    assert spec.contrast.max() > 0 and np.all(spec.contrast >= -1e-12)
    model = LindbladModel(cfg, rates, B)
    iz = model.nuclear_polarization(model.steady_state())[0]
    assert abs(peak_asymmetry(spec)) > 0.1
    assert np.sign(peak_asymmetry(spec)) == np.sign(iz)
    flat = cw_odmr_spectrum(cfg, rates, B, freqs, omega=5.0, nuclear="uniform")
    assert peak_asymmetry(flat) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cw_odmr_spectrum(cfg, rates, B, freqs, omega=-1.0)


# ------------------------------------------------------------ NV model


def test_nv_limits():
    t = np.array([0.0, 1e9])
    y = nv_effective_model(0.24, 9.0, 200.0, t, pl_ss=2.5)
    assert y[0] == 0.0 and y[1] == pytest.approx(2.5)
    uni = nv_effective_model(0.24, 9.0, 200.0, t, pl_ss=2.5, beam=BeamModel.uniform())
    assert uni[1] == pytest.approx(2.5)


def test_nv_conventions():
    assert nv_effective_rate(0.5, 4.0, 2.0, "sum") == pytest.approx(5.0)
    assert nv_effective_rate(0.5, 4.0, 2.0, "literal") == pytest.approx(0.2)
    assert nv_effective_rate(0.5, 4.0, 2.0, "harmonic") == pytest.approx(0.8)
    big = nv_effective_rate(0.5, 4.0, 1e9, "harmonic")
    assert big == pytest.approx(4.0, rel=1e-6)
    with pytest.raises(ValueError):
        nv_effective_rate(0.5, 4.0, 2.0, "product")
    with pytest.raises(ValueError):
        nv_effective_model(0.0, 4.0, 1.0, [0.0])

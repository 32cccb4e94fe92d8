import numpy as np
import pytest

from mqem import mitigate as mt
from mqem.complexla import SIGMA_MINUS, SIGMA_X, trace_distance
from mqem.jumps import EngineSpec, JumpEvent, TrajectoryRecord, run_ensemble
from mqem.models import Channel, NoiseModel, RateFunction, all_up_state, build_local_noise, heisenberg_model
from mqem.propagate import integrate, unitary_states

EXCITED = np.array([0, 1], dtype=complex)


def two_level_run(rate=0.1, **kw):
    model = NoiseModel(2, 0.5 * SIGMA_X, (Channel(SIGMA_MINUS, RateFunction.const(rate)),))
    opts = dict(t_end=2.0, dt=0.01, output_dt=0.2, n_trajectories=10_000, master_seed=1)
    opts.update(kw)
    return mt.MitigationRun(model, EXCITED, **opts)


class TestInjection:
    def test_zero_strength_is_identity(self):
        chans = build_local_noise(0.001, 0.001)
        rng = np.random.default_rng(0)
        assert mt.inject_lindblad_errors(chans, 0.0, rng) == chans
        rates = [c.rate for c in chans]
        assert mt.inject_rate_errors(rates, 0.0, rng) == rates
        recs = [TrajectoryRecord(0, [JumpEvent(1.0, 0)])]
        assert mt.inject_jump_time_errors(recs, 0.0, 0.001, rng, 50.0) == recs

    def test_lindblad_errors_stay_on_site(self):
        chans = build_local_noise(0.001, 0.001)
        sites = [0, 1, 2, 3] * 2
        out = mt.inject_lindblad_errors(chans, 1.0, np.random.default_rng(3), sites)
        for k, (a, b) in enumerate(zip(chans, out)):
            diff = (b.lindblad - a.lindblad).reshape([2] * 8)
            # the change acts as identity on every other site
            others = [s for s in range(4) if s != sites[k]]
            for s in others:
                sub = np.moveaxis(diff, (s, 4 + s), (0, 1))
                assert np.allclose(sub[0, 1], 0) and np.allclose(sub[1, 0], 0)
                assert np.allclose(sub[0, 0], sub[1, 1])
            assert np.all(b.rate(0.0) == a.rate(0.0))

    def test_determinism(self):
        chans = build_local_noise(0.001, 0.001)
        a = mt.inject_lindblad_errors(chans, 0.5, np.random.default_rng(7), [0, 1, 2, 3] * 2)
        b = mt.inject_lindblad_errors(chans, 0.5, np.random.default_rng(7), [0, 1, 2, 3] * 2)
        assert all(np.array_equal(x.lindblad, y.lindblad) for x, y in zip(a, b))
        r1 = mt.inject_rate_errors([c.rate for c in chans], 1.0, np.random.default_rng(7))
        r2 = mt.inject_rate_errors([c.rate for c in chans], 1.0, np.random.default_rng(7))
        assert r1 == r2
        assert all(0.001 <= r.constant <= 0.002 for r in r1)

    def test_rate_errors_constant_in_time(self):
        table = RateFunction.table([0, 1, 2], [0.1, 0.2, 0.3])
        (out,) = mt.inject_rate_errors([table], 1.0, np.random.default_rng(1))
        ratio = out(np.array([0, 1, 2.0])) / table(np.array([0, 1, 2.0]))
        assert np.allclose(ratio, ratio[0])

    def test_jump_times_clamped_and_sorted(self):
        recs = [TrajectoryRecord(0, [JumpEvent(0.2, 0), JumpEvent(49.9, 1), JumpEvent(25.0, 2)])]
        out = mt.inject_jump_time_errors(recs, 5.0, 0.001, np.random.default_rng(2), 50.0)
        times = [e.time for e in out[0].events]
        assert times == sorted(times)
        assert all(0.0 <= t <= 50.0 for t in times)
        assert sorted(e.channel_index for e in out[0].events) == [0, 1, 2]

    def test_invalid_injection(self):
        with pytest.raises(ValueError):
            mt.ErrorInjection("gates")
        with pytest.raises(ValueError):
            mt.ErrorInjection("rates", -1.0)


class TestPipeline:
    def test_grid_validation(self):
        with pytest.raises(ValueError):
            _ = two_level_run(t_end=1.0, dt=0.3).n_steps

    def test_zero_noise_is_pure_unravelling(self):
        run = two_level_run(rate=0.0, m=RateFunction.const(0.5))
        paired = mt.engineered_channels(run)
        spec = EngineSpec(run.model.with_channels(paired.channels), EXCITED, run.t_grid, 4, stride=run.stride,
                          mixed=True, bath=run.model.channels, keep_states=True)
        for rec in run_ensemble(spec, 50).records:
            purity = np.einsum("tij,tji->t", rec.states, rec.states).real
            assert np.allclose(purity, 1.0, atol=1e-9)
        report = mt.run_mitigation(two_level_run(rate=0.0, n_trajectories=200))
        assert np.allclose(report.f_noisy, 1.0, atol=1e-8)
        assert np.allclose(report.f_mitigated, 1.0, atol=1e-8)
        assert report.improvement is None

    def test_unweighted_mean_solves_both_baths(self):
        run = two_level_run(rate=0.3)
        ens = mt.simulate_monitored_system(run)
        paired = mt.engineered_channels(run)
        both = run.model.with_channels(run.model.channels + paired.channels)
        ref = integrate(both, np.outer(EXCITED, EXCITED.conj()), run.t_grid)[:: run.stride]
        assert max(trace_distance(a, b) for a, b in zip(ens.plain.mean, ref)) <= 0.02

    def test_reweighting_recovers_unitary_two_level(self):
        run = two_level_run(n_trajectories=100_000, m=RateFunction.const(0.2))
        ens = mt.simulate_monitored_system(run)
        kets = unitary_states(run.model.hamiltonian, EXCITED, run.out_times)
        assert max(trace_distance(r, np.outer(k, k.conj())) for r, k in zip(ens.weighted.mean, kets)) <= 0.05

    def test_heisenberg_mitigated_state_matches_unitary(self):
        run = mt.MitigationRun(heisenberg_model(), all_up_state(), t_end=10.0, output_dt=1.0,
                               n_trajectories=10_000, master_seed=0)
        res = mt.simulate_monitored_system(run).weighted
        kets = unitary_states(run.model.hamiltonian, run.initial, run.out_times)
        ref = np.einsum("ti,tj->tij", kets, kets.conj())
        z = np.maximum(np.abs(res.mean.real - ref.real) / (res.stderr_re + 1e-12),
                       np.abs(res.mean.imag - ref.imag) / (res.stderr_im + 1e-12))
        nonzero = np.abs(res.mean - ref) > 1e-10
        # thousands of correlated entries share the same few jumps, so a handful sit just beyond 3 SE
        assert np.mean(z[nonzero] <= 3) >= 0.97
        assert z.max() <= 4.5

    def test_final_time_blind_to_jump_time_errors(self):
        # equal noise and engineered rates make every jump factor -1 at any time,
        # and clamping keeps all shifted jumps inside the window
        run = two_level_run(rate=0.3, n_trajectories=500, m=RateFunction.const(0.6))
        study = mt.jump_time_study(run, [0.0, 0.5, 5.0], realizations=2)
        assert np.all(study.final_fidelity == study.final_fidelity[0])
        assert study.improvement[2] > study.improvement[0]

    def test_dense_both_below_noisy(self):
        run = mt.MitigationRun(heisenberg_model(), all_up_state())
        refs = mt.dense_references(run)
        f_noisy = mt._pure_fidelities(refs.pure, refs.noisy)
        f_both = mt._pure_fidelities(refs.pure, refs.both)
        assert np.all(f_both <= f_noisy + 1e-12)
        assert f_both[-1] < f_noisy[-1] < 1

    def test_report_shape_and_bounds(self):
        report = mt.run_mitigation(two_level_run(n_trajectories=2000))
        assert len(list(report.rows())) == len(report.times)
        for f in (report.f_noisy, report.f_both):
            assert np.all(f >= 0) and np.all(f <= 1 + 1e-6)
        # the mitigated value is a Monte Carlo estimate and may overshoot 1 by its error
        assert np.all(report.f_mitigated <= 1 + 3 * report.stderr + 1e-9)
        assert report.improvement < 0


def test_improvement_metric():
    fn = np.array([1.0, 0.9, 0.99])
    fm = np.array([1.0, 0.99, 0.999])
    mean, final = mt.improvement_metric(fm, fn)
    assert mean == pytest.approx(-1.0)
    assert final == pytest.approx(-1.0)
    assert mt.improvement_metric(np.ones(3), np.ones(3)) == (None, None)

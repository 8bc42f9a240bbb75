import numpy as np
import pytest
from scipy.linalg import expm

from ionfit.errors import StiffnessError
from ionfit.models import (BEATTIE_DEFAULTS, BEATTIE_MODEL, builtin_model,
                           steady_state)
from ionfit.protocols import Protocol, builtin_protocols, ramp, step
from ionfit.simulate import (NoiseSpec, SolverSettings, Trace, generate_data,
                             load_trace, save_trace, simulate, simulate_states)


def expm_oracle(model, params, voltage, x0, times):
    """Scaling-and-squaring occupancies for a constant-voltage step."""
    A = model.assemble(params.kinetic_array, voltage)
    return np.array([expm(A * t) @ x0 for t in times])


class TestConstantSegments:
    def test_holding_at_steady_state_is_constant(self):
        proto = Protocol(name="hold", segments=(step(-80, 500),), sample_rate=1000)
        trace = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto)
        assert np.max(np.abs(trace.values - trace.values[0])) <= 1e-8

    @pytest.mark.parametrize("name", ["beattie", "wang"])
    def test_single_step_matches_expm_oracle(self, name):
        model, params = builtin_model(name)
        proto = Protocol(name="step40", segments=(step(40, 100),), sample_rate=1000)
        times, X = simulate_states(model, params, proto)
        x0 = steady_state(model, params, -80.0)
        expected = expm_oracle(model, params, 40.0, x0, times)
        assert np.max(np.abs(X - expected)) <= 1e-6

    def test_zero_driving_force(self):
        proto = Protocol(name="null", segments=(step(-80, 50), step(20, 100),
                                                step(-80, 50)), sample_rate=1000)
        trace = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto, e_rev=-80.0)
        slices = proto.grid_slices()
        first = trace.values[slices[0][0]:slices[0][1]]
        last = trace.values[slices[2][0]:slices[2][1]]
        assert np.all(first == 0.0)
        assert np.all(last == 0.0)


class TestInvariants:
    @pytest.mark.parametrize("name", ["beattie", "wang"])
    def test_occupancy_bounds_on_builtin_protocols(self, name):
        model, params = builtin_model(name)
        for proto in builtin_protocols("desk").values():
            _, X = simulate_states(model, params, proto)
            assert X.min() >= -1e-6
            assert X.max() <= 1.0 + 1e-6
            assert np.max(np.abs(X.sum(axis=1) - 1.0)) <= 1e-6

    def test_determinism(self):
        proto = builtin_protocols("desk")["d1"]
        a = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto)
        b = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto)
        assert np.array_equal(a.values, b.values)

    def test_tolerance_halving_is_stable(self):
        proto = builtin_protocols("desk")["d1"]
        loose = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                         SolverSettings(abs_tol=1e-8, rel_tol=1e-8))
        tight = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                         SolverSettings(abs_tol=5e-9, rel_tol=5e-9))
        assert np.max(np.abs(loose.values - tight.values)) <= 1e-7

    @pytest.mark.parametrize("name", ["beattie", "wang"])
    def test_auto_agrees_with_lsoda(self, name):
        model, params = builtin_model(name)
        proto = builtin_protocols("desk")["d2"]
        fast = simulate(model, params, proto)
        ref = simulate(model, params, proto, SolverSettings(method="lsoda"))
        assert np.max(np.abs(fast.values - ref.values)) <= 1e-5

    def test_auto_agrees_with_lsoda_on_ramps(self):
        proto = builtin_protocols("desk")["d0_ap"]
        fast = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto)
        ref = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                       SolverSettings(method="lsoda"))
        assert np.max(np.abs(fast.values - ref.values)) <= 1e-5

    def test_ramp_refinement_cap(self):
        proto = Protocol(name="r", segments=(ramp(-120, 40, 10),), sample_rate=1000)
        with pytest.raises(StiffnessError) as err:
            simulate_states(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                            SolverSettings(max_ramp_refinements=0))
        assert err.value.segment_index == 0

    def test_unknown_method(self):
        proto = builtin_protocols("desk")["d1"]
        with pytest.raises(ValueError):
            simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                     SolverSettings(method="rk4"))


class TestGenerateData:
    def test_zero_sigma_equals_simulate(self):
        proto = builtin_protocols("desk")["d3"]
        clean = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto)
        data = generate_data(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                             NoiseSpec(sigma=0.0, seed=42))
        assert np.array_equal(clean.values, data.values)

    def test_seed_determinism(self):
        proto = builtin_protocols("desk")["d3"]
        a = generate_data(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                          NoiseSpec(sigma=0.01, seed=7))
        b = generate_data(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                          NoiseSpec(sigma=0.01, seed=7))
        assert np.array_equal(a.values, b.values)
        c = generate_data(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                          NoiseSpec(sigma=0.01, seed=8))
        assert not np.array_equal(a.values, c.values)

    def test_noise_standard_deviation(self):
        # law of large numbers on a long constant protocol (1e5 samples)
        proto = Protocol(name="long", segments=(step(-80, 100_000.0),),
                         sample_rate=1000)
        sigma = 0.01
        clean = simulate(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto)
        noisy = generate_data(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                              NoiseSpec(sigma=sigma, seed=123))
        resid = noisy.values - clean.values
        assert abs(resid.std() - sigma) <= 0.01 * sigma

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec(sigma=-0.1, seed=0)


class TestTraceIO:
    def test_round_trip(self, tmp_path):
        proto = builtin_protocols("desk")["d4"]
        trace = generate_data(BEATTIE_MODEL, BEATTIE_DEFAULTS, proto,
                              NoiseSpec(sigma=0.02, seed=3))
        path = tmp_path / "trace.csv"
        save_trace(trace, path)
        again = load_trace(path)
        assert np.array_equal(trace.times, again.times)
        assert np.array_equal(trace.values, again.values)
        assert again.meta == trace.meta

    def test_trace_validation(self):
        with pytest.raises(ValueError):
            Trace(times=np.array([0.0, 1.0]), values=np.array([1.0]))
        with pytest.raises(ValueError):
            Trace(times=np.array([1.0, 0.0]), values=np.array([1.0, 2.0]))

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            load_trace(path)

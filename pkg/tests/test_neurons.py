import math

import numpy as np
import pytest

from plastsim.neurons import (
    EXCITATORY,
    NeuronParams,
    NeuronState,
    Population,
    SimulationFault,
    SynapticElements,
    growth_delta,
    step_electrical,
    update_calcium,
    update_synaptic_elements,
    vacant_counts,
)
from plastsim.rng import substream

RS = dict(model_kind="izhikevich", a=0.02, b=0.2, c=-65.0, d=8.0)


class TestStepElectrical:
    def test_izhikevich_subthreshold_drifts_to_rest(self):
        params = NeuronParams(**RS)
        state = NeuronState(v=-65.0, u=0.2 * -65.0)
        rng = substream(0, "unused")
        for _ in range(200):
            state = step_electrical(state, params, 0.0, 0.0, rng)
            assert not state.fired
        # Quiescent fixed point of the two-variable system is near -70 mV.
        assert -71.0 < state.v < -65.0
        assert state.v < -69.0

    def test_poisson_zero_input_never_fires(self):
        params = NeuronParams(model_kind="poisson", input_scale=1.0)
        state = NeuronState()
        rng = substream(1, "fire-test")
        for _ in range(1000):
            state = step_electrical(state, params, 0.0, 0.0, rng)
            assert not state.fired

    def test_izhikevich_matches_reference_recurrence(self):
        # Straight-line reimplementation of the same update, evaluated in
        # the same order, must agree bitwise on a long constant-current run.
        params = NeuronParams(**RS)
        current = 10.0
        v, u = -65.0, 0.2 * -65.0
        ref_spikes = []
        trace_v = []
        for t in range(5000):
            v_new = v + (0.04 * v * v + 5.0 * v + 140.0 - u + current)
            u_new = u + 0.02 * (0.2 * v - u)
            if v_new >= 30.0:
                v_new = -65.0
                u_new = u_new + 8.0
                ref_spikes.append(t)
            v, u = v_new, u_new
            trace_v.append(v)

        state = NeuronState(v=-65.0, u=0.2 * -65.0)
        rng = substream(0, "unused")
        spikes = []
        for t in range(5000):
            state = step_electrical(state, params, current, 0.0, rng)
            if state.fired:
                spikes.append(t)
            assert state.v == trace_v[t]
        assert spikes == ref_spikes
        assert len(spikes) > 3
        # Regular spiking settles into a fixed period.
        gaps = np.diff(spikes[2:])
        assert np.all(gaps == gaps[0])

    def test_izhikevich_nonfinite_faults(self):
        params = NeuronParams(**RS)
        state = NeuronState(v=-65.0, u=-13.0)
        rng = substream(0, "unused")
        with pytest.raises(SimulationFault):
            for _ in range(10):
                state = step_electrical(state, params, float("nan"), 0.0, rng)

    def test_poisson_probability_clamped(self):
        params = NeuronParams(model_kind="poisson", input_scale=1.0)
        rng = substream(3, "clamp")
        state = NeuronState()
        fired = [step_electrical(state, params, 50.0, 50.0, rng).fired
                 for _ in range(100)]
        assert all(fired)


class TestUpdateCalcium:
    def test_silent_neuron_stays_at_zero(self):
        params = NeuronParams()
        state = NeuronState(calcium=0.0, fired=False)
        for _ in range(100):
            state = update_calcium(state, params)
        assert state.calcium == 0.0

    def test_constant_firing_is_fixed_point_at_one(self):
        params = NeuronParams()
        state = NeuronState(calcium=1.0, fired=True)
        for _ in range(100):
            state = update_calcium(state, params)
        assert state.calcium == 1.0

    def test_converges_to_empirical_rate(self):
        # Brute-force simulation of the recurrence: steady-state mean is
        # the firing rate, fluctuation variance is r(1-r)*alpha/2.
        alpha = 1e-3
        rate = 0.3
        params = NeuronParams(calcium_alpha=alpha)
        rng = substream(7, "ema")
        state = NeuronState()
        steps = 100_000
        for _ in range(steps):
            state = NeuronState(calcium=state.calcium,
                                fired=bool(rng.random() < rate))
            state = update_calcium(state, params)
        band = 3.0 * math.sqrt(rate * (1 - rate) * alpha / 2.0)
        assert abs(state.calcium - rate) <= band

    def test_contraction_at_rate_one_minus_alpha(self):
        alpha = 1e-2
        params = NeuronParams(calcium_alpha=alpha)
        rng = substream(9, "contraction")
        a = NeuronState(calcium=0.9)
        b = NeuronState(calcium=0.1)
        gap = a.calcium - b.calcium
        for t in range(500):
            fired = bool(rng.random() < 0.5)
            a = update_calcium(NeuronState(calcium=a.calcium, fired=fired), params)
            b = update_calcium(NeuronState(calcium=b.calcium, fired=fired), params)
            gap *= (1 - alpha)
            assert abs((a.calcium - b.calcium) - gap) < 1e-12

    def test_stays_in_unit_interval(self):
        params = NeuronParams(calcium_alpha=0.5)
        rng = substream(11, "interval")
        state = NeuronState(calcium=rng.random())
        for _ in range(1000):
            state = update_calcium(
                NeuronState(calcium=state.calcium,
                            fired=bool(rng.random() < 0.5)), params)
            assert 0.0 <= state.calcium <= 1.0


class TestSynapticElements:
    def test_at_target_calcium_unchanged(self):
        params = NeuronParams(target_calcium=0.7, growth_rate=1e-3)
        el = SynapticElements(axonal_grown=2.0, dendritic_grown=1.5)
        out = update_synaptic_elements(el, 0.7, params)
        assert out.axonal_grown == 2.0
        assert out.dendritic_grown == 1.5

    def test_zero_calcium_grows_by_exactly_nu(self):
        params = NeuronParams(target_calcium=0.7, growth_rate=1e-3)
        el = SynapticElements(axonal_grown=1.0, dendritic_grown=1.0)
        out = update_synaptic_elements(el, 0.0, params)
        assert out.axonal_grown == pytest.approx(1.001, abs=1e-15)

    def test_retraction_clamps_at_zero(self):
        params = NeuronParams(target_calcium=0.7, growth_rate=1e-3)
        el = SynapticElements(axonal_grown=0.0005, dendritic_grown=0.0005)
        out = update_synaptic_elements(el, 1.4, params)
        assert out.axonal_grown == 0.0
        assert out.dendritic_grown == 0.0

    @pytest.mark.parametrize("curve", ["linear", "gaussian"])
    def test_growth_sign_follows_calcium(self, curve):
        params = NeuronParams(target_calcium=0.7, growth_rate=1e-3,
                              growth_curve=curve)
        rng = substream(13, "sign", curve)
        for _ in range(2000):
            c = rng.random()
            dz = growth_delta(c, params)
            if c < 0.7 - 1e-9 and (curve == "linear" or c > params.growth_eta):
                assert dz > 0.0
            elif c > 0.7 + 1e-9:
                assert dz < 0.0

    def test_vacant_counts(self):
        el = SynapticElements(axonal_grown=1.4, axonal_connected=0,
                              dendritic_grown=1.4, dendritic_connected=1)
        assert vacant_counts(el) == (1, 0)
        el = SynapticElements(axonal_grown=0.9, dendritic_grown=2.7,
                              dendritic_connected=3)
        assert vacant_counts(el) == (0, 0)


class TestPopulation:
    def test_matches_scalar_operations_bitwise(self):
        """The vectorized population must replay the scalar ops exactly."""
        seed = 99
        n = 12
        params = NeuronParams(model_kind="poisson", input_scale=0.05,
                              calcium_alpha=1e-2, growth_rate=1e-3)
        ids = np.arange(n, dtype=np.uint64)
        pos = np.zeros((n, 3))
        kinds = np.zeros(n, dtype=np.int8)
        pop = Population(ids, pos, kinds, params, seed)
        pop.ax_grown[:] = 1.2
        pop.den_grown[:] = 1.2

        # Scalar replay with the same per-neuron streams.
        bg = [substream(seed, "background", i) for i in range(n)]
        fire = [substream(seed, "fire", i) for i in range(n)]
        states = [NeuronState() for _ in range(n)]
        ax = np.full(n, 1.2)
        rng_in = substream(seed, "inputs")
        for _ in range(40):
            inputs = rng_in.random(n) * 30
            pop.step(inputs)
            for i in range(n):
                background = bg[i].normal(params.background_mean,
                                          params.background_std)
                p = params.input_scale * (inputs[i] + background)
                p = min(max(p, 0.0), 1.0)
                fired = bool(fire[i].random() < p)
                states[i] = NeuronState(calcium=states[i].calcium, fired=fired)
                states[i] = update_calcium(states[i], params)
                dz = growth_delta(states[i].calcium, params)
                ax[i] = max(0.0, ax[i] + dz)
                assert pop.fired[i] == states[i].fired
                assert pop.calcium[i] == states[i].calcium
                assert pop.ax_grown[i] == ax[i]

    def test_vacancy_views(self):
        params = NeuronParams()
        pop = Population(np.arange(3, dtype=np.uint64), np.zeros((3, 3)),
                         np.zeros(3, dtype=np.int8), params, 1)
        pop.ax_grown[:] = [1.4, 0.9, 2.0]
        pop.ax_conn[:] = [0, 0, 2]
        assert list(pop.vacant_axonal()) == [1, 0, 0]
        pop.den_grown[EXCITATORY] = [3.2, 1.0, 0.0]
        pop.den_conn[EXCITATORY] = [1, 1, 0]
        assert list(pop.vacant_dendritic(EXCITATORY)) == [2, 0, 0]

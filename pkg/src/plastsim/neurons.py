"""Per-neuron electrical dynamics, calcium tracking, and element growth.

A neuron is simulated in three layers that the driver advances every step:
its electrical state (Izhikevich or clamped-Poisson), a calcium value that
is an exponential moving average of its firing indicator, and homeostatic
synaptic-element counts that grow while calcium is below target and
retract while it is above.

Scalar operations here are the reference semantics; :class:`Population`
applies the same arithmetic to whole per-rank arrays and is what the
simulation loop uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

EXCITATORY = 0
INHIBITORY = 1

SPIKE_THRESHOLD_MV = 30.0


class SimulationFault(RuntimeError):
    """A neuron reached a non-finite state; the run must abort."""


@dataclass
class NeuronParams:
    """Model constants shared by all neurons of a population.

    ``model_kind`` selects between the two-variable Izhikevich update and
    a clamped-Poisson model whose firing probability is
    ``clamp(input_scale * (synaptic_input + background), 0, 1)``.
    """

    model_kind: str = "poisson"  # "izhikevich" | "poisson"
    a: float = 0.02
    b: float = 0.2
    c: float = -65.0
    d: float = 8.0
    calcium_alpha: float = 1e-4
    target_calcium: float = 0.7
    growth_rate: float = 1e-3
    background_mean: float = 5.0
    background_std: float = 1.0
    input_scale: float = 1.0 / 30.0
    growth_curve: str = "linear"  # "linear" | "gaussian"
    growth_eta: float = 0.0      # quiet point of the gaussian curve

    def __post_init__(self):
        if self.model_kind not in ("izhikevich", "poisson"):
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if not 0.0 < self.calcium_alpha < 1.0:
            raise ValueError("calcium_alpha must lie in (0, 1)")
        if self.growth_rate <= 0.0:
            raise ValueError("growth_rate must be positive")
        if self.target_calcium <= 0.0:
            raise ValueError("target_calcium must be positive")
        if self.growth_curve not in ("linear", "gaussian"):
            raise ValueError(f"unknown growth_curve {self.growth_curve!r}")


@dataclass
class NeuronState:
    v: float = -65.0
    u: float = -13.0
    calcium: float = 0.0
    fired: bool = False


@dataclass
class SynapticElements:
    """Grown / connected element counts for one neuron.

    ``axonal_grown`` and ``dendritic_grown`` are fractional; only whole
    grown elements can be bound, so ``connected <= floor(grown)`` after
    every connectivity update.  ``element_kind`` is the type the axon
    carries (a neuron's outgoing elements share its own type).
    """

    axonal_grown: float = 0.0
    axonal_connected: int = 0
    dendritic_grown: float = 0.0
    dendritic_connected: int = 0
    element_kind: int = EXCITATORY


def step_electrical(state: NeuronState, params: NeuronParams,
                    synaptic_input: float, background: float,
                    rng: np.random.Generator) -> NeuronState:
    """Advance the electrical state by one step and set the fired flag."""
    if params.model_kind == "izhikevich":
        current = synaptic_input + background
        v, u = state.v, state.u
        v_new = v + (0.04 * v * v + 5.0 * v + 140.0 - u + current)
        u_new = u + params.a * (params.b * v - u)
        fired = v_new >= SPIKE_THRESHOLD_MV
        if fired:
            v_new = params.c
            u_new = u_new + params.d
        if not (math.isfinite(v_new) and math.isfinite(u_new)):
            raise SimulationFault(
                f"non-finite electrical state (v={v_new}, u={u_new})")
        return replace(state, v=v_new, u=u_new, fired=fired)

    p = params.input_scale * (synaptic_input + background)
    p = min(max(p, 0.0), 1.0)
    fired = bool(rng.random() < p)
    return replace(state, fired=fired)


def update_calcium(state: NeuronState, params: NeuronParams) -> NeuronState:
    """Move calcium toward the fired indicator: c' = c + alpha*(1[fired] - c)."""
    target = 1.0 if state.fired else 0.0
    c = state.calcium + params.calcium_alpha * (target - state.calcium)
    return replace(state, calcium=c)


def growth_delta(calcium: float, params: NeuronParams) -> float:
    """Per-step change of grown element count at the given calcium level.

    The linear rule is ``nu * (1 - c/eps)``: positive below the target
    calcium, negative above it.  The gaussian rule keeps near-full growth
    until calcium approaches the target and retracts increasingly fast
    beyond it, with zero crossings at ``eta`` and at the target.
    """
    nu = params.growth_rate
    eps = params.target_calcium
    if params.growth_curve == "linear":
        return nu * (1.0 - calcium / eps)
    eta = params.growth_eta
    xi = 0.5 * (eta + eps)
    zeta = (eps - eta) / (2.0 * math.sqrt(math.log(2.0)))
    return nu * (2.0 * math.exp(-(((calcium - xi) / zeta) ** 2)) - 1.0)


def update_synaptic_elements(el: SynapticElements, calcium: float,
                             params: NeuronParams) -> SynapticElements:
    """Apply the homeostatic growth rule to both element counts."""
    dz = growth_delta(calcium, params)
    return replace(
        el,
        axonal_grown=max(0.0, el.axonal_grown + dz),
        dendritic_grown=max(0.0, el.dendritic_grown + dz),
    )


def vacant_counts(el: SynapticElements) -> tuple[int, int]:
    """Usable unbound elements per side: max(0, floor(grown) - connected)."""
    vac_ax = max(0, int(math.floor(el.axonal_grown)) - el.axonal_connected)
    vac_den = max(0, int(math.floor(el.dendritic_grown)) - el.dendritic_connected)
    return vac_ax, vac_den


class Population:
    """Vectorized state for the neurons owned by one rank.

    Arrays are indexed by local position; ``ids`` maps back to global
    neuron ids.  Dendritic pools are tracked separately per element kind
    (index 0 excitatory, 1 inhibitory); the axon pool carries the
    neuron's own kind.  All updates mirror the scalar operations above
    element-wise, so scalar and vectorized paths agree bitwise.
    """

    BG_BLOCK = 512  # per-neuron random draws cached this many steps ahead

    def __init__(self, ids: np.ndarray, positions: np.ndarray,
                 kinds: np.ndarray, params: NeuronParams, master_seed: int):
        from .rng import substream

        self.ids = np.asarray(ids, dtype=np.uint64)
        self.positions = np.asarray(positions, dtype=np.float64)
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.params = params
        n = len(self.ids)
        self.n = n
        self.v = np.full(n, params.c, dtype=np.float64)
        self.u = np.full(n, params.b * params.c, dtype=np.float64)
        self.calcium = np.zeros(n, dtype=np.float64)
        self.fired = np.zeros(n, dtype=bool)
        self.ax_grown = np.zeros(n, dtype=np.float64)
        self.ax_conn = np.zeros(n, dtype=np.int64)
        self.den_grown = np.zeros((2, n), dtype=np.float64)
        self.den_conn = np.zeros((2, n), dtype=np.int64)
        # One stream per neuron for background noise and one for firing
        # draws, keyed by global id so results do not depend on placement.
        self._bg_streams = [substream(master_seed, "background", int(i))
                            for i in self.ids]
        self._fire_streams = [substream(master_seed, "fire", int(i))
                              for i in self.ids]
        self._bg_cache = np.empty((0, n))
        self._fire_cache = np.empty((0, n))
        self._cache_fill = 0
        self._cache_used = 0

    def _refill_caches(self):
        blk = self.BG_BLOCK
        p = self.params
        bg = np.empty((blk, self.n))
        fu = np.empty((blk, self.n))
        for j in range(self.n):
            bg[:, j] = self._bg_streams[j].normal(
                p.background_mean, p.background_std, size=blk)
            fu[:, j] = self._fire_streams[j].random(size=blk)
        self._bg_cache = bg
        self._fire_cache = fu
        self._cache_fill = blk
        self._cache_used = 0

    def _next_draws(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cache_used >= self._cache_fill:
            self._refill_caches()
        row = self._cache_used
        self._cache_used += 1
        return self._bg_cache[row], self._fire_cache[row]

    def step(self, synaptic_input: np.ndarray):
        """One electrical + calcium + element update for every neuron."""
        p = self.params
        background, fire_u = self._next_draws()
        if p.model_kind == "izhikevich":
            current = synaptic_input + background
            v, u = self.v, self.u
            v_new = v + (0.04 * v * v + 5.0 * v + 140.0 - u + current)
            u_new = u + p.a * (p.b * v - u)
            fired = v_new >= SPIKE_THRESHOLD_MV
            v_new[fired] = p.c
            u_new[fired] += p.d
            if not (np.isfinite(v_new).all() and np.isfinite(u_new).all()):
                bad = self.ids[~(np.isfinite(v_new) & np.isfinite(u_new))]
                raise SimulationFault(
                    f"non-finite electrical state for neurons {bad.tolist()}")
            self.v, self.u, self.fired = v_new, u_new, fired
        else:
            prob = p.input_scale * (synaptic_input + background)
            np.clip(prob, 0.0, 1.0, out=prob)
            self.fired = fire_u < prob
        # Calcium EMA of the fired indicator.
        ind = self.fired.astype(np.float64)
        self.calcium = self.calcium + p.calcium_alpha * (ind - self.calcium)
        # Homeostatic element growth, same delta for all three pools.
        dz = self._growth_delta_vec(self.calcium)
        np.maximum(self.ax_grown + dz, 0.0, out=self.ax_grown)
        np.maximum(self.den_grown + dz, 0.0, out=self.den_grown)

    def _growth_delta_vec(self, calcium: np.ndarray) -> np.ndarray:
        p = self.params
        if p.growth_curve == "linear":
            return p.growth_rate * (1.0 - calcium / p.target_calcium)
        xi = 0.5 * (p.growth_eta + p.target_calcium)
        zeta = (p.target_calcium - p.growth_eta) / (2.0 * math.sqrt(math.log(2.0)))
        return p.growth_rate * (2.0 * np.exp(-(((calcium - xi) / zeta) ** 2)) - 1.0)

    def vacant_axonal(self) -> np.ndarray:
        return np.maximum(0, np.floor(self.ax_grown).astype(np.int64) - self.ax_conn)

    def vacant_dendritic(self, kind: int) -> np.ndarray:
        pool_g = self.den_grown[kind]
        pool_c = self.den_conn[kind]
        return np.maximum(0, np.floor(pool_g).astype(np.int64) - pool_c)

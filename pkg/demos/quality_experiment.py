# The homeostasis experiment at reduced length: 32 neurons grow toward
# a target calcium of 0.7, overshoot, prune, and settle at about 23
# synapses each.  Both activity-exchange modes produce the same shape.
#
# The full 200,000-step version runs as part of the acceptance suite
# (tests/test_acceptance.py); this script does 40,000 steps to show the
# growth and overshoot phases in under a minute.  Pass --full for the
# complete horizon.

import sys

import numpy as np

from plastsim.config import SimConfig
from plastsim.driver import run_simulation

steps = 200_000 if "--full" in sys.argv else 40_000

def quality(mode):
    return SimConfig(
        rank_count=4, neurons_total=32, total_steps=steps,
        plasticity_interval=100, delta=100, theta=0.3, sigma=750.0,
        algorithm="location_aware", spike_mode=mode,
        neuron_model="poisson", calcium_alpha=2e-4,
        target_calcium=0.7, growth_rate=1e-3, growth_curve="gaussian",
        background_mean=5.0, background_std=1.0,
        input_scale=0.05, synaptic_strength=0.5625,
        master_seed=2024, calcium_every=500, metrics_every=2000,
        out_dir=f"demo_quality_{mode}")

for mode in ("exact", "frequency"):
    res = run_simulation(quality(mode))
    by_step = {}
    for b in res.bundles:
        for step, _nid, c in b["calcium"]:
            by_step.setdefault(step, []).append(c)
    print(f"\n=== {mode} spike exchange ({steps} steps) ===")
    marks = np.linspace(0, steps - 1, 9, dtype=int)
    recorded = np.array(sorted(by_step))
    for mark in marks:
        step = recorded[np.argmin(np.abs(recorded - mark))]
        mean_c = np.mean(by_step[step])
        bar = "#" * int(mean_c * 60)
        print(f"  step {step:7d}  c={mean_c:.3f} {bar}")
    degree = sum(len(b["connectome"]) for b in res.bundles) / 32
    print(f"  mean synapses per neuron: {degree:.1f}")
    print(f"  outputs in demo_quality_{mode}/")

print("\nRender the two-panel comparison figure with:")
print("  plastiplot calcium --runs demo_quality_exact demo_quality_frequency"
      " --out quality.png")

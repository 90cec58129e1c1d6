# Walk through the distributed octree and the Barnes-Hut partner search:
# domain decomposition, bottom-up vacancy aggregation, and how the
# acceptance parameter theta trades approximation against search depth.

import numpy as np

from plastsim.octree import (
    Domain, assign_subdomains, branch_level, morton_index, morton_path,
    build_local_tree, aggregate_bottom_up, build_upper_tree, pack_node_id,
    MAX_DEPTH,
)
from plastsim.plasticity import (
    SearchConfig, TreeView, expand_candidates, selection_distribution,
)

rng = np.random.default_rng(7)
domain = Domain(1000.0, 1000.0, 1000.0)

# --- domain decomposition -------------------------------------------------
# Ranks own consecutive runs of Morton-indexed subdomains.
for k in (1, 4, 16, 32):
    a = assign_subdomains(k)
    per = 8 ** a.branch_level // k
    print(f"k={k:3d}: branch level b={a.branch_level}, "
          f"{8 ** a.branch_level} subdomains, {per} per rank")

print("\nMorton interleaving (x lowest bit): (1,0,1) ->",
      morton_index((1, 0, 1), 2))

# --- a 24-neuron single-rank world -----------------------------------------
n = 24
positions = rng.random((n, 3)) * 1000.0
vacancy = {i: (int(rng.integers(1, 4)), 0) for i in range(n)}
pos_map = {i: positions[i] for i in range(n)}

trees = build_local_tree([(i, positions[i]) for i in range(n)],
                         (0, 8), domain, b=1)
records = {}
for sub, root in trees.items():
    aggregate_bottom_up(root, vacancy, pos_map)
    records[sub] = root.record()
upper = {r.node_id: r for r in build_upper_tree(records, 1).values()}
root = upper[pack_node_id(0, 0)]
print(f"\nroot vacancy after aggregation: {root.vacant_ex} "
      f"(= {sum(v[0] for v in vacancy.values())} summed over neurons)")

view = TreeView(domain, assign_subdomains(1), 0, "classic",
                upper, records, trees)

# --- candidate expansion at different theta --------------------------------
# theta = 0 refuses every aggregate: the search sees every vacant leaf
# individually (the direct method).  Larger theta accepts whole boxes.
source = 0
deep = morton_path(positions[source], domain, MAX_DEPTH)
for theta in (0.0, 0.2, 0.4, 0.8):
    cfg = SearchConfig(theta=theta, sigma=750.0)
    cands = expand_candidates(view, view.root_record(), positions[source],
                              deep, source, 0, cfg)
    leaves = sum(1 for c in cands if c.neuron_id is not None)
    print(f"theta={theta:.1f}: {len(cands):2d} candidates "
          f"({leaves} single neurons, {len(cands) - leaves} aggregates), "
          f"vacancy sum {sum(c.vacant_ex for c in cands)}")

# --- selection probabilities ------------------------------------------------
cfg = SearchConfig(theta=0.0, sigma=750.0)
cands = expand_candidates(view, view.root_record(), positions[source],
                          deep, source, 0, cfg)
probs = selection_distribution(cands, positions[source], 750.0, 0)
print("\nmost likely partners for neuron 0 (distance-decaying kernel):")
order = np.argsort(probs)[::-1][:5]
for idx in order:
    c = cands[idx]
    d = np.linalg.norm(positions[source] - positions[c.neuron_id])
    print(f"  neuron {c.neuron_id:2d}: p={probs[idx]:.3f}  "
          f"distance {d:6.1f} um, vacant {c.vacant_ex}")

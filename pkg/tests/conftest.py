"""Shared fixtures: a driverless distributed-octree world."""

import numpy as np

from plastsim.messages import encode_fetch_record
from plastsim.octree import (
    KIND_INNER,
    KIND_LEAF_EMPTY,
    KIND_LEAF_NEURON,
    MAX_DEPTH,
    Domain,
    NodeRecord,
    aggregate_bottom_up,
    assign_subdomains,
    build_local_tree,
    build_upper_tree,
    morton_path,
)
from plastsim.plasticity import ALGO_CLASSIC, SearchConfig, TreeView, find_target

DOMAIN = Domain(1000.0, 1000.0, 1000.0)


class MiniWorld:
    """Distributed octree fixture without the simulation driver.

    Builds per-rank subtrees from explicit positions and dendritic
    vacancies, merges branch records the way the wire exchange would,
    and wires cross-rank fetches with per-requester call counting.
    """

    def __init__(self, positions, vac_ex, k=1, algorithm=ALGO_CLASSIC,
                 theta=0.3, sigma=750.0, vac_in=None):
        self.k = k
        self.cfg = SearchConfig(theta=theta, sigma=sigma, algorithm=algorithm)
        self.positions = np.asarray(positions, dtype=float)
        n = len(self.positions)
        vac_in = vac_in if vac_in is not None else [0] * n
        self.assignment = assign_subdomains(k)
        b = self.assignment.branch_level
        self.b = b
        self.deep = [morton_path(p, DOMAIN, MAX_DEPTH) for p in self.positions]
        self.subdomain = [d >> (3 * (MAX_DEPTH - b)) for d in self.deep]
        self.owner = [self.assignment.owner_of(s) for s in self.subdomain]
        vacancy = {i: (int(vac_ex[i]), int(vac_in[i])) for i in range(n)}
        pos_map = {i: self.positions[i] for i in range(n)}

        self.node_index = [dict() for _ in range(k)]
        branch_records = {}
        branch_info = {}
        per_sub = {}
        for i in range(n):
            per_sub.setdefault(self.subdomain[i], []).append(i)
        for sub in range(8 ** b):
            members = per_sub.get(sub, [])
            if len(members) == 1:
                branch_info[sub] = (KIND_LEAF_NEURON, members[0])
            elif members:
                branch_info[sub] = (KIND_INNER, None)
            else:
                branch_info[sub] = (KIND_LEAF_EMPTY, None)
        self.trees = []
        for r in range(k):
            lo, hi = self.assignment.ranges[r]
            members = [(i, self.positions[i]) for i in range(n)
                       if lo <= self.subdomain[i] < hi]
            trees = build_local_tree(members, (lo, hi), DOMAIN, b)
            self.trees.append(trees)
            for sub, root in trees.items():
                aggregate_bottom_up(root, vacancy, pos_map)
                branch_records[sub] = root.record()
                self._index(r, root)
        for sub, rec in branch_records.items():
            rec.kind, rec.neuron_id = branch_info[sub]
        upper = {rec.node_id: rec
                 for rec in build_upper_tree(branch_records, b).values()}
        self.fetch_calls = [0] * k
        self.views = []
        for r in range(k):
            fetch = None
            if algorithm == ALGO_CLASSIC and k > 1:
                fetch = self._make_fetch(r)
            self.views.append(TreeView(
                DOMAIN, self.assignment, r, algorithm, dict(upper),
                {s: rec for s, rec in branch_records.items()},
                self.trees[r], fetch_fn=fetch))

    def _index(self, rank, node):
        self.node_index[rank][node.node_id] = node
        if node.children:
            for c in node.children:
                if c is not None:
                    self._index(rank, c)

    def _make_fetch(self, requester):
        def fetch(owner, node_id):
            self.fetch_calls[requester] += 1
            node = self.node_index[owner].get(node_id)
            if node is not None:
                return encode_fetch_record(node.record())
            empty = NodeRecord(node_id=node_id, vacant_ex=0, vacant_in=0,
                               centroid_ex=np.zeros(3),
                               centroid_in=np.zeros(3), kind=KIND_LEAF_EMPTY)
            return encode_fetch_record(empty)
        return fetch

    def find(self, source, round_index=0, seed=1):
        view = self.views[self.owner[source]]
        return find_target(view, source, self.positions[source],
                           self.deep[source], 0, self.cfg, round_index, seed)

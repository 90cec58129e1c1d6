"""Partner search over the distributed octree and synapse negotiation.

Two search algorithms share one expansion/selection core.  The classic
variant refines remote subtrees by fetching their nodes one record at a
time; the location-aware variant never looks below a remotely owned
branch node -- the first time such a node is chosen, the search is
shipped to the owning rank as a formation-and-calculation request and
the owner finishes it against purely local data.

Random selection is drawn from streams keyed by (source neuron,
connectivity round, start node), so a search continued on another rank
consumes exactly the draws the local continuation would have, and
results are independent of where neurons live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .messages import FormationRequestV1, FormationRequestV2
from .octree import (
    KIND_INNER,
    KIND_LEAF_EMPTY,
    KIND_LEAF_NEURON,
    MAX_DEPTH,
    DomainAssignment,
    Domain,
    NodeRecord,
    OctreeNode,
    node_edge_length,
    pack_node_id,
    subdomain_of,
    unpack_node_id,
)
from .rng import substream

ALGO_CLASSIC = "classic"
ALGO_LOCATION_AWARE = "location_aware"

_MAX_SEARCH_HOPS = 64


@dataclass
class SearchConfig:
    theta: float
    sigma: float = 750.0
    algorithm: str = ALGO_CLASSIC
    allow_autapses: bool = False

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.algorithm not in (ALGO_CLASSIC, ALGO_LOCATION_AWARE):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


def acceptance(record: NodeRecord, source_pos, theta: float,
               domain: Domain, element_kind: int) -> bool:
    """Barnes-Hut criterion: max cell edge / distance < theta.

    The root is rejected unconditionally, as is a node at distance zero
    (which forces expansion instead of a degenerate approximation).
    """
    depth = record.node_id >> 56
    if depth == 0:
        return False
    distance = math.dist(tuple(source_pos), record.centroid_point(element_kind))
    if distance == 0.0:
        return False
    return domain.max_extent / (1 << depth) / distance < theta


@dataclass
class SearchOutcome:
    """Result of one neuron's partner search on its home rank."""

    kind: str                    # "none" | "local" | "v1" | "v2"
    owner_rank: int = -1
    target_neuron_id: int = -1   # for "local"
    request_v1: FormationRequestV1 | None = None
    request_v2: FormationRequestV2 | None = None


class TreeView:
    """One rank's navigable view of the global octree for one update.

    Depths 0..b are replicated (the upper tree plus all branch records);
    below that, locally owned subtrees are walked directly while remote
    nodes are either fetched (classic) or left opaque (location-aware).
    Fetched records are cached for the rest of the connectivity update.
    """

    def __init__(self, domain: Domain, assignment: DomainAssignment,
                 rank: int, algorithm: str,
                 upper: dict[int, NodeRecord],
                 branch_records: dict[int, NodeRecord],
                 local_trees: dict[int, OctreeNode],
                 fetch_fn=None):
        self.domain = domain
        self.assignment = assignment
        self.b = assignment.branch_level
        self.rank = rank
        self.algorithm = algorithm
        self.upper = upper
        self.branch_records = branch_records
        self.local_trees = local_trees
        self._fetch_fn = fetch_fn
        self._fetch_cache: dict[int, NodeRecord] = {}
        self.fetch_calls = 0
        self._children_cache: dict[int, list[NodeRecord]] = {}
        self._remote_cache: dict[int, bool] = {}
        self._local_index: dict[int, OctreeNode] = {}
        for root in local_trees.values():
            self._index_subtree(root)

    def _index_subtree(self, node: OctreeNode) -> None:
        self._local_index[node.node_id] = node
        if node.children:
            for child in node.children:
                if child is not None:
                    self._index_subtree(child)

    # -- node addressing ----------------------------------------------------

    def owner_of_node(self, node_id: int) -> int:
        depth, _ = unpack_node_id(node_id)
        if depth < self.b:
            return self.rank  # replicated upper tree
        return self.assignment.owner_of(subdomain_of(node_id, self.b))

    def is_remote(self, node_id: int) -> bool:
        remote = self._remote_cache.get(node_id)
        if remote is None:
            remote = self.owner_of_node(node_id) != self.rank
            self._remote_cache[node_id] = remote
        return remote

    def root_record(self) -> NodeRecord:
        root_id = pack_node_id(0, 0)
        if root_id in self.upper:
            return self.upper[root_id]
        # Degenerate single-subdomain layout: the root is the branch node.
        return self.branch_records[0]

    def record(self, node_id: int) -> NodeRecord | None:
        depth, path = unpack_node_id(node_id)
        if depth < self.b:
            return self.upper.get(node_id)
        if depth == self.b:
            return self.branch_records.get(path)
        node = self._local_index.get(node_id)
        if node is not None:
            return node.record()
        if node_id in self._fetch_cache:
            return self._fetch_cache[node_id]
        return None

    def children(self, record: NodeRecord) -> list[NodeRecord]:
        """Records of a node's existing children, in octant order.

        Memoized for the lifetime of the view (one connectivity update);
        the underlying aggregates are immutable during the search phase.
        """
        node_id = record.node_id
        cached = self._children_cache.get(node_id)
        if cached is not None:
            return cached
        depth, path = unpack_node_id(node_id)
        if depth < self.b:
            out = []
            for octant in range(8):
                child = self.record((depth + 1) << 56 | (path * 8 + octant))
                if child is not None:
                    out.append(child)
        elif not self.is_remote(node_id):
            node = self._local_index[node_id]
            out = [c.record() for c in node.children if c is not None]
        else:
            out = self._fetch_children(node_id)
        self._children_cache[node_id] = out
        return out

    def _fetch_children(self, node_id: int) -> list[NodeRecord]:
        if self.algorithm == ALGO_LOCATION_AWARE:
            raise AssertionError(
                "location-aware search must not descend below a remote "
                "branch node")
        depth, path = unpack_node_id(node_id)
        owner = self.owner_of_node(node_id)
        out = []
        for octant in range(8):
            child_id = (depth + 1) << 56 | (path * 8 + octant)
            rec = self._fetch(owner, child_id)
            if rec.kind != KIND_LEAF_EMPTY:
                out.append(rec)
        return out

    def _fetch(self, owner: int, node_id: int) -> NodeRecord:
        if node_id in self._fetch_cache:
            return self._fetch_cache[node_id]
        from .messages import decode_fetch_record

        raw = self._fetch_fn(owner, node_id)
        rec = decode_fetch_record(raw)
        self._fetch_cache[node_id] = rec
        self.fetch_calls += 1
        return rec

    def local_node_record(self, node_id: int) -> NodeRecord | None:
        """Record of a locally owned node at or below the branch level."""
        depth, path = unpack_node_id(node_id)
        if depth == self.b:
            rec = self.branch_records.get(path)
            if rec is not None and not self.is_remote(node_id):
                return rec
            return None
        node = self._local_index.get(node_id)
        return node.record() if node is not None else None


def expand_candidates(view: TreeView, start: NodeRecord,
                      source_pos: np.ndarray, source_deep_path: int,
                      source_neuron_id: int, element_kind: int,
                      cfg: SearchConfig) -> list[NodeRecord]:
    """Replace rejected nodes by their children until every survivor is
    either an accepted inner node, an opaque remote branch node, or a
    leaf holding a neuron.

    Subtrees without matching vacant elements are dropped, nodes whose
    cell contains the searching neuron are always refined (which both
    excludes autapses at the leaf and keeps candidate vacancy sums
    exact), and in location-aware mode a remotely owned branch node is
    kept whole for its owner to refine later.
    """
    aware = cfg.algorithm == ALGO_LOCATION_AWARE
    src = tuple(source_pos)
    candidates: list[NodeRecord] = []
    stack = list(view.children(start))
    while stack:
        rec = stack.pop()
        if rec.vacant(element_kind) <= 0:
            continue
        if rec.kind == KIND_LEAF_NEURON:
            if rec.neuron_id == source_neuron_id and not cfg.allow_autapses:
                continue
            candidates.append(rec)
            continue
        if rec.kind == KIND_LEAF_EMPTY:
            continue
        depth = rec.node_id >> 56
        path = rec.node_id & ((1 << 56) - 1)
        contains_source = path == source_deep_path >> (3 * (MAX_DEPTH - depth))
        if contains_source:
            stack.extend(view.children(rec))
            continue
        if aware and depth >= view.b and view.is_remote(rec.node_id):
            candidates.append(rec)
            continue
        if acceptance(rec, src, cfg.theta, view.domain, element_kind):
            candidates.append(rec)
        else:
            stack.extend(view.children(rec))
    candidates.sort(key=lambda r: r.node_id)
    return candidates


def _selection_weights(candidates: list[NodeRecord], source_pos,
                       sigma: float, element_kind: int) -> np.ndarray:
    """Kernel weights vacancy * exp(-d^2 / sigma^2) over candidates."""
    n = len(candidates)
    points = np.empty((n, 3))
    vacant = np.empty(n)
    if element_kind == 0:
        for i, rec in enumerate(candidates):
            points[i] = rec.centroid_point(0)
            vacant[i] = rec.vacant_ex
    else:
        for i, rec in enumerate(candidates):
            points[i] = rec.centroid_point(1)
            vacant[i] = rec.vacant_in
    diff = points - np.asarray(source_pos, dtype=float)
    d_sq = np.einsum("ij,ij->i", diff, diff)
    return vacant * np.exp(-d_sq / (sigma * sigma))


def select_target(candidates: list[NodeRecord], source_pos,
                  sigma: float, element_kind: int,
                  rng: np.random.Generator) -> int | None:
    """Sample a candidate index with probability vacancy * gaussian(d).

    Candidates must already be in node-id order; selection is a single
    inverse-CDF draw so a fixed stream gives a reproducible pick.
    Returns None when every weight underflows to zero.
    """
    weights = _selection_weights(candidates, source_pos, sigma, element_kind)
    cumulative = np.cumsum(weights)
    total = cumulative[-1] if len(cumulative) else 0.0
    if total <= 0.0:
        return None
    u = rng.random() * total
    idx = int(np.searchsorted(cumulative, u, side="right"))
    return min(idx, len(candidates) - 1)


def selection_distribution(candidates: list[NodeRecord],
                           source_pos, sigma: float,
                           element_kind: int) -> np.ndarray:
    """Exact selection probabilities over a candidate list."""
    weights = _selection_weights(candidates, source_pos, sigma, element_kind)
    total = weights.sum()
    return weights / total if total > 0 else weights


def find_target(view: TreeView, source_neuron_id: int,
                source_pos: np.ndarray, source_deep_path: int,
                element_kind: int, cfg: SearchConfig,
                round_index: int, master_seed: int) -> SearchOutcome:
    """Search for a partner from the root; both algorithm variants.

    Repeats expansion and selection from each chosen inner node (its
    depth strictly increases, so the loop terminates).  The classic
    variant only ever ends on a leaf; the location-aware variant ends
    early with an outgoing formation-and-calculation request the first
    time a remotely owned node at or below the branch level is chosen.
    """
    aware = cfg.algorithm == ALGO_LOCATION_AWARE
    source_pos = tuple(source_pos)
    start = view.root_record()
    for _ in range(_MAX_SEARCH_HOPS):
        candidates = expand_candidates(view, start, source_pos,
                                       source_deep_path, source_neuron_id,
                                       element_kind, cfg)
        if not candidates:
            return SearchOutcome(kind="none")
        rng = substream(master_seed, "select", round_index,
                        source_neuron_id, start.node_id)
        idx = select_target(candidates, source_pos, cfg.sigma,
                            element_kind, rng)
        if idx is None:
            return SearchOutcome(kind="none")
        chosen = candidates[idx]
        remote = view.is_remote(chosen.node_id)
        if chosen.kind == KIND_LEAF_NEURON:
            if not remote:
                return SearchOutcome(kind="local",
                                     target_neuron_id=chosen.neuron_id)
            owner = view.owner_of_node(chosen.node_id)
            if aware:
                req = FormationRequestV2(
                    source_neuron_id=source_neuron_id,
                    source_position=tuple(source_pos),
                    target_node_id=chosen.node_id,
                    target_is_leaf=1, element_kind=element_kind)
                return SearchOutcome(kind="v2", owner_rank=owner,
                                     request_v2=req)
            req = FormationRequestV1(source_neuron_id=source_neuron_id,
                                     target_neuron_id=chosen.neuron_id,
                                     element_kind=element_kind)
            return SearchOutcome(kind="v1", owner_rank=owner, request_v1=req)
        # Chosen an inner node: restart from it.
        if remote and aware:
            owner = view.owner_of_node(chosen.node_id)
            req = FormationRequestV2(
                source_neuron_id=source_neuron_id,
                source_position=tuple(source_pos),
                target_node_id=chosen.node_id,
                target_is_leaf=0, element_kind=element_kind)
            return SearchOutcome(kind="v2", owner_rank=owner, request_v2=req)
        start = chosen
    raise RuntimeError("partner search failed to terminate")


def handle_forwarded_request(view: TreeView, request: FormationRequestV2,
                             cfg: SearchConfig, round_index: int,
                             master_seed: int) -> int | None:
    """Finish a forwarded search against this rank's local subtree.

    Returns the found neuron id, or None when the named node is unknown
    or no viable partner exists (the origin then receives a declined
    status).  The continuation draws from the same (source, round, start
    node) streams the origin rank would have used, and touches no remote
    data because the whole subtree is local.
    """
    record = view.local_node_record(request.target_node_id)
    if record is None:
        return None
    source_pos = tuple(request.source_position)
    kind = request.element_kind
    if record.kind == KIND_LEAF_NEURON:
        return record.neuron_id
    # A forwarded source is never local, so its deep path cannot collide
    # with any cell here; an out-of-domain sentinel disables the
    # contains-source refinement rule.
    sentinel_path = (1 << (3 * MAX_DEPTH)) - 1
    start = record
    for _ in range(_MAX_SEARCH_HOPS):
        if start.vacant(kind) <= 0:
            return None
        candidates = expand_candidates(view, start, source_pos,
                                       sentinel_path,
                                       request.source_neuron_id, kind, cfg)
        if not candidates:
            return None
        rng = substream(master_seed, "select", round_index,
                        request.source_neuron_id, start.node_id)
        idx = select_target(candidates, source_pos, cfg.sigma, kind, rng)
        if idx is None:
            return None
        chosen = candidates[idx]
        if chosen.kind == KIND_LEAF_NEURON:
            return chosen.neuron_id
        start = chosen
    raise RuntimeError("forwarded search failed to terminate")


def resolve_requests(grouped: dict[tuple[int, int], list],
                     vacancy_lookup, round_index: int,
                     master_seed: int) -> None:
    """Accept a uniformly random feasible subset of each target's requests.

    ``grouped`` maps (target neuron, element kind) to request entries
    that expose ``source_neuron_id`` and an ``accepted`` flag; entries
    are sorted by source so the accepted subset is reproducible no
    matter how requests arrived.
    """
    for (target_nid, kind), entries in grouped.items():
        entries.sort(key=lambda e: e.source_neuron_id)
        capacity = vacancy_lookup(target_nid, kind)
        take = min(len(entries), int(capacity))
        for entry in entries:
            entry.accepted = False
        if take <= 0:
            continue
        rng = substream(master_seed, "resolve", round_index, target_nid, kind)
        order = rng.permutation(len(entries))
        for idx in order[:take]:
            entries[idx].accepted = True


def plan_deletions(vacant: int, retraction: int, bonds: list,
                   rng: np.random.Generator) -> list:
    """Choose which bound synapses a retraction breaks.

    Vacant elements absorb the loss first at no cost; each element lost
    beyond them breaks one uniformly random bond.  ``bonds`` must be in
    a deterministic order for reproducible picks.
    """
    breaks = max(0, int(retraction) - int(vacant))
    breaks = min(breaks, len(bonds))
    if breaks == 0:
        return []
    order = rng.permutation(len(bonds))
    return [bonds[i] for i in order[:breaks]]

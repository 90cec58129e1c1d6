"""Domain decomposition and the distributed spatial octree.

The simulation box is cut into ``8**b`` equal subdomains indexed by the
Morton curve; each rank owns a consecutive run of them.  Above the
subdomains sits a replicated upper tree (depths 0..b); below each owned
subdomain every rank refines its own subtree until no cell holds more
than one neuron.  Depth counts from the root at 0, so the branch nodes
that anchor ownership live at depth ``b``.

Node identifiers pack the depth into the top 8 bits and the Morton path
from the root into the low 56 bits, which bounds the tree at depth 18.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 18  # 3 bits per level in a 56-bit path

KIND_INNER = 0
KIND_LEAF_NEURON = 1
KIND_LEAF_EMPTY = 2


class ConfigurationError(ValueError):
    pass


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    """Axis-aligned simulation box, origin at 0."""

    lx: float
    ly: float
    lz: float

    def __post_init__(self):
        if min(self.lx, self.ly, self.lz) <= 0:
            raise ConfigurationError("domain extents must be positive")

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz])

    @property
    def max_extent(self) -> float:
        return max(self.lx, self.ly, self.lz)


def branch_level(rank_count: int) -> int:
    """Smallest b with 8**(b-1) <= rank_count < 8**b."""
    if rank_count < 1 or rank_count & (rank_count - 1):
        raise ConfigurationError(
            f"rank count must be a power of two, got {rank_count}")
    b = 1
    while 8 ** b <= rank_count:
        b += 1
    return b


@dataclass(frozen=True)
class DomainAssignment:
    """Ownership of Morton-indexed subdomains by ranks.

    Every rank owns one consecutive range; ranges partition
    ``[0, 8**branch_level)``.  For rank counts where the subdomain count
    divided by the rank count is 8 (k = 1, 8, 64, ...) each rank owns 8
    consecutive subdomains instead of the usual 1, 2, or 4.
    """

    rank_count: int
    branch_level: int
    ranges: tuple[tuple[int, int], ...]

    def owner_of(self, subdomain: int) -> int:
        per = (8 ** self.branch_level) // self.rank_count
        return subdomain // per


def assign_subdomains(rank_count: int) -> DomainAssignment:
    b = branch_level(rank_count)
    total = 8 ** b
    per = total // rank_count
    ranges = tuple((r * per, (r + 1) * per) for r in range(rank_count))
    return DomainAssignment(rank_count=rank_count, branch_level=b,
                            ranges=ranges)


def morton_index(cell: tuple[int, int, int], level: int) -> int:
    """Interleave grid coordinates, x in the lowest bit of each plane."""
    x, y, z = cell
    bits = level - 1
    if not (0 <= x < 2 ** bits and 0 <= y < 2 ** bits and 0 <= z < 2 ** bits):
        raise ValueError(f"cell {cell} out of range for level {level}")
    idx = 0
    for i in range(bits):
        idx |= ((x >> i) & 1) << (3 * i)
        idx |= ((y >> i) & 1) << (3 * i + 1)
        idx |= ((z >> i) & 1) << (3 * i + 2)
    return idx


def cell_coords(position: np.ndarray, domain: Domain, depth: int) -> tuple[int, int, int]:
    """Grid cell of a position at the given depth (half-open boxes)."""
    n = 1 << depth
    ext = domain.extents
    coords = np.floor(np.asarray(position) * n / ext).astype(np.int64)
    coords = np.clip(coords, 0, n - 1)
    return int(coords[0]), int(coords[1]), int(coords[2])


def morton_path(position: np.ndarray, domain: Domain, depth: int) -> int:
    """Morton path from the root down to the depth-``depth`` cell."""
    return morton_index(cell_coords(position, domain, depth), depth + 1)


def pack_node_id(depth: int, path: int) -> int:
    if not 0 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth {depth} out of range")
    if path >> 56:
        raise ValueError("morton path exceeds 56 bits")
    return (depth << 56) | path


def unpack_node_id(node_id: int) -> tuple[int, int]:
    return node_id >> 56, node_id & ((1 << 56) - 1)


def child_node_id(node_id: int, octant: int) -> int:
    depth, path = unpack_node_id(node_id)
    return pack_node_id(depth + 1, path * 8 + octant)


def node_box(node_id: int, domain: Domain) -> tuple[np.ndarray, np.ndarray]:
    """Half-open bounding box [lo, hi) of a node's cell."""
    depth, path = unpack_node_id(node_id)
    x = y = z = 0
    for i in range(depth):
        digit = (path >> (3 * i)) & 7
        x |= (digit & 1) << i
        y |= ((digit >> 1) & 1) << i
        z |= ((digit >> 2) & 1) << i
    side = domain.extents / (1 << depth)
    lo = np.array([x, y, z]) * side
    return lo, lo + side


def node_edge_length(node_id: int, domain: Domain) -> float:
    return domain.max_extent / (1 << (node_id >> 56))


def subdomain_of(node_id: int, b: int) -> int:
    """Morton index of the depth-``b`` subdomain containing the node."""
    depth, path = unpack_node_id(node_id)
    if depth < b:
        raise ValueError("node lies above the branch level")
    return path >> (3 * (depth - b))


class OctreeNode:
    """One node of a rank's local subtree (branch node and below)."""

    __slots__ = ("node_id", "kind", "children", "neuron_id",
                 "vacant", "centroid", "position", "_record_cache")

    def __init__(self, node_id: int, kind: int, neuron_id: int | None = None,
                 position: np.ndarray | None = None):
        self.node_id = node_id
        self.kind = kind
        self.children: list[OctreeNode | None] | None = None
        self.neuron_id = neuron_id
        self.position = position
        # vacant[kind] and centroid[kind] for excitatory (0) / inhibitory (1)
        self.vacant = np.zeros(2, dtype=np.int64)
        self.centroid = np.zeros((2, 3), dtype=np.float64)
        self._record_cache: NodeRecord | None = None

    @property
    def depth(self) -> int:
        return self.node_id >> 56

    def record(self) -> "NodeRecord":
        # Cached between aggregations; aggregate_bottom_up invalidates.
        rec = self._record_cache
        if rec is None:
            rec = NodeRecord(
                node_id=self.node_id,
                vacant_ex=int(self.vacant[0]), vacant_in=int(self.vacant[1]),
                centroid_ex=self.centroid[0].copy(),
                centroid_in=self.centroid[1].copy(),
                kind=self.kind, neuron_id=self.neuron_id,
            )
            self._record_cache = rec
        return rec


@dataclass
class NodeRecord:
    """Exchange view of a node: aggregate counts and weighted positions.

    The centroid of a kind is only meaningful while the matching vacant
    count is nonzero.  ``kind``/``neuron_id`` ride along for request
    formation; the accounted wire size of a record stays 64 bytes.
    """

    node_id: int
    vacant_ex: int
    vacant_in: int
    centroid_ex: np.ndarray
    centroid_in: np.ndarray
    kind: int = KIND_INNER
    neuron_id: int | None = None

    def vacant(self, element_kind: int) -> int:
        return self.vacant_ex if element_kind == 0 else self.vacant_in

    def centroid(self, element_kind: int) -> np.ndarray:
        return self.centroid_ex if element_kind == 0 else self.centroid_in

    def centroid_point(self, element_kind: int) -> tuple:
        """Centroid as a plain tuple, cached (hot path of the search)."""
        if element_kind == 0:
            point = getattr(self, "_point_ex", None)
            if point is None:
                point = tuple(self.centroid_ex)
                self._point_ex = point
        else:
            point = getattr(self, "_point_in", None)
            if point is None:
                point = tuple(self.centroid_in)
                self._point_in = point
        return point


def build_local_tree(neurons: list[tuple[int, np.ndarray]],
                     my_range: tuple[int, int],
                     domain: Domain, b: int,
                     rank: int | None = None) -> dict[int, OctreeNode]:
    """Build subtrees under every owned branch node.

    ``neurons`` holds (neuron_id, position) pairs; all of them must fall
    into subdomains within ``my_range``.  Returns a map from subdomain
    Morton index to the branch node of its subtree; empty subdomains get
    a bare ``leaf_empty`` node.
    """
    lo, hi = my_range
    buckets: dict[int, list[tuple[int, int, np.ndarray]]] = {s: [] for s in range(lo, hi)}
    for nid, pos in neurons:
        deep = morton_path(pos, domain, MAX_DEPTH)
        sub = deep >> (3 * (MAX_DEPTH - b))
        if not lo <= sub < hi:
            raise PlacementError(
                f"neuron {nid} falls in subdomain {sub}, outside range "
                f"[{lo}, {hi}) of rank {rank}")
        buckets[sub].append((nid, deep, pos))

    trees: dict[int, OctreeNode] = {}
    for sub in range(lo, hi):
        trees[sub] = _build_subtree(pack_node_id(b, sub), buckets[sub])
    return trees


def _build_subtree(node_id: int,
                   members: list[tuple[int, int, np.ndarray]]) -> OctreeNode:
    depth = node_id >> 56
    if not members:
        return OctreeNode(node_id, KIND_LEAF_EMPTY)
    if len(members) == 1:
        nid, _, pos = members[0]
        return OctreeNode(node_id, KIND_LEAF_NEURON, neuron_id=nid, position=pos)
    if depth >= MAX_DEPTH:
        ids = [m[0] for m in members]
        raise PlacementError(
            f"neurons {ids} share a cell at maximum tree depth")
    node = OctreeNode(node_id, KIND_INNER)
    split: list[list[tuple[int, int, np.ndarray]] | None] = [None] * 8
    shift = 3 * (MAX_DEPTH - depth - 1)
    for m in members:
        octant = (m[1] >> shift) & 7
        if split[octant] is None:
            split[octant] = []
        split[octant].append(m)
    node.children = [
        _build_subtree(child_node_id(node_id, o), split[o]) if split[o] else None
        for o in range(8)
    ]
    return node


def aggregate_bottom_up(root: OctreeNode,
                        vacancy_of: dict[int, tuple[int, int]],
                        position_of: dict[int, np.ndarray]) -> None:
    """Fill vacant counts and centroids from the leaves upward.

    ``vacancy_of`` maps neuron id to its (excitatory, inhibitory) vacant
    dendritic element counts.  Inner counts are child sums; centroids are
    vacancy-weighted means computed in fixed child order so that every
    rank derives bitwise-identical aggregates.
    """
    root._record_cache = None
    if root.kind == KIND_LEAF_EMPTY:
        root.vacant[:] = 0
        root.centroid[:] = 0.0
        return
    if root.kind == KIND_LEAF_NEURON:
        vac = vacancy_of[root.neuron_id]
        pos = position_of[root.neuron_id]
        for kind in (0, 1):
            root.vacant[kind] = vac[kind]
            root.centroid[kind] = pos if vac[kind] > 0 else 0.0
        return
    for child in root.children:
        if child is not None:
            aggregate_bottom_up(child, vacancy_of, position_of)
    _combine_children(root)


def _combine_children(node: OctreeNode) -> None:
    for kind in (0, 1):
        total = 0
        weighted = np.zeros(3, dtype=np.float64)
        for child in node.children:
            if child is None:
                continue
            cnt = int(child.vacant[kind])
            if cnt > 0:
                total += cnt
                weighted += cnt * child.centroid[kind]
        node.vacant[kind] = total
        node.centroid[kind] = weighted / total if total > 0 else 0.0


def build_upper_tree(branch_records: dict[int, NodeRecord],
                     b: int) -> dict[int, NodeRecord]:
    """Recompute the replicated upper tree from all branch records.

    ``branch_records`` maps subdomain Morton index to its record; the
    result maps node ids at depths 0..b-1 to aggregate records.  Feeding
    every rank the same records yields bitwise-identical upper trees.
    """
    levels: dict[int, NodeRecord] = {}
    current = {path: rec for path, rec in branch_records.items()}
    for depth in range(b - 1, -1, -1):
        parents: dict[int, list[NodeRecord]] = {}
        for path in sorted(current):
            parents.setdefault(path >> 3, []).append(current[path])
        merged: dict[int, NodeRecord] = {}
        for ppath in sorted(parents):
            node_id = pack_node_id(depth, ppath)
            rec = _merge_records(node_id, parents[ppath])
            merged[ppath] = rec
            levels[node_id] = rec
        current = merged
    return levels


def _merge_records(node_id: int, children: list[NodeRecord]) -> NodeRecord:
    vac = [0, 0]
    cents = [np.zeros(3), np.zeros(3)]
    for kind in (0, 1):
        total = 0
        weighted = np.zeros(3, dtype=np.float64)
        for child in children:
            cnt = child.vacant(kind)
            if cnt > 0:
                total += cnt
                weighted += cnt * child.centroid(kind)
        vac[kind] = total
        cents[kind] = weighted / total if total > 0 else np.zeros(3)
    return NodeRecord(node_id=node_id, vacant_ex=vac[0], vacant_in=vac[1],
                      centroid_ex=cents[0], centroid_in=cents[1],
                      kind=KIND_INNER)

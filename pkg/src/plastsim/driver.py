"""Simulation schedule, rank contexts, backends, and output emission.

Every rank runs the same loop: exchange activity (every step in exact
mode, every epoch in frequency mode), advance neurons, and every
plasticity interval run a connectivity update (deletions, octree
aggregation and branch exchange, partner search, request exchange,
resolution, response exchange).

A rank context is written as a generator that yields collective
operations; the in-process backend drives all k generators in lockstep
through a matrix transpose, while the TCP backend drives a single
generator against a socket mesh.  Both produce identical trajectories
for identical configs and seeds because all randomness is drawn from
streams keyed by neuron ids and round indices, never by rank.
"""

from __future__ import annotations

import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import messages, plasticity, spikes
from .config import SimConfig
from .messages import (
    DeletionNotice,
    FormationRequestV1,
    FormationRequestV2,
    FormationResponseV1,
    FormationResponseV2,
    DELETE_FROM_AXON,
    DELETE_FROM_DENDRITE,
    STATUS_DECLINED,
    STATUS_SUCCESS,
)
from .neurons import EXCITATORY, INHIBITORY, Population
from .octree import (
    KIND_LEAF_EMPTY,
    KIND_LEAF_NEURON,
    KIND_INNER,
    MAX_DEPTH,
    Domain,
    NodeRecord,
    aggregate_bottom_up,
    assign_subdomains,
    build_local_tree,
    build_upper_tree,
    morton_path,
    pack_node_id,
    subdomain_of,
    unpack_node_id,
)
from .plasticity import SearchConfig, TreeView, find_target, handle_forwarded_request, resolve_requests
from .rng import substream
from .transport import (
    TAG_BRANCH,
    TAG_DELETE_AXON,
    TAG_DELETE_DENDRITE,
    TAG_FREQUENCIES,
    TAG_GATHER,
    TAG_REQUESTS,
    TAG_RESPONSES,
    TAG_SPIKES,
    LocalBackend,
    SocketTransport,
)


# ---------------------------------------------------------------------------
# Deterministic global placement


@dataclass
class Placement:
    """Network layout derivable by every rank without communication.

    Neuron positions come from per-neuron streams over the whole domain,
    so the same seed yields the same network for any rank count; a
    neuron belongs to whichever rank owns its subdomain.
    """

    domain: Domain
    assignment: "object"
    positions: np.ndarray          # (n, 3)
    kinds: np.ndarray              # (n,) element kind of each neuron's axon
    owner: np.ndarray              # (n,) owning rank
    deep_paths: np.ndarray         # (n,) Morton path at MAX_DEPTH (object ints)
    subdomains: np.ndarray         # (n,)
    init_axonal: np.ndarray        # (n,)
    init_dendritic: np.ndarray     # (2, n) per element kind
    branch_info: dict              # subdomain -> (kind, neuron_id | None)
    rank_members: list             # rank -> sorted array of neuron ids


def init_network(cfg: SimConfig) -> Placement:
    n = cfg.total_neurons
    domain = Domain(cfg.domain_x, cfg.domain_y, cfg.domain_z)
    assignment = assign_subdomains(cfg.rank_count)
    b = assignment.branch_level
    extents = domain.extents

    positions = np.empty((n, 3))
    kinds = np.empty(n, dtype=np.int8)
    init_ax = np.empty(n)
    init_den = np.empty((2, n))
    deep_paths = np.empty(n, dtype=object)
    subdomains = np.empty(n, dtype=np.int64)
    owner = np.empty(n, dtype=np.int32)

    n_inhibitory = int(round(cfg.inhibitory_fraction * n))
    span = cfg.max_initial_elements - cfg.min_initial_elements
    for nid in range(n):
        pos_rng = substream(cfg.master_seed, "position", nid)
        positions[nid] = pos_rng.random(3) * extents
        el_rng = substream(cfg.master_seed, "init-elements", nid)
        init_ax[nid] = cfg.min_initial_elements + span * el_rng.random()
        init_den[0, nid] = cfg.min_initial_elements + span * el_rng.random()
        init_den[1, nid] = cfg.min_initial_elements + span * el_rng.random()
        kinds[nid] = INHIBITORY if nid < n_inhibitory else EXCITATORY
        deep = morton_path(positions[nid], domain, MAX_DEPTH)
        deep_paths[nid] = deep
        sub = deep >> (3 * (MAX_DEPTH - b))
        subdomains[nid] = sub
        owner[nid] = assignment.owner_of(sub)

    branch_info: dict = {}
    for sub in range(8 ** b):
        branch_info[sub] = (KIND_LEAF_EMPTY, None)
    counts: dict[int, list[int]] = {}
    for nid in range(n):
        counts.setdefault(int(subdomains[nid]), []).append(nid)
    for sub, members in counts.items():
        if len(members) == 1:
            branch_info[sub] = (KIND_LEAF_NEURON, members[0])
        else:
            branch_info[sub] = (KIND_INNER, None)

    rank_members = [
        np.array([nid for nid in range(n) if owner[nid] == r], dtype=np.int64)
        for r in range(cfg.rank_count)
    ]
    return Placement(domain=domain, assignment=assignment,
                     positions=positions, kinds=kinds, owner=owner,
                     deep_paths=deep_paths, subdomains=subdomains,
                     init_axonal=init_ax, init_dendritic=init_den,
                     branch_info=branch_info, rank_members=rank_members)


# ---------------------------------------------------------------------------
# Request bookkeeping


@dataclass
class _RequestEntry:
    source_neuron_id: int
    element_kind: int
    target_neuron_id: int | None   # None -> declined outright
    origin_rank: int               # -1 for purely local entries
    channel_pos: int = -1
    rtype: str = "local"           # local | v1 | v2
    accepted: bool = False


@dataclass
class RoundStats:
    searchers: int = 0
    v2_sent: int = 0
    v1_sent: int = 0
    local_requests: int = 0
    fetch_calls: int = 0
    accepted: int = 0
    declined: int = 0
    deletions: int = 0


# ---------------------------------------------------------------------------
# Per-rank simulation context


class RankContext:
    """All state and phase logic of one rank.

    ``run()`` is a generator yielding collective requests as
    ``("a2a", tag, rows)`` tuples and receiving the delivered inbox; the
    backends drive it.  Remote fetches are synchronous calls through
    ``fetch_fn`` because they are one-sided by design.
    """

    def __init__(self, cfg: SimConfig, rank: int, placement: Placement,
                 fetch_fn, stats):
        self.cfg = cfg
        self.rank = rank
        self.k = cfg.rank_count
        self.placement = placement
        self.fetch_fn = fetch_fn
        self.stats = stats
        self.params = cfg.neuron_params()

        ids = placement.rank_members[rank]
        self.pop = Population(ids, placement.positions[ids],
                              placement.kinds[ids], self.params,
                              cfg.master_seed)
        self.pop.ax_grown[:] = placement.init_axonal[ids]
        self.pop.den_grown[:] = placement.init_dendritic[:, ids]
        self.local_index = {int(nid): i for i, nid in enumerate(ids)}
        self.search_cfg = SearchConfig(theta=cfg.theta, sigma=cfg.sigma,
                                       algorithm=cfg.algorithm,
                                       allow_autapses=cfg.allow_autapses)

        # Connectome, from this rank's perspective.
        n = self.pop.n
        self.out_counts: list[dict[int, int]] = [dict() for _ in range(n)]
        self.out_rank_counts: list[dict[int, int]] = [dict() for _ in range(n)]
        self.in_counts: list[dict[tuple[int, int], int]] = [dict() for _ in range(n)]

        self.prev_fired = np.zeros(n, dtype=bool)
        self.history = spikes.SpikeHistory(n, cfg.delta)
        self.sampler = spikes.RemoteSampler(cfg.master_seed, rank, cfg.delta)
        self._freq_tables: dict[int, dict[int, float]] = {}
        self._incoming_batches: dict[int, np.ndarray] = {}
        self._per_target_samplers: dict[tuple[int, int], np.random.Generator] = {}

        self._csr_dirty = True
        self._trees = None
        self._node_index: dict[int, "object"] = {}
        self.view: TreeView | None = None

        self.metrics_rows: list[tuple] = []
        self.calcium_rows: list[tuple] = []
        self.raster_rows: list[tuple] = []
        self.round_stats: list[RoundStats] = []
        self.phase_seconds = {"activity": 0.0, "elements": 0.0,
                              "connectivity": 0.0}
        self.phase_calls = {"activity": 0, "elements": 0, "connectivity": 0}

    # -- connectome mutation helpers ----------------------------------------

    def _add_synapse_source_side(self, src_local: int, target_nid: int) -> None:
        self.pop.ax_conn[src_local] += 1
        out = self.out_counts[src_local]
        out[target_nid] = out.get(target_nid, 0) + 1
        dest = int(self.placement.owner[target_nid])
        rc = self.out_rank_counts[src_local]
        rc[dest] = rc.get(dest, 0) + 1
        self._csr_dirty = True

    def _remove_synapse_source_side(self, src_local: int, target_nid: int) -> None:
        self.pop.ax_conn[src_local] -= 1
        out = self.out_counts[src_local]
        out[target_nid] -= 1
        if not out[target_nid]:
            del out[target_nid]
        dest = int(self.placement.owner[target_nid])
        rc = self.out_rank_counts[src_local]
        rc[dest] -= 1
        if not rc[dest]:
            del rc[dest]
        self._csr_dirty = True

    def _add_synapse_target_side(self, tgt_local: int, source_nid: int,
                                 kind: int) -> None:
        self.pop.den_conn[kind][tgt_local] += 1
        inc = self.in_counts[tgt_local]
        key = (source_nid, kind)
        inc[key] = inc.get(key, 0) + 1
        self._csr_dirty = True

    def _remove_synapse_target_side(self, tgt_local: int, source_nid: int,
                                    kind: int) -> None:
        self.pop.den_conn[kind][tgt_local] -= 1
        key = (source_nid, kind)
        inc = self.in_counts[tgt_local]
        inc[key] -= 1
        if not inc[key]:
            del inc[key]
        self._csr_dirty = True

    # -- input assembly ------------------------------------------------------

    def _rebuild_csr(self) -> None:
        local_slots: dict[int, int] = {}
        remote_slots: dict[int, dict[int, int]] = {}
        entry_slot: list[int] = []
        entry_weight: list[float] = []
        entry_target: list[int] = []

        remote_ids: dict[int, list[int]] = {}
        # First pass: discover slot keys in deterministic order.
        all_sources: set[int] = set()
        for i in range(self.pop.n):
            for (src, _kind) in self.in_counts[i]:
                all_sources.add(src)
        locals_sorted = sorted(s for s in all_sources
                               if int(self.placement.owner[s]) == self.rank)
        remotes = sorted(s for s in all_sources
                         if int(self.placement.owner[s]) != self.rank)
        slot_of: dict[int, int] = {}
        for s in locals_sorted:
            slot_of[s] = len(slot_of)
        self._slot_local_idx = np.array(
            [self.local_index[s] for s in locals_sorted], dtype=np.int64)
        self._remote_blocks = []
        for r in range(self.k):
            ids = [s for s in remotes if int(self.placement.owner[s]) == r]
            if not ids:
                continue
            start = len(slot_of)
            for s in ids:
                slot_of[s] = len(slot_of)
            self._remote_blocks.append((r, np.array(ids, dtype=np.uint64),
                                        start))
        for i in range(self.pop.n):
            for (src, kind), count in sorted(self.in_counts[i].items()):
                sign = 1.0 if kind == EXCITATORY else -1.0
                entry_slot.append(slot_of[src])
                entry_weight.append(sign * count)
                entry_target.append(i)
        self._n_slots = len(slot_of)
        self._entry_slot = np.array(entry_slot, dtype=np.int64)
        self._entry_weight = np.array(entry_weight)
        self._entry_target = np.array(entry_target, dtype=np.int64)
        self._csr_dirty = False

    def _synaptic_inputs(self, step: int) -> np.ndarray:
        if self._csr_dirty:
            self._rebuild_csr()
        if self._n_slots == 0:
            return np.zeros(self.pop.n)
        values = np.zeros(self._n_slots)
        if len(self._slot_local_idx):
            values[:len(self._slot_local_idx)] = \
                self.prev_fired[self._slot_local_idx]
        exact = self.cfg.spike_mode == "exact"
        step_in_epoch = step % self.cfg.delta
        for rank, ids, start in self._remote_blocks:
            if exact:
                batch = self._incoming_batches.get(rank)
                if batch is None or not len(batch):
                    continue
                values[start:start + len(ids)] = spikes.lookup_many(batch, ids)
            elif self.cfg.per_target_draws:
                pass  # handled per entry below
            else:
                values[start:start + len(ids)] = \
                    self.sampler.spiked_many(ids, step_in_epoch)
        contrib = self._entry_weight * values[self._entry_slot]
        inputs = np.bincount(self._entry_target, weights=contrib,
                             minlength=self.pop.n)
        if self.cfg.per_target_draws and not exact:
            inputs += self._per_target_contrib(step_in_epoch)
        return self.cfg.synaptic_strength * inputs

    def _per_target_contrib(self, step_in_epoch: int) -> np.ndarray:
        """Alternative sampling: an independent draw per (target, source)."""
        out = np.zeros(self.pop.n)
        for i in range(self.pop.n):
            for (src, kind), count in sorted(self.in_counts[i].items()):
                if int(self.placement.owner[src]) == self.rank:
                    continue
                table = self._freq_tables.get(int(self.placement.owner[src]), {})
                freq = table.get(src, 0.0)
                key = (int(self.pop.ids[i]), src)
                gen = self._per_target_samplers.get(key)
                if gen is None:
                    gen = substream(self.cfg.master_seed,
                                    "remote-spike-per-target", *key)
                    self._per_target_samplers[key] = gen
                spiked = gen.random() < freq
                sign = 1.0 if kind == EXCITATORY else -1.0
                out[i] += sign * count * spiked
        return out

    # -- activity payloads ----------------------------------------------------

    def _spike_rows(self) -> list[bytes]:
        fired_ids = self.pop.ids[self.prev_fired]
        routing = {}
        for nid in fired_ids:
            i = self.local_index[int(nid)]
            dests = {r for r in self.out_rank_counts[i] if r != self.rank}
            if dests:
                routing[int(nid)] = dests
        batches = spikes.gather_spike_batches(fired_ids, routing, self.k)
        rows = []
        for r in range(self.k):
            rows.append(messages.encode_spike_batch(batches[r])
                        if r != self.rank else b"")
        return rows

    def _frequency_rows(self) -> list[bytes]:
        freqs = spikes.compute_frequencies(self.history.counts, self.cfg.delta)
        rows = []
        for r in range(self.k):
            if r == self.rank:
                rows.append(b"")
                continue
            ids = []
            vals = []
            for i in range(self.pop.n):
                if self.out_rank_counts[i].get(r, 0) > 0:
                    ids.append(int(self.pop.ids[i]))
                    vals.append(freqs[i])
            rows.append(messages.encode_frequency_batch(
                np.array(ids, dtype=np.uint64), np.array(vals)))
        return rows

    def _note_incoming_activity(self, inbox: list[bytes], exact: bool) -> None:
        if exact:
            self._incoming_batches = {}
            for r, payload in enumerate(inbox):
                if r == self.rank or not payload:
                    continue
                self._incoming_batches[r] = messages.decode_spike_batch(payload)
        else:
            table: dict[int, float] = {}
            self._freq_tables = {}
            for r, payload in enumerate(inbox):
                if r == self.rank or not payload:
                    continue
                ids, vals = messages.decode_frequency_batch(payload)
                per_rank = {int(i): float(v) for i, v in zip(ids, vals)}
                self._freq_tables[r] = per_rank
                table.update(per_rank)
            if not self.cfg.per_target_draws:
                self.sampler.start_epoch(table)

    # -- main loop -------------------------------------------------------------

    def run(self):
        cfg = self.cfg
        exact = cfg.spike_mode == "exact"
        for step in range(cfg.total_steps):
            t0 = time.perf_counter()
            if exact:
                inbox = yield ("a2a", TAG_SPIKES, self._spike_rows())
                self._note_incoming_activity(inbox, exact=True)
            elif step % cfg.delta == 0:
                inbox = yield ("a2a", TAG_FREQUENCIES, self._frequency_rows())
                self._note_incoming_activity(inbox, exact=False)
            inputs = self._synaptic_inputs(step)
            t1 = time.perf_counter()
            self.phase_seconds["activity"] += t1 - t0
            self.phase_calls["activity"] += 1

            self.pop.step(inputs)
            self.prev_fired = self.pop.fired.copy()
            self.history.push(self.pop.fired)
            t2 = time.perf_counter()
            self.phase_seconds["elements"] += t2 - t1
            self.phase_calls["elements"] += 1

            self._record_step(step)

            if (step + 1) % cfg.plasticity_interval == 0:
                round_idx = (step + 1) // cfg.plasticity_interval - 1
                yield from self._connectivity_round(round_idx)
                self.phase_seconds["connectivity"] += time.perf_counter() - t2
                self.phase_calls["connectivity"] += 1

    def _record_step(self, step: int) -> None:
        cfg = self.cfg
        if cfg.record_spikes:
            for nid in self.pop.ids[self.pop.fired]:
                self.raster_rows.append((step, int(nid)))
        if step % cfg.calcium_every == 0 or step == cfg.total_steps - 1:
            for i, nid in enumerate(self.pop.ids):
                self.calcium_rows.append((step, int(nid),
                                          float(self.pop.calcium[i])))
        if step % cfg.metrics_every == 0 or step == cfg.total_steps - 1:
            s = self.stats
            self.metrics_rows.append((
                step, int(self.pop.ax_conn.sum()), s.bytes_sent,
                s.bytes_remotely_accessed, s.messages_sent, s.sync_points))

    # -- connectivity update -----------------------------------------------

    def _connectivity_round(self, round_idx: int):
        rs = RoundStats()
        # Phase 1: axon-initiated deletions.
        rows = self._plan_axonal_deletions(round_idx, rs)
        inbox = yield ("a2a", TAG_DELETE_AXON, rows)
        self._apply_deletion_notices(inbox, DELETE_FROM_AXON)
        # Phase 2: dendrite-initiated deletions, after phase 1 settled.
        rows = self._plan_dendritic_deletions(round_idx, rs)
        inbox = yield ("a2a", TAG_DELETE_DENDRITE, rows)
        self._apply_deletion_notices(inbox, DELETE_FROM_DENDRITE)

        # Octree aggregation and branch-node replication.
        rows = self._branch_rows()
        inbox = yield ("a2a", TAG_BRANCH, rows)
        self._build_view(inbox)

        # Partner search.
        outgoing, local_entries, sent_log = self._run_searches(round_idx, rs)
        inbox = yield ("a2a", TAG_REQUESTS, outgoing)
        entries = self._collect_entries(inbox, local_entries, round_idx)

        grouped: dict[tuple[int, int], list[_RequestEntry]] = {}
        for entry in entries:
            if entry.target_neuron_id is None:
                continue
            key = (entry.target_neuron_id, entry.element_kind)
            grouped.setdefault(key, []).append(entry)
        resolve_requests(grouped, self._dendritic_vacancy, round_idx,
                         self.cfg.master_seed)

        response_rows = self._commit_targets_and_build_responses(entries, rs)
        inbox = yield ("a2a", TAG_RESPONSES, response_rows)
        self._apply_responses(inbox, sent_log)
        rs.fetch_calls = self.view.fetch_calls if self.view else 0
        self.round_stats.append(rs)

    # deletions ---------------------------------------------------------------

    def _plan_axonal_deletions(self, round_idx: int,
                               rs: RoundStats) -> list[bytes]:
        notices: list[list[bytes]] = [[] for _ in range(self.k)]
        floor_ax = np.floor(self.pop.ax_grown).astype(np.int64)
        for i in range(self.pop.n):
            excess = int(self.pop.ax_conn[i] - floor_ax[i])
            if excess <= 0:
                continue
            bonds: list[int] = []
            for tgt in sorted(self.out_counts[i]):
                bonds.extend([tgt] * self.out_counts[i][tgt])
            nid = int(self.pop.ids[i])
            rng = substream(self.cfg.master_seed, "delete-ax", round_idx, nid)
            chosen = plasticity.plan_deletions(0, excess, bonds, rng)
            kind = int(self.pop.kinds[i])
            for tgt in chosen:
                rs.deletions += 1
                self._remove_synapse_source_side(i, tgt)
                owner = int(self.placement.owner[tgt])
                if owner == self.rank:
                    self._remove_synapse_target_side(
                        self.local_index[tgt], nid, kind)
                else:
                    notices[owner].append(DeletionNotice(
                        DELETE_FROM_AXON, nid, tgt, kind).encode())
        return [b"".join(per) for per in notices]

    def _plan_dendritic_deletions(self, round_idx: int,
                                  rs: RoundStats) -> list[bytes]:
        notices: list[list[bytes]] = [[] for _ in range(self.k)]
        for kind in (EXCITATORY, INHIBITORY):
            floor_den = np.floor(self.pop.den_grown[kind]).astype(np.int64)
            for i in range(self.pop.n):
                excess = int(self.pop.den_conn[kind][i] - floor_den[i])
                if excess <= 0:
                    continue
                bonds = []
                for (src, k2) in sorted(self.in_counts[i]):
                    if k2 == kind:
                        bonds.extend([src] * self.in_counts[i][(src, k2)])
                nid = int(self.pop.ids[i])
                rng = substream(self.cfg.master_seed, "delete-den",
                                round_idx, nid, kind)
                chosen = plasticity.plan_deletions(0, excess, bonds, rng)
                for src in chosen:
                    rs.deletions += 1
                    self._remove_synapse_target_side(i, src, kind)
                    owner = int(self.placement.owner[src])
                    if owner == self.rank:
                        self._remove_synapse_source_side(
                            self.local_index[src], nid)
                    else:
                        notices[owner].append(DeletionNotice(
                            DELETE_FROM_DENDRITE, src, nid, kind).encode())
        return [b"".join(per) for per in notices]

    def _apply_deletion_notices(self, inbox: list[bytes], side: int) -> None:
        all_notices: list[DeletionNotice] = []
        for r, payload in enumerate(inbox):
            if r == self.rank or not payload:
                continue
            all_notices.extend(messages.decode_stream(
                DeletionNotice, payload, messages.DELETION_SIZE))
        all_notices.sort(key=lambda d: (d.source_neuron_id,
                                        d.target_neuron_id, d.element_kind))
        for notice in all_notices:
            if side == DELETE_FROM_AXON:
                # The axon owner broke it; this rank hosts the target.
                tgt_local = self.local_index[notice.target_neuron_id]
                self._remove_synapse_target_side(
                    tgt_local, notice.source_neuron_id, notice.element_kind)
            else:
                src_local = self.local_index[notice.source_neuron_id]
                self._remove_synapse_source_side(
                    src_local, notice.target_neuron_id)

    # octree -------------------------------------------------------------------

    def _ensure_trees(self) -> None:
        if self._trees is not None:
            return
        lo, hi = self.placement.assignment.ranges[self.rank]
        neurons = [(int(nid), self.placement.positions[nid])
                   for nid in self.pop.ids]
        self._trees = build_local_tree(neurons, (lo, hi),
                                       self.placement.domain,
                                       self.placement.assignment.branch_level,
                                       rank=self.rank)
        self._node_index = {}
        for root in self._trees.values():
            self._index_nodes(root)

    def _index_nodes(self, node) -> None:
        self._node_index[node.node_id] = node
        if node.children:
            for child in node.children:
                if child is not None:
                    self._index_nodes(child)

    def _branch_rows(self) -> list[bytes]:
        self._ensure_trees()
        vac_ex = self.pop.vacant_dendritic(EXCITATORY)
        vac_in = self.pop.vacant_dendritic(INHIBITORY)
        vacancy = {int(nid): (int(vac_ex[i]), int(vac_in[i]))
                   for i, nid in enumerate(self.pop.ids)}
        position = {int(nid): self.placement.positions[int(nid)]
                    for nid in self.pop.ids}
        payload_parts = []
        self._my_branch_records = {}
        for sub in sorted(self._trees):
            root = self._trees[sub]
            aggregate_bottom_up(root, vacancy, position)
            rec = root.record()
            self._my_branch_records[sub] = rec
            payload_parts.append(messages.encode_branch_record(rec))
        payload = b"".join(payload_parts)
        return [payload if r != self.rank else b"" for r in range(self.k)]

    def _build_view(self, inbox: list[bytes]) -> None:
        branch_records: dict[int, NodeRecord] = dict(self._my_branch_records)
        for r, payload in enumerate(inbox):
            if r == self.rank or not payload:
                continue
            for rec in messages.decode_branch_payload(payload):
                _, path = unpack_node_id(rec.node_id)
                kind, neuron_id = self.placement.branch_info[path]
                rec.kind = kind
                rec.neuron_id = neuron_id
                branch_records[path] = rec
        b = self.placement.assignment.branch_level
        upper = {rec.node_id: rec
                 for rec in build_upper_tree(branch_records, b).values()}
        fetch = None
        if self.cfg.algorithm == plasticity.ALGO_CLASSIC:
            fetch = self.fetch_fn
        self.view = TreeView(self.placement.domain,
                             self.placement.assignment, self.rank,
                             self.cfg.algorithm, upper, branch_records,
                             self._trees, fetch_fn=fetch)

    def fetch_handler(self, node_id: int) -> bytes | None:
        """Serve one node record to a remote rank (one-sided read)."""
        depth, _ = unpack_node_id(node_id)
        b = self.placement.assignment.branch_level
        if depth < b or depth > MAX_DEPTH:
            return None
        sub = subdomain_of(node_id, b)
        lo, hi = self.placement.assignment.ranges[self.rank]
        if not lo <= sub < hi:
            return None
        node = self._node_index.get(node_id)
        if node is not None:
            return messages.encode_fetch_record(node.record())
        empty = NodeRecord(node_id=node_id, vacant_ex=0, vacant_in=0,
                           centroid_ex=np.zeros(3), centroid_in=np.zeros(3),
                           kind=KIND_LEAF_EMPTY)
        return messages.encode_fetch_record(empty)

    # search and negotiation -----------------------------------------------

    def _run_searches(self, round_idx: int, rs: RoundStats):
        outgoing_req: list[list[bytes]] = [[] for _ in range(self.k)]
        sent_log: list[list[tuple]] = [[] for _ in range(self.k)]
        local_entries: list[_RequestEntry] = []
        vacant_ax = self.pop.vacant_axonal()
        for i in range(self.pop.n):
            if vacant_ax[i] <= 0:
                continue
            rs.searchers += 1
            nid = int(self.pop.ids[i])
            outcome = find_target(
                self.view, nid, self.placement.positions[nid],
                self.placement.deep_paths[nid], int(self.pop.kinds[i]),
                self.search_cfg, round_idx, self.cfg.master_seed)
            if outcome.kind == "none":
                continue
            if outcome.kind == "local":
                rs.local_requests += 1
                local_entries.append(_RequestEntry(
                    source_neuron_id=nid,
                    element_kind=int(self.pop.kinds[i]),
                    target_neuron_id=outcome.target_neuron_id,
                    origin_rank=-1))
            elif outcome.kind == "v1":
                rs.v1_sent += 1
                dest = outcome.owner_rank
                outgoing_req[dest].append(outcome.request_v1.encode())
                sent_log[dest].append(("v1", i,
                                       outcome.request_v1.target_neuron_id))
            else:
                rs.v2_sent += 1
                dest = outcome.owner_rank
                outgoing_req[dest].append(outcome.request_v2.encode())
                sent_log[dest].append(("v2", i, None))
        rows = [b"".join(parts) for parts in outgoing_req]
        return rows, local_entries, sent_log

    def _collect_entries(self, inbox: list[bytes],
                         local_entries: list[_RequestEntry],
                         round_idx: int) -> list[_RequestEntry]:
        entries = list(local_entries)
        aware = self.cfg.algorithm == plasticity.ALGO_LOCATION_AWARE
        for r, payload in enumerate(inbox):
            if r == self.rank or not payload:
                continue
            if aware:
                reqs = messages.decode_stream(
                    FormationRequestV2, payload, messages.V2_REQUEST_SIZE)
                for pos, req in enumerate(reqs):
                    found = handle_forwarded_request(
                        self.view, req, self.search_cfg, round_idx,
                        self.cfg.master_seed)
                    entries.append(_RequestEntry(
                        source_neuron_id=req.source_neuron_id,
                        element_kind=req.element_kind,
                        target_neuron_id=found, origin_rank=r,
                        channel_pos=pos, rtype="v2"))
            else:
                reqs = messages.decode_stream(
                    FormationRequestV1, payload, messages.V1_REQUEST_SIZE)
                for pos, req in enumerate(reqs):
                    target = req.target_neuron_id
                    known = target in self.local_index
                    entries.append(_RequestEntry(
                        source_neuron_id=req.source_neuron_id,
                        element_kind=req.element_kind,
                        target_neuron_id=target if known else None,
                        origin_rank=r, channel_pos=pos, rtype="v1"))
        return entries

    def _dendritic_vacancy(self, target_nid: int, kind: int) -> int:
        i = self.local_index[target_nid]
        grown = int(np.floor(self.pop.den_grown[kind][i]))
        return max(0, grown - int(self.pop.den_conn[kind][i]))

    def _commit_targets_and_build_responses(
            self, entries: list[_RequestEntry],
            rs: RoundStats) -> list[bytes]:
        per_origin: dict[int, list[_RequestEntry]] = {}
        for entry in entries:
            if entry.accepted and entry.target_neuron_id is not None:
                rs.accepted += 1
                tgt_local = self.local_index[entry.target_neuron_id]
                self._add_synapse_target_side(
                    tgt_local, entry.source_neuron_id, entry.element_kind)
            else:
                rs.declined += 1
            if entry.origin_rank >= 0:
                per_origin.setdefault(entry.origin_rank, []).append(entry)
            elif entry.accepted:
                src_local = self.local_index[entry.source_neuron_id]
                self._add_synapse_source_side(src_local,
                                              entry.target_neuron_id)
        rows = [b""] * self.k
        for origin, origin_entries in per_origin.items():
            origin_entries.sort(key=lambda e: e.channel_pos)
            parts = []
            for entry in origin_entries:
                status = STATUS_SUCCESS if entry.accepted else STATUS_DECLINED
                if entry.rtype == "v2":
                    found = entry.target_neuron_id or 0
                    parts.append(FormationResponseV2(found, status).encode())
                else:
                    parts.append(FormationResponseV1(status).encode())
            rows[origin] = b"".join(parts)
        return rows

    def _apply_responses(self, inbox: list[bytes],
                         sent_log: list[list[tuple]]) -> None:
        for r, payload in enumerate(inbox):
            log = sent_log[r]
            if r == self.rank or not log:
                continue
            offset = 0
            for (rtype, src_local, target_nid) in log:
                if rtype == "v1":
                    resp = FormationResponseV1.decode(payload, offset)
                    offset += messages.V1_RESPONSE_SIZE
                    if resp.status == STATUS_SUCCESS:
                        self._add_synapse_source_side(src_local, target_nid)
                else:
                    resp = FormationResponseV2.decode(payload, offset)
                    offset += messages.V2_RESPONSE_SIZE
                    if resp.status == STATUS_SUCCESS:
                        self._add_synapse_source_side(src_local,
                                                      resp.found_neuron_id)
            if offset != len(payload):
                raise RuntimeError("response payload size mismatch")

    # -- output bundle -------------------------------------------------------

    def connectome_rows(self) -> list[tuple[int, int, int]]:
        rows = []
        for i in range(self.pop.n):
            src = int(self.pop.ids[i])
            kind = int(self.pop.kinds[i])
            for tgt in sorted(self.out_counts[i]):
                rows.extend([(src, tgt, kind)] * self.out_counts[i][tgt])
        return rows

    def bundle(self) -> dict:
        return {
            "rank": self.rank,
            "metrics": self.metrics_rows,
            "calcium": self.calcium_rows,
            "raster": self.raster_rows,
            "connectome": self.connectome_rows(),
            "comm": self.stats.snapshot(),
            "rounds": [vars(r) for r in self.round_stats],
            "phase_seconds": dict(self.phase_seconds),
            "phase_calls": dict(self.phase_calls),
            "final_calcium": {int(nid): float(self.pop.calcium[i])
                              for i, nid in enumerate(self.pop.ids)},
            "in_degree": {int(nid): int(self.pop.den_conn[:, i].sum())
                          for i, nid in enumerate(self.pop.ids)},
        }


# ---------------------------------------------------------------------------
# Backends


def _drive_lockstep(contexts: list[RankContext], backend: LocalBackend):
    """Advance all rank generators through identical collective schedules."""
    gens = [ctx.run() for ctx in contexts]
    k = len(gens)
    DONE = object()
    pending: list = [None] * k

    def advance(r: int, value):
        try:
            pending[r] = gens[r].send(value)
        except StopIteration:
            pending[r] = DONE

    for r in range(k):
        try:
            pending[r] = next(gens[r])
        except StopIteration:
            pending[r] = DONE
    while True:
        if all(p is DONE for p in pending):
            return
        if any(p is DONE for p in pending):
            raise RuntimeError("ranks diverged: unequal collective schedule")
        ops = {p[0] for p in pending}
        tags = {p[1] for p in pending if p[0] == "a2a"}
        if ops != {"a2a"} or len(tags) != 1:
            raise RuntimeError(f"ranks diverged: mixed collectives {ops}/{tags}")
        tag = tags.pop()
        delivered = backend.exchange([p[2] for p in pending], tag)
        for r in range(k):
            advance(r, delivered[r])


def _drive_socket(ctx: RankContext, transport: SocketTransport):
    gen = ctx.run()
    try:
        request = next(gen)
    except StopIteration:
        return
    while True:
        op = request[0]
        if op == "a2a":
            _, tag, rows = request
            inbox = transport.all_to_all(rows, tag)
        else:
            transport.barrier()
            inbox = None
        try:
            request = gen.send(inbox)
        except StopIteration:
            return


@dataclass
class RunResult:
    config: SimConfig
    bundles: list | None
    out_dir: str | None = None
    contexts: list | None = None


def run_simulation(cfg: SimConfig, rank: int | None = None,
                   keep_contexts: bool = False) -> RunResult:
    """Execute a full run; returns gathered outputs on (local) rank 0.

    With the local backend all ranks run in this process.  With the tcp
    backend this process acts as one rank of the mesh and only rank 0
    returns bundles and writes output files.
    """
    placement = init_network(cfg)
    if cfg.backend == "local":
        backend = LocalBackend(cfg.rank_count)
        contexts = [
            RankContext(cfg, r, placement,
                        fetch_fn=_local_fetch(backend, r),
                        stats=backend.stats[r])
            for r in range(cfg.rank_count)
        ]
        for r, ctx in enumerate(contexts):
            backend.set_fetch_handler(r, ctx.fetch_handler)
        _drive_lockstep(contexts, backend)
        bundles = [ctx.bundle() for ctx in contexts]
        if cfg.out_dir:
            emit_outputs(Path(cfg.out_dir), cfg, bundles)
        return RunResult(config=cfg, bundles=bundles,
                         out_dir=cfg.out_dir or None,
                         contexts=contexts if keep_contexts else None)

    if rank is None:
        raise ValueError("tcp backend requires an explicit rank")
    transport = SocketTransport(rank, cfg.endpoints())
    try:
        ctx = RankContext(cfg, rank, placement,
                          fetch_fn=transport.fetch, stats=transport.stats)
        transport.set_fetch_handler(ctx.fetch_handler)
        _drive_socket(ctx, transport)
        blob = pickle.dumps(ctx.bundle())
        rows = [b""] * cfg.rank_count
        rows[0] = blob
        inbox = transport.all_to_all(rows, TAG_GATHER, accounted=False)
        if rank == 0:
            bundles = [pickle.loads(payload) for payload in inbox]
            if cfg.out_dir:
                emit_outputs(Path(cfg.out_dir), cfg, bundles)
            return RunResult(config=cfg, bundles=bundles,
                             out_dir=cfg.out_dir or None,
                             contexts=[ctx] if keep_contexts else None)
        return RunResult(config=cfg, bundles=None,
                         contexts=[ctx] if keep_contexts else None)
    finally:
        transport.close()


def _local_fetch(backend: LocalBackend, rank: int):
    def fetch(owner: int, node_id: int) -> bytes:
        return backend.fetch(rank, owner, node_id)
    return fetch


# ---------------------------------------------------------------------------
# Output emission


def emit_outputs(out_dir: Path, cfg: SimConfig, bundles: list) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_step: dict[int, list] = {}
    for bundle in bundles:
        for row in bundle["metrics"]:
            by_step.setdefault(row[0], []).append(row)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        fh.write("step,synapse_count,bytes_sent,bytes_remotely_accessed,"
                 "messages_sent,sync_points\n")
        for step in sorted(by_step):
            rows = by_step[step]
            fh.write("{},{},{},{},{},{}\n".format(
                step,
                sum(r[1] for r in rows),
                sum(r[2] for r in rows),
                sum(r[3] for r in rows),
                sum(r[4] for r in rows),
                max(r[5] for r in rows)))

    calcium = sorted((row for b in bundles for row in b["calcium"]),
                     key=lambda r: (r[0], r[1]))
    with open(out_dir / "calcium.csv", "w", newline="") as fh:
        fh.write("step,neuron_id,calcium\n")
        for step, nid, value in calcium:
            fh.write(f"{step},{nid},{value!r}\n")

    if cfg.record_spikes:
        raster = sorted((row for b in bundles for row in b["raster"]))
        with open(out_dir / "spikes.csv", "w", newline="") as fh:
            fh.write("step,neuron_id\n")
            for step, nid in raster:
                fh.write(f"{step},{nid}\n")

    with open(out_dir / "comm.csv", "w", newline="") as fh:
        fh.write("rank,bytes_sent,bytes_remotely_accessed,messages_sent,"
                 "sync_points,activity_exchanges\n")
        for bundle in sorted(bundles, key=lambda b: b["rank"]):
            s = bundle["comm"]
            fh.write("{},{},{},{},{},{}\n".format(
                bundle["rank"], s.bytes_sent, s.bytes_remotely_accessed,
                s.messages_sent, s.sync_points, s.activity_exchanges))

    connectome = sorted(row for b in bundles for row in b["connectome"])
    with open(out_dir / "connectome.csv", "w", newline="") as fh:
        fh.write("source_id,target_id,kind\n")
        for src, tgt, kind in connectome:
            fh.write(f"{src},{tgt},{kind}\n")

    with open(out_dir / "timings.csv", "w", newline="") as fh:
        fh.write("rank,phase,calls,total_seconds,mean_seconds\n")
        phase_names = ("activity", "elements", "connectivity")
        across: dict[str, list[float]] = {p: [] for p in phase_names}
        for bundle in sorted(bundles, key=lambda b: b["rank"]):
            for phase in phase_names:
                calls = bundle["phase_calls"][phase]
                total = bundle["phase_seconds"][phase]
                mean = total / calls if calls else 0.0
                across[phase].append(mean)
                fh.write(f"{bundle['rank']},{phase},{calls},{total!r},{mean!r}\n")
        for phase in phase_names:
            means = across[phase]
            overall = sum(means) / len(means) if means else 0.0
            fh.write(f"all,{phase},{len(means)},,{overall!r}\n")

    (out_dir / "manifest.txt").write_text(cfg.to_text())

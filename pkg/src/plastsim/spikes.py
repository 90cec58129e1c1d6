"""Cross-rank activity propagation.

Exact mode ships sorted batches of fired neuron ids every step and the
receiver answers membership questions by binary search.  Frequency mode
ships one (neuron, firing frequency) table per epoch; between epochs the
receiving rank draws Bernoulli samples from the transmitted frequency,
one draw per (receiving rank, source neuron, step), shared by all local
targets of that source.  Local synapse pairs always see exact spikes.
"""

from __future__ import annotations

import numpy as np

from .rng import substream


def gather_spike_batches(fired_ids: np.ndarray,
                         destination_ranks: dict[int, set[int]],
                         rank_count: int) -> dict[int, np.ndarray]:
    """Sorted per-destination id batches for the neurons that fired.

    ``destination_ranks`` maps a local neuron id to the set of ranks
    hosting at least one of its synapse targets; a fired neuron appears
    in exactly those ranks' batches.
    """
    per_dest: dict[int, list[int]] = {r: [] for r in range(rank_count)}
    for nid in np.sort(fired_ids):
        for dest in destination_ranks.get(int(nid), ()):
            per_dest[dest].append(int(nid))
    return {dest: np.asarray(ids, dtype=np.uint64)
            for dest, ids in per_dest.items()}


def lookup_spike(batch: np.ndarray, neuron_id: int) -> bool:
    """Binary-search membership test in a sorted spike batch."""
    if __debug__ and len(batch) > 1:
        assert (batch[1:] > batch[:-1]).all(), "spike batch must be sorted"
    idx = int(np.searchsorted(batch, neuron_id))
    return idx < len(batch) and int(batch[idx]) == int(neuron_id)


def lookup_many(batch: np.ndarray, neuron_ids: np.ndarray) -> np.ndarray:
    """Vectorized binary search; boolean per queried id."""
    idx = np.searchsorted(batch, neuron_ids)
    idx = np.minimum(idx, max(len(batch) - 1, 0))
    if len(batch) == 0:
        return np.zeros(len(neuron_ids), dtype=bool)
    return batch[idx] == neuron_ids


def compute_frequencies(spike_counts: np.ndarray, delta: int) -> np.ndarray:
    """Firing frequency per neuron over the trailing epoch: count / delta."""
    if delta < 1:
        raise ValueError("epoch length must be at least 1")
    counts = np.asarray(spike_counts, dtype=np.float64)
    if (counts > delta).any():
        raise ValueError("spike count exceeds epoch length")
    return counts / float(delta)


def sample_remote_spike(frequency: float, rng: np.random.Generator) -> bool:
    """One Bernoulli(frequency) draw standing in for a remote spike."""
    if not 0.0 <= frequency <= 1.0:
        raise ValueError("frequency must lie in [0, 1]")
    return bool(rng.random() < frequency)


def synaptic_input(signs: np.ndarray, spiked: np.ndarray,
                   strength: float) -> float:
    """Summed input of one neuron: strength * sum(sign * 1[spiked])."""
    return float(strength * np.dot(signs, spiked.astype(np.float64)))


class SpikeHistory:
    """Trailing-window spike counts per local neuron (ring buffer)."""

    def __init__(self, n: int, window: int):
        self.window = window
        self._buffer = np.zeros((window, n), dtype=np.uint8)
        self._pos = 0
        self.counts = np.zeros(n, dtype=np.int64)

    def push(self, fired: np.ndarray) -> None:
        row = self._buffer[self._pos]
        self.counts -= row
        row[:] = fired
        self.counts += row
        self._pos = (self._pos + 1) % self.window


class RemoteSampler:
    """Per-epoch presampled remote spikes for one receiving rank.

    At each epoch boundary the receiver draws ``delta`` uniforms per
    known remote source from that source's dedicated stream and compares
    them against the transmitted frequency, yielding the source's spike
    indicator for every step of the epoch.  Sources that appear in a
    later epoch start their stream then; sources absent from the current
    table contribute no spikes.
    """

    def __init__(self, master_seed: int, receiver_rank: int, delta: int):
        self._master_seed = master_seed
        self._rank = receiver_rank
        self._delta = delta
        self._streams: dict[int, np.random.Generator] = {}
        self._block: dict[int, np.ndarray] = {}

    def start_epoch(self, table: dict[int, float]) -> None:
        self._block = {}
        for nid in sorted(table):
            gen = self._streams.get(nid)
            if gen is None:
                gen = substream(self._master_seed, "remote-spike",
                                self._rank, nid)
                self._streams[nid] = gen
            uniforms = gen.random(self._delta)
            self._block[nid] = uniforms < table[nid]

    def spiked(self, source_id: int, step_in_epoch: int) -> bool:
        block = self._block.get(source_id)
        if block is None:
            return False
        return bool(block[step_in_epoch])

    def spiked_many(self, source_ids: np.ndarray,
                    step_in_epoch: int) -> np.ndarray:
        out = np.zeros(len(source_ids), dtype=bool)
        for i, nid in enumerate(source_ids):
            block = self._block.get(int(nid))
            if block is not None:
                out[i] = block[step_in_epoch]
        return out

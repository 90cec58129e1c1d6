"""Binary wire formats, all little-endian, fixed layouts.

Request/response records are concatenated without headers (their sizes
are fixed); the activity batches carry an explicit u32 count prefix.

    formation request v1   source u64 | target u64 | kind u8          = 17 B
    formation request v2   source u64 | pos 3*f64 | node u64
                           | is_leaf u8 | kind u8                     = 42 B
    formation response v1  status u8                                  =  1 B
    formation response v2  found u64 | status u8                      =  9 B
    branch record          node u64 | vac_ex u32 | vac_in u32
                           | centroid_ex 3*f64 | centroid_in 3*f64    = 64 B
    deletion notice        side u8 | source u64 | target u64 | kind u8 = 18 B
    spike batch            count u32 | ids u64*count
    frequency batch        count u32 | (id u64 | freq f64)*count
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .octree import KIND_INNER, KIND_LEAF_EMPTY, KIND_LEAF_NEURON, NodeRecord

_V1_REQ = struct.Struct("<QQB")
_V2_REQ = struct.Struct("<QdddQBB")
_V1_RESP = struct.Struct("<B")
_V2_RESP = struct.Struct("<QB")
_BRANCH = struct.Struct("<QIIdddddd")
_DELETION = struct.Struct("<BQQB")
_COUNT = struct.Struct("<I")
_FETCH_TAIL = struct.Struct("<BQ")

V1_REQUEST_SIZE = _V1_REQ.size            # 17
V2_REQUEST_SIZE = _V2_REQ.size            # 42
V1_RESPONSE_SIZE = _V1_RESP.size          # 1
V2_RESPONSE_SIZE = _V2_RESP.size          # 9
BRANCH_RECORD_SIZE = _BRANCH.size         # 64
DELETION_SIZE = _DELETION.size            # 18

STATUS_DECLINED = 0
STATUS_SUCCESS = 1

DELETE_FROM_AXON = 0
DELETE_FROM_DENDRITE = 1


@dataclass(frozen=True)
class FormationRequestV1:
    source_neuron_id: int
    target_neuron_id: int
    element_kind: int

    def encode(self) -> bytes:
        return _V1_REQ.pack(self.source_neuron_id, self.target_neuron_id,
                            self.element_kind)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "FormationRequestV1":
        s, t, k = _V1_REQ.unpack_from(data, offset)
        return cls(s, t, k)


@dataclass(frozen=True)
class FormationRequestV2:
    source_neuron_id: int
    source_position: tuple[float, float, float]
    target_node_id: int
    target_is_leaf: int
    element_kind: int

    def encode(self) -> bytes:
        x, y, z = self.source_position
        return _V2_REQ.pack(self.source_neuron_id, x, y, z,
                            self.target_node_id, self.target_is_leaf,
                            self.element_kind)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "FormationRequestV2":
        s, x, y, z, node, leaf, kind = _V2_REQ.unpack_from(data, offset)
        return cls(s, (x, y, z), node, leaf, kind)


@dataclass(frozen=True)
class FormationResponseV1:
    status: int

    def encode(self) -> bytes:
        return _V1_RESP.pack(self.status)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "FormationResponseV1":
        return cls(_V1_RESP.unpack_from(data, offset)[0])


@dataclass(frozen=True)
class FormationResponseV2:
    found_neuron_id: int
    status: int

    def encode(self) -> bytes:
        return _V2_RESP.pack(self.found_neuron_id, self.status)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "FormationResponseV2":
        found, status = _V2_RESP.unpack_from(data, offset)
        return cls(found, status)


@dataclass(frozen=True)
class DeletionNotice:
    """A broken synapse the partner rank must mirror.

    ``side`` names which end initiated the break: the axon owner tells
    the dendrite owner (and vice versa) so each decrements the right
    connected counter.
    """

    side: int
    source_neuron_id: int
    target_neuron_id: int
    element_kind: int

    def encode(self) -> bytes:
        return _DELETION.pack(self.side, self.source_neuron_id,
                              self.target_neuron_id, self.element_kind)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "DeletionNotice":
        return cls(*_DELETION.unpack_from(data, offset))


def decode_stream(cls, data: bytes, record_size: int) -> list:
    if len(data) % record_size:
        raise ValueError(
            f"payload length {len(data)} not a multiple of {record_size}")
    return [cls.decode(data, off) for off in range(0, len(data), record_size)]


def encode_branch_record(rec: NodeRecord) -> bytes:
    return _BRANCH.pack(rec.node_id, rec.vacant_ex, rec.vacant_in,
                        *rec.centroid_ex, *rec.centroid_in)


def decode_branch_record(data: bytes, offset: int = 0) -> NodeRecord:
    vals = _BRANCH.unpack_from(data, offset)
    return NodeRecord(node_id=vals[0], vacant_ex=vals[1], vacant_in=vals[2],
                      centroid_ex=np.array(vals[3:6]),
                      centroid_in=np.array(vals[6:9]))


def decode_branch_payload(data: bytes) -> list[NodeRecord]:
    if len(data) % BRANCH_RECORD_SIZE:
        raise ValueError("malformed branch payload")
    return [decode_branch_record(data, off)
            for off in range(0, len(data), BRANCH_RECORD_SIZE)]


def encode_fetch_record(rec: NodeRecord) -> bytes:
    """Fetched node: the 64-byte exchange record plus kind/neuron tail.

    The 9 bookkeeping bytes let the fetching rank classify the node and
    address a leaf's neuron; accounting charges the 64-byte record only.
    """
    nid = rec.neuron_id if rec.neuron_id is not None else 0
    return encode_branch_record(rec) + _FETCH_TAIL.pack(rec.kind, nid)


def decode_fetch_record(data: bytes) -> NodeRecord:
    rec = decode_branch_record(data)
    kind, nid = _FETCH_TAIL.unpack_from(data, BRANCH_RECORD_SIZE)
    rec.kind = kind
    rec.neuron_id = nid if kind == KIND_LEAF_NEURON else None
    return rec


def encode_spike_batch(ids: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(ids, dtype="<u8")
    return _COUNT.pack(len(arr)) + arr.tobytes()


def decode_spike_batch(data: bytes) -> np.ndarray:
    (count,) = _COUNT.unpack_from(data, 0)
    ids = np.frombuffer(data, dtype="<u8", count=count, offset=_COUNT.size)
    if len(ids) != count:
        raise ValueError("truncated spike batch")
    return ids


_FREQ_ENTRY = np.dtype([("id", "<u8"), ("freq", "<f8")])


def encode_frequency_batch(ids: np.ndarray, freqs: np.ndarray) -> bytes:
    entries = np.empty(len(ids), dtype=_FREQ_ENTRY)
    entries["id"] = ids
    entries["freq"] = freqs
    return _COUNT.pack(len(entries)) + entries.tobytes()


def decode_frequency_batch(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    (count,) = _COUNT.unpack_from(data, 0)
    entries = np.frombuffer(data, dtype=_FREQ_ENTRY, count=count,
                            offset=_COUNT.size)
    if len(entries) != count:
        raise ValueError("truncated frequency batch")
    return entries["id"].copy(), entries["freq"].copy()

import numpy as np
import pytest

from plastsim.messages import (
    BRANCH_RECORD_SIZE,
    DELETION_SIZE,
    V1_REQUEST_SIZE,
    V1_RESPONSE_SIZE,
    V2_REQUEST_SIZE,
    V2_RESPONSE_SIZE,
    DeletionNotice,
    FormationRequestV1,
    FormationRequestV2,
    FormationResponseV1,
    FormationResponseV2,
    decode_branch_payload,
    decode_branch_record,
    decode_fetch_record,
    decode_frequency_batch,
    decode_spike_batch,
    decode_stream,
    encode_branch_record,
    encode_fetch_record,
    encode_frequency_batch,
    encode_spike_batch,
)
from plastsim.octree import KIND_LEAF_NEURON, NodeRecord, pack_node_id


class TestFixedSizes:
    def test_byte_arithmetic(self):
        assert V1_REQUEST_SIZE == 17     # 8 + 8 + 1
        assert V2_REQUEST_SIZE == 42     # 8 + 24 + 8 + 1 + 1
        assert V1_RESPONSE_SIZE == 1
        assert V2_RESPONSE_SIZE == 9     # 8 + 1
        assert BRANCH_RECORD_SIZE == 64  # 8 + 4 + 4 + 24 + 24
        assert DELETION_SIZE == 18

    def test_encoded_lengths(self):
        req1 = FormationRequestV1(1, 2, 0)
        req2 = FormationRequestV2(1, (0.5, 1.5, 2.5), 3, 1, 0)
        assert len(req1.encode()) == 17
        assert len(req2.encode()) == 42
        assert len(FormationResponseV1(1).encode()) == 1
        assert len(FormationResponseV2(9, 1).encode()) == 9
        assert len(DeletionNotice(0, 1, 2, 0).encode()) == 18


class TestRoundTrips:
    def test_v1_request_random(self):
        rng = np.random.default_rng(101)
        for _ in range(2000):
            msg = FormationRequestV1(int(rng.integers(0, 2 ** 64, dtype=np.uint64)),
                                     int(rng.integers(0, 2 ** 64, dtype=np.uint64)),
                                     int(rng.integers(0, 2)))
            assert FormationRequestV1.decode(msg.encode()) == msg

    def test_v2_request_random(self):
        rng = np.random.default_rng(102)
        for _ in range(2000):
            pos = tuple(float(x) for x in rng.normal(size=3) * 1e3)
            msg = FormationRequestV2(int(rng.integers(0, 2 ** 64, dtype=np.uint64)), pos,
                                     int(rng.integers(0, 2 ** 64, dtype=np.uint64)),
                                     int(rng.integers(0, 2)),
                                     int(rng.integers(0, 2)))
            assert FormationRequestV2.decode(msg.encode()) == msg

    def test_responses_random(self):
        rng = np.random.default_rng(103)
        for _ in range(2000):
            r2 = FormationResponseV2(int(rng.integers(0, 2 ** 64, dtype=np.uint64)),
                                     int(rng.integers(0, 2)))
            assert FormationResponseV2.decode(r2.encode()) == r2
        assert FormationResponseV1.decode(FormationResponseV1(0).encode()).status == 0
        assert FormationResponseV1.decode(FormationResponseV1(1).encode()).status == 1

    def test_deletion_notice_roundtrip(self):
        msg = DeletionNotice(1, 77, 88, 1)
        assert DeletionNotice.decode(msg.encode()) == msg

    def test_stream_decoding_and_length_check(self):
        reqs = [FormationRequestV1(i, i + 1, i % 2) for i in range(5)]
        blob = b"".join(r.encode() for r in reqs)
        assert decode_stream(FormationRequestV1, blob, 17) == reqs
        with pytest.raises(ValueError):
            decode_stream(FormationRequestV1, blob[:-1], 17)


class TestBranchAndFetchRecords:
    def _record(self, rng):
        return NodeRecord(
            node_id=pack_node_id(int(rng.integers(0, 10)),
                                 int(rng.integers(0, 8 ** 9))),
            vacant_ex=int(rng.integers(0, 1000)),
            vacant_in=int(rng.integers(0, 1000)),
            centroid_ex=rng.normal(size=3) * 500,
            centroid_in=rng.normal(size=3) * 500,
        )

    def test_branch_record_roundtrip_is_bit_exact(self):
        rng = np.random.default_rng(104)
        for _ in range(500):
            rec = self._record(rng)
            out = decode_branch_record(encode_branch_record(rec))
            assert out.node_id == rec.node_id
            assert out.vacant_ex == rec.vacant_ex
            assert out.vacant_in == rec.vacant_in
            assert np.array_equal(out.centroid_ex, rec.centroid_ex)
            assert np.array_equal(out.centroid_in, rec.centroid_in)

    def test_branch_payload_concatenation(self):
        rng = np.random.default_rng(105)
        recs = [self._record(rng) for _ in range(7)]
        blob = b"".join(encode_branch_record(r) for r in recs)
        out = decode_branch_payload(blob)
        assert [r.node_id for r in out] == [r.node_id for r in recs]
        with pytest.raises(ValueError):
            decode_branch_payload(blob[:-3])

    def test_fetch_record_carries_kind_and_neuron(self):
        rng = np.random.default_rng(106)
        rec = self._record(rng)
        rec.kind = KIND_LEAF_NEURON
        rec.neuron_id = 4242
        out = decode_fetch_record(encode_fetch_record(rec))
        assert out.kind == KIND_LEAF_NEURON
        assert out.neuron_id == 4242


class TestBatches:
    def test_spike_batch_roundtrip(self):
        ids = np.array([3, 17, 999, 2 ** 40], dtype=np.uint64)
        out = decode_spike_batch(encode_spike_batch(ids))
        assert np.array_equal(out, ids)
        assert len(encode_spike_batch(ids)) == 4 + 8 * len(ids)

    def test_empty_spike_batch(self):
        out = decode_spike_batch(encode_spike_batch(np.array([], dtype=np.uint64)))
        assert len(out) == 0

    def test_frequency_batch_roundtrip(self):
        ids = np.array([1, 5, 7], dtype=np.uint64)
        freqs = np.array([0.0, 0.25, 1.0])
        blob = encode_frequency_batch(ids, freqs)
        assert len(blob) == 4 + 16 * len(ids)
        out_ids, out_freqs = decode_frequency_batch(blob)
        assert np.array_equal(out_ids, ids)
        assert np.array_equal(out_freqs, freqs)

    def test_truncated_batches_rejected(self):
        blob = encode_spike_batch(np.array([1, 2], dtype=np.uint64))
        with pytest.raises(ValueError):
            decode_spike_batch(blob[:-4])

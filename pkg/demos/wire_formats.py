# The exact bytes that cross rank boundaries.  Request and response
# records have fixed layouts (little-endian, no padding); activity
# batches carry a u32 count prefix.

import numpy as np

from plastsim.messages import (
    FormationRequestV1, FormationRequestV2, FormationResponseV1,
    FormationResponseV2, DeletionNotice, encode_spike_batch,
    encode_frequency_batch, encode_branch_record,
)
from plastsim.octree import NodeRecord, pack_node_id


def dump(label, blob):
    groups = [blob[i:i + 8].hex() for i in range(0, len(blob), 8)]
    print(f"{label:28} {len(blob):3d} B  {' '.join(groups)}")


print("formation negotiation records")
print("-" * 72)
v1 = FormationRequestV1(source_neuron_id=17, target_neuron_id=42,
                        element_kind=0)
dump("request v1 (src|tgt|kind)", v1.encode())

v2 = FormationRequestV2(source_neuron_id=17,
                        source_position=(123.0, 456.0, 789.0),
                        target_node_id=pack_node_id(2, 0o13),
                        target_is_leaf=0, element_kind=0)
dump("request v2 (+pos, node)", v2.encode())

dump("response v1 (status)", FormationResponseV1(1).encode())
dump("response v2 (found|status)", FormationResponseV2(42, 1).encode())
dump("deletion notice", DeletionNotice(0, 17, 42, 0).encode())

print("\nactivity payloads")
print("-" * 72)
ids = np.array([3, 17, 99], dtype=np.uint64)
dump("spike batch (3 ids)", encode_spike_batch(ids))
dump("frequency batch (2 entries)",
     encode_frequency_batch(np.array([3, 17], dtype=np.uint64),
                            np.array([0.10, 0.25])))

print("\noctree branch record (replicated at every connectivity update)")
print("-" * 72)
rec = NodeRecord(node_id=pack_node_id(1, 5), vacant_ex=7, vacant_in=0,
                 centroid_ex=np.array([600.0, 100.0, 700.0]),
                 centroid_in=np.zeros(3))
dump("branch record", encode_branch_record(rec))

print("\nround-trip check")
print("-" * 72)
print("decode(encode(v2)) == v2:",
      FormationRequestV2.decode(v2.encode()) == v2)

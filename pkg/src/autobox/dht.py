"""In-vehicle distributed hash table with XOR-distance ownership.

Desk-scale model of the level-1 store: each module hosts one node, node
ids are digests of module serial numbers, and a record key is owned by the
node whose id minimizes the XOR distance to it. Lookups walk greedily
through per-node routing tables bucketized by shared-prefix length (bucket
capacity k). The walk is exact on a fully-live network: a non-owner always
has at least one strictly closer peer in the bucket that covers the key,
because every member of that bucket flips the same distance-dominating bit.

Node stores are byte-bounded. A record's accounted size is the byte length
of its dump line plus the newline, so the budget is auditable straight off
the store dump. Records become eviction-eligible only once a checkpoint
covers them (checkpoint_floor); filling a store with uncovered records
raises CheckpointRequired instead of silently dropping data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Iterator, Mapping

from .auditcore import AuditRecord, sha256_hex

ID_BITS = 256

DEFAULT_STORE_LIMIT_BYTES = 2048  # fits the constrained-ROM budget per node
DEFAULT_BUCKET_CAPACITY = 4


class NodeUnavailable(RuntimeError):
    """The named node is failed or unknown and cannot serve the request."""


class CheckpointRequired(RuntimeError):
    """A store is full of records no checkpoint covers yet.

    The caller must capture a meta-hash (advancing the checkpoint floor)
    before the write can proceed; nothing was evicted.
    """

    def __init__(self, node_id: str, needed_bytes: int):
        super().__init__(
            f"node {node_id[:12]}… needs {needed_bytes} bytes but only holds "
            "records newer than the checkpoint floor"
        )
        self.node_id = node_id
        self.needed_bytes = needed_bytes


def node_id_for_serial(serial_number: str) -> str:
    """Derive a node id from the hosting module's serial number."""
    return sha256_hex(serial_number.encode("utf-8"))


def xor_distance(a: str, b: str) -> int:
    return int(a, 16) ^ int(b, 16)


def shared_prefix_length(a: str, b: str) -> int:
    d = xor_distance(a, b)
    if d == 0:
        return ID_BITS
    return ID_BITS - d.bit_length()


def owner_of(key: str, nodes: Iterable[str]) -> str:
    """Exhaustive min-XOR-distance scan; the placement oracle.

    Ties are impossible for distinct ids: equal XOR distance to the same
    key implies equal ids.
    """
    node_list = list(nodes)
    if not node_list:
        raise ValueError("node set must be non-empty")
    key_int = int(key, 16)
    return min(node_list, key=lambda n: int(n, 16) ^ key_int)


@dataclass(frozen=True)
class DiscrepancyReport:
    """Outcome of a cross-module comparison of one replicated field."""

    field: str
    consistent: bool
    minority: frozenset[str]
    tie: bool = False


def detect_discrepancy(field_name: str, readings: Mapping[str, Hashable]) -> DiscrepancyReport:
    """Flag modules whose replica of a shared field departs from the majority.

    An exact tie between leading values is still evidence of interference,
    so ties flag every participant rather than designating a minority.
    """
    if len(readings) < 2:
        raise ValueError("need readings from at least 2 modules")
    groups: dict[Hashable, set[str]] = {}
    for module_id, value in readings.items():
        groups.setdefault(value, set()).add(module_id)
    best = max(len(g) for g in groups.values())
    leaders = [v for v, g in groups.items() if len(g) == best]
    if len(leaders) > 1:
        return DiscrepancyReport(
            field=field_name,
            consistent=False,
            minority=frozenset(readings),
            tie=True,
        )
    majority_value = leaders[0]
    minority = frozenset(m for v, g in groups.items() if v != majority_value for m in g)
    if not minority:
        return DiscrepancyReport(field=field_name, consistent=True, minority=frozenset())
    return DiscrepancyReport(field=field_name, consistent=False, minority=minority)


@dataclass(frozen=True)
class StoreReceipt:
    stored_at: str
    hops: int
    fallback: bool
    sequence: int
    evicted: tuple[str, ...] = ()


@dataclass(frozen=True)
class GetResult:
    record: AuditRecord | None
    partitioned: bool = False

    @property
    def found(self) -> bool:
        return self.record is not None


@dataclass
class _Stored:
    record: AuditRecord
    sequence: int
    size: int


class DhtNode:
    """One module's slice of the table: bounded store plus routing buckets."""

    def __init__(self, node_id: str, store_limit_bytes: int = DEFAULT_STORE_LIMIT_BYTES):
        self.node_id = node_id
        self.store_limit_bytes = store_limit_bytes
        self.checkpoint_floor = 0
        self.routing_table: dict[int, tuple[str, ...]] = {}
        self._store: dict[str, _Stored] = {}
        self._used = 0

    @staticmethod
    def record_size(record: AuditRecord) -> int:
        return len(record.dump_line().encode("utf-8")) + 1

    @property
    def store_bytes(self) -> int:
        return self._used

    @property
    def record_count(self) -> int:
        return len(self._store)

    def get(self, record_key: str) -> AuditRecord | None:
        entry = self._store.get(record_key)
        return entry.record if entry else None

    def sequence_of(self, record_key: str) -> int:
        return self._store[record_key].sequence

    def records(self) -> Iterator[AuditRecord]:
        for entry in self._store.values():
            yield entry.record

    def evict(self, needed_bytes: int) -> list[str]:
        """Free space by dropping the oldest checkpoint-covered records.

        Eviction order is (sim_time, record_key): a total, reproducible
        order. Atomic: if even evicting every eligible record cannot free
        needed_bytes, raises CheckpointRequired and evicts nothing.
        """
        if needed_bytes > self.store_limit_bytes:
            raise ValueError("needed_bytes exceeds the store limit")
        free = self.store_limit_bytes - self._used
        if free >= needed_bytes:
            return []
        eligible = sorted(
            (e for e in self._store.values() if e.sequence < self.checkpoint_floor),
            key=lambda e: (e.record.sim_time, e.record.record_key),
        )
        if free + sum(e.size for e in eligible) < needed_bytes:
            raise CheckpointRequired(self.node_id, needed_bytes)
        evicted = []
        for entry in eligible:
            if free >= needed_bytes:
                break
            del self._store[entry.record.record_key]
            self._used -= entry.size
            free += entry.size
            evicted.append(entry.record.record_key)
        return evicted

    def insert(self, record: AuditRecord, sequence: int) -> list[str]:
        """Store a record, evicting covered records first if space demands."""
        size = self.record_size(record)
        evicted = self.evict(size)
        self._store[record.record_key] = _Stored(record, sequence, size)
        self._used += size
        return evicted

    def dump(self) -> str:
        """Line-delimited store dump, sorted by record key, for audits."""
        lines = sorted(e.record.dump_line() for e in self._store.values())
        return "".join(line + "\n" for line in lines)


class DhtNetwork:
    """The closed in-vehicle network of DHT nodes.

    Single-threaded by contract: the simulator's event loop serializes all
    operations. Membership changes rebuild routing tables outright, which
    is cheap at tens of nodes and keeps tables deterministic.
    """

    def __init__(
        self,
        store_limit_bytes: int = DEFAULT_STORE_LIMIT_BYTES,
        bucket_capacity: int = DEFAULT_BUCKET_CAPACITY,
    ):
        self.store_limit_bytes = store_limit_bytes
        self.bucket_capacity = bucket_capacity
        self._nodes: dict[str, DhtNode] = {}
        self._ints: dict[str, int] = {}
        self._failed: set[str] = set()
        self._sequence = 0

    # -- membership ------------------------------------------------------

    def add_node(self, node_id: str) -> DhtNode:
        if node_id in self._nodes:
            raise ValueError(f"duplicate node id {node_id}")
        node = DhtNode(node_id, self.store_limit_bytes)
        self._nodes[node_id] = node
        self._ints[node_id] = int(node_id, 16)
        self._rebuild_routing()
        return node

    def remove_node(self, node_id: str) -> None:
        self._nodes.pop(node_id)
        self._ints.pop(node_id)
        self._failed.discard(node_id)
        self._rebuild_routing()

    def fail_node(self, node_id: str) -> None:
        if node_id not in self._nodes:
            raise NodeUnavailable(f"unknown node {node_id}")
        self._failed.add(node_id)

    def recover_node(self, node_id: str) -> None:
        if node_id not in self._nodes:
            raise NodeUnavailable(f"unknown node {node_id}")
        self._failed.discard(node_id)

    def node(self, node_id: str) -> DhtNode:
        return self._nodes[node_id]

    def node_ids(self) -> list[str]:
        return list(self._nodes)

    def live_node_ids(self) -> list[str]:
        return [n for n in self._nodes if n not in self._failed]

    def is_live(self, node_id: str) -> bool:
        return node_id in self._nodes and node_id not in self._failed

    @property
    def sequence(self) -> int:
        """Sequence number of the most recent successful insert."""
        return self._sequence

    def _rebuild_routing(self) -> None:
        for node_id, node in self._nodes.items():
            buckets: dict[int, list[str]] = {}
            for peer in self._nodes:
                if peer == node_id:
                    continue
                buckets.setdefault(shared_prefix_length(node_id, peer), []).append(peer)
            table = {}
            self_int = self._ints[node_id]
            for idx, peers in buckets.items():
                # Overflowing buckets keep the k peers nearest to self;
                # any non-empty selection preserves lookup exactness.
                peers.sort(key=lambda p: self._ints[p] ^ self_int)
                table[idx] = tuple(peers[: self.bucket_capacity])
            node.routing_table = table

    # -- lookups ---------------------------------------------------------

    def locate(self, origin: str, key: str) -> tuple[str, int]:
        """Iteratively route toward the key's owner among live nodes.

        One candidate per step: hop to the closest live peer the current
        node knows, stopping when no known peer improves on the current
        node. Returns (terminal node id, hops walked).
        """
        if not self.is_live(origin):
            raise NodeUnavailable(f"origin {origin} is not live")
        key_int = int(key, 16)
        current = origin
        current_dist = self._ints[current] ^ key_int
        hops = 0
        while True:
            best, best_dist = current, current_dist
            for bucket in self._nodes[current].routing_table.values():
                for peer in bucket:
                    if peer in self._failed:
                        continue
                    d = self._ints[peer] ^ key_int
                    if d < best_dist:
                        best, best_dist = peer, d
            if best == current:
                return current, hops
            current, current_dist = best, best_dist
            hops += 1

    def _probe_order(self, key: str) -> list[str]:
        key_int = int(key, 16)
        return sorted(self._nodes, key=lambda n: self._ints[n] ^ key_int)

    def _hop_budget(self, origin: str) -> int:
        buckets = len(self._nodes[origin].routing_table) or 1
        return 2 * buckets

    # -- operations ------------------------------------------------------

    def put(self, origin: str, record: AuditRecord) -> StoreReceipt:
        """Place a record at the owner of its key (or closest live node).

        May raise CheckpointRequired from the target store; the caller is
        expected to capture a checkpoint and retry. Re-putting an existing
        key is idempotent and keeps the original sequence number.
        """
        if not record.verify_key():
            raise ValueError("record_key does not match record contents")
        target, hops = self.locate(origin, record.record_key)
        ideal = owner_of(record.record_key, self._nodes)
        node = self._nodes[target]
        existing = node.get(record.record_key)
        if existing is not None:
            return StoreReceipt(
                stored_at=target,
                hops=hops,
                fallback=target != ideal,
                sequence=node.sequence_of(record.record_key),
            )
        evicted = node.insert(record, self._sequence + 1)
        self._sequence += 1
        return StoreReceipt(
            stored_at=target,
            hops=hops,
            fallback=target != ideal,
            sequence=self._sequence,
            evicted=tuple(evicted),
        )

    def get(self, origin: str, key: str) -> GetResult:
        """Retrieve a record, probing fallback holders within a hop budget.

        Probing continues through the next-closest nodes in key order so
        fallback placements made while the owner was down remain readable.
        A dead node encountered along the way marks the result partitioned:
        absence cannot be distinguished from loss on that node.
        """
        target, hops = self.locate(origin, key)
        budget = self._hop_budget(origin)
        found = self._nodes[target].get(key)
        if found is not None:
            return GetResult(found)
        partitioned = False
        for node_id in self._probe_order(key):
            if node_id == target:
                continue
            if hops >= budget:
                break
            hops += 1
            if node_id in self._failed:
                partitioned = True
                continue
            record = self._nodes[node_id].get(key)
            if record is not None:
                return GetResult(record)
        return GetResult(None, partitioned=partitioned)

    def last_known_hash(self, module_id: str) -> AuditRecord | None:
        """Newest stored record for a module, searching live nodes only."""
        best: AuditRecord | None = None
        for node_id in self.live_node_ids():
            for record in self._nodes[node_id].records():
                if record.module_id != module_id:
                    continue
                if best is None or (record.sim_time, record.record_key) > (
                    best.sim_time,
                    best.record_key,
                ):
                    best = record
        return best

    def advance_checkpoint_floor(self, floor: int) -> None:
        """Raise every node's eviction floor; floors never move backward."""
        for node in self._nodes.values():
            if floor > node.checkpoint_floor:
                node.checkpoint_floor = floor

    def store_dump(self, node_id: str) -> str:
        return self._nodes[node_id].dump()

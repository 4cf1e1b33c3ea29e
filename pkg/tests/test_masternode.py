from __future__ import annotations

import hashlib
import random

import pytest

from autobox.auditcore import EventType, identity_hash
from autobox.dht import DhtNetwork, node_id_for_serial
from autobox.ledger import FullNode
from autobox.masternode import (
    Connectivity,
    MasterNode,
    Submission,
    SubmitOutcome,
    UnquiescedCaptureError,
    meta_digest,
)

from conftest import EMPTY_SHA256, make_metadata

VKEY = "ab" * 32


def single_node_setup(store_limit=1 << 20):
    network = DhtNetwork(store_limit_bytes=store_limit)
    node = node_id_for_serial("solo")
    network.add_node(node)
    master = MasterNode(network)
    master.set_vehicle_key(VKEY)
    return network, node, master


def put_and_mirror(network, node, master, record):
    receipt = network.put(node, record)
    master.mirror_update(record, receipt.sequence)
    return receipt


def make_record(module_id="ECU", sim_time=0, **overrides):
    return identity_hash(
        make_metadata(module_id, **overrides), sim_time, EventType.PERIODIC_INTERVAL
    )


class TestMetaDigest:
    def test_empty_set_is_empty_sha256(self):
        assert meta_digest([]) == EMPTY_SHA256

    def test_order_free(self):
        pairs = [("aa" * 32, "bb" * 32), ("cc" * 32, "dd" * 32)]
        assert meta_digest(pairs) == meta_digest(reversed(pairs))

    def test_matches_sort_concat_oracle(self):
        """Independent oracle: sort dump pairs, concat raw bytes, hash once."""
        rng = random.Random(60)
        pairs = [
            (f"{rng.getrandbits(256):064x}", f"{rng.getrandbits(256):064x}")
            for _ in range(3)
        ]
        blob = b"".join(
            bytes.fromhex(k) + bytes.fromhex(p) for k, p in sorted(pairs)
        )
        assert meta_digest(pairs) == hashlib.sha256(blob).hexdigest()


class TestMirror:
    def test_put_then_mirror_contains_record(self):
        network, node, master = single_node_setup()
        record = make_record(sim_time=1)
        put_and_mirror(network, node, master, record)
        assert master.mirrored(record.record_key) == record

    def test_duplicate_mirror_update_idempotent(self):
        network, node, master = single_node_setup()
        record = make_record(sim_time=1)
        receipt = put_and_mirror(network, node, master, record)
        master.mirror_update(record, receipt.sequence)
        assert master.mirror_size == 1

    def test_mirror_counts_all_records_across_nodes(self):
        rng = random.Random(61)
        network = DhtNetwork(store_limit_bytes=1 << 20)
        nodes = []
        for i in range(8):
            node = node_id_for_serial(f"mod-{i}")
            network.add_node(node)
            nodes.append(node)
        master = MasterNode(network)
        for i in range(100):
            record = make_record("ECU", sim_time=i)
            receipt = network.put(nodes[rng.randrange(8)], record)
            master.mirror_update(record, receipt.sequence)
        assert master.mirror_size == 100


class TestCapture:
    def test_empty_mirror_digest_is_empty_constant(self):
        _, _, master = single_node_setup()
        mh = master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 3600)
        assert mh.digest == EMPTY_SHA256
        assert mh.covered_records == 0
        assert mh.checkpoint_seq == 1

    def test_insertion_order_does_not_matter(self):
        records = [make_record("ECU", sim_time=t) for t in range(5)]
        digests = []
        for ordering in (records, list(reversed(records))):
            network, node, master = single_node_setup()
            for record in ordering:
                put_and_mirror(network, node, master, record)
            digests.append(
                master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 10).digest
            )
        assert digests[0] == digests[1]

    def test_checkpoint_seq_strictly_increases(self):
        _, _, master = single_node_setup()
        seqs = [
            master.capture_meta_hash(EventType.PERIODIC_INTERVAL, t).checkpoint_seq
            for t in (10, 20, 30)
        ]
        assert seqs == [1, 2, 3]

    def test_capture_advances_floor_to_cover_mirror(self):
        network, node, master = single_node_setup()
        for t in range(3):
            put_and_mirror(network, node, master, make_record(sim_time=t))
        master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 99)
        assert network.node(node).checkpoint_floor == network.sequence + 1

    def test_unquiesced_capture_raises(self):
        network, node, master = single_node_setup()
        network.put(node, make_record(sim_time=5))  # put without forwarding
        with pytest.raises(UnquiescedCaptureError):
            master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 10)

    def test_capture_retained_and_buffered(self):
        _, _, master = single_node_setup()
        mh = master.capture_meta_hash(EventType.REFLASH, 5)
        assert master.meta_hashes == [mh]
        assert master.buffer.pending == [mh]


class TestTriggerPolicy:
    def test_immediate_events_capture_now(self):
        _, _, master = single_node_setup()
        for event in (
            EventType.OBD_PLUG_IN,
            EventType.CONFIG_CHANGE,
            EventType.REFLASH,
            EventType.SERVICE_NOTICE,
        ):
            assert master.trigger_policy(event, 1, 0)

    def test_periodic_defers_inside_interval(self):
        _, _, master = single_node_setup()
        master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 1000)
        assert not master.trigger_policy(EventType.PERIODIC_INTERVAL, 1100, 0)
        assert master.trigger_policy(EventType.PERIODIC_INTERVAL, 4600, 0)

    def test_mileage_stride_crossing(self):
        _, _, master = single_node_setup()
        assert not master.trigger_policy(EventType.MILEAGE_THRESHOLD, 1, 999)
        assert master.trigger_policy(EventType.MILEAGE_THRESHOLD, 1, 1001)
        master.capture_meta_hash(EventType.MILEAGE_THRESHOLD, 1, odometer_km=1001)
        assert not master.trigger_policy(EventType.MILEAGE_THRESHOLD, 2, 1500)
        assert master.trigger_policy(EventType.MILEAGE_THRESHOLD, 2, 2000)

    def test_startup_check_defers(self):
        _, _, master = single_node_setup()
        assert not master.trigger_policy(EventType.STARTUP_CHECK, 1, 0)


class TestSubmitPending:
    def test_online_drains_all_in_order(self):
        _, _, master = single_node_setup()
        node = FullNode()
        node.register_vehicle(VKEY, "EU-BASE")
        for t in (10, 20, 30):
            master.capture_meta_hash(EventType.PERIODIC_INTERVAL, t)
        assert master.submit_pending(node) == 3
        assert master.buffer.pending == []
        assert master.buffer.submitted == {1, 2, 3}
        history = node.query_history(VKEY)
        assert [e.checkpoint_seq for e in history] == [1, 2, 3]

    def test_offline_is_noop(self):
        _, _, master = single_node_setup()
        master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 10)
        master.set_connectivity(Connectivity.OFFLINE)
        assert master.submit_pending(FullNode()) == 0
        assert len(master.buffer.pending) == 1

    def test_backlog_drains_without_gaps_after_outage(self):
        _, _, master = single_node_setup()
        node = FullNode()
        master.set_connectivity(Connectivity.OFFLINE)
        for t in (10, 20):
            master.capture_meta_hash(EventType.PERIODIC_INTERVAL, t)
        assert master.submit_pending(node) == 0
        master.set_connectivity(Connectivity.ONLINE)
        assert master.submit_pending(node) == 2
        seqs = [e.checkpoint_seq for e in node.query_history(VKEY)]
        assert seqs == [1, 2]

    def test_rejected_submission_retained_and_alerted(self):
        class RejectingEndpoint:
            def submit(self, submissions):
                return SubmitOutcome(
                    accepted=(),
                    rejected=tuple((s, "malformed: test") for s in submissions),
                )

        _, _, master = single_node_setup()
        master.capture_meta_hash(EventType.PERIODIC_INTERVAL, 10)
        assert master.submit_pending(RejectingEndpoint()) == 0
        assert len(master.buffer.pending) == 1
        assert master.alerts and "rejected" in master.alerts[0]


class TestSubmissionWire:
    def test_wire_roundtrip(self):
        sub = Submission(
            vehicle_key=VKEY,
            checkpoint_seq=4,
            meta_digest="cd" * 32,
            trigger=EventType.REFLASH,
            sim_time=777,
        )
        line = sub.wire_line()
        assert line == f"{VKEY}|4|{'cd' * 32}|Reflash|777"
        assert Submission.from_wire(line) == sub

    def test_wire_parse_tolerates_spacing(self):
        line = f"{VKEY} | 4 | {'cd' * 32} | Reflash | 777"
        sub = Submission.from_wire(line)
        assert sub.checkpoint_seq == 4
        assert sub.trigger is EventType.REFLASH


class TestEvictionCoupling:
    def test_record_evicted_only_after_coverage(self):
        """Cross-module: eviction at level 1 requires checkpoint coverage.

        Every evicted key must already sit in the master mirror, i.e. some
        pending-or-submitted meta-hash covered it before it was dropped.
        """
        from autobox.dht import CheckpointRequired

        network = DhtNetwork(store_limit_bytes=512)
        node = node_id_for_serial("solo")
        network.add_node(node)
        master = MasterNode(network)
        master.set_vehicle_key(VKEY)
        evicted_keys: list[str] = []
        mirror_at_eviction: dict[str, bool] = {}
        for t in range(40):
            record = make_record("ECU", sim_time=t)
            try:
                receipt = network.put(node, record)
            except CheckpointRequired:
                master.capture_meta_hash(EventType.PERIODIC_INTERVAL, t)
                receipt = network.put(node, record)
            for key in receipt.evicted:
                mirror_at_eviction[key] = master.mirrored(key) is not None
            evicted_keys.extend(receipt.evicted)
            master.mirror_update(record, receipt.sequence)
        assert evicted_keys, "scenario never filled the store"
        assert all(mirror_at_eviction.values())
        assert master.buffer.pending  # captures queued, none lost

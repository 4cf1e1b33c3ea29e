"""Master unit: full mirror, checkpoint meta-hashes, buffered uplink.

The head unit mirrors every record the in-vehicle table accepts, so a
checkpoint is a pure function of the mirror: the meta digest folds the
(record key, payload hash) pairs sorted by key, making it independent of
insertion order and reproducible from any node dump. Capturing a
checkpoint is also what unlocks eviction down in the node stores — the
checkpoint floor advances to cover everything the mirror has seen, and
only covered records may be dropped.

Outbound, the master feeds a light client buffer. Checkpoints queue while
connectivity is down and drain strictly in order once it returns; an
acknowledged checkpoint leaves the queue, a rejected one stays and raises
an alert, and nothing is ever dropped.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Protocol

from .auditcore import AuditRecord, EventType
from .dht import DhtNetwork

DEFAULT_CAPTURE_INTERVAL_S = 3600
DEFAULT_MILEAGE_STRIDE_KM = 1000

# Events that always warrant an immediate checkpoint.
IMMEDIATE_TRIGGERS = frozenset(
    {
        EventType.OBD_PLUG_IN,
        EventType.CONFIG_CHANGE,
        EventType.REFLASH,
        EventType.SERVICE_NOTICE,
    }
)


class UnquiescedCaptureError(RuntimeError):
    """The mirror lags the network; retry the capture after forwarding."""


class Connectivity(str, Enum):
    ONLINE = "Online"
    OFFLINE = "Offline"


@dataclass(frozen=True)
class MetaHash:
    """One checkpoint: a digest over the entire mirrored table."""

    digest: str
    covered_records: int
    checkpoint_seq: int
    sim_time: int
    trigger: EventType


@dataclass
class LightClientBuffer:
    """Uplink queue between the master unit and the external full node."""

    pending: list[MetaHash] = field(default_factory=list)
    submitted: set[int] = field(default_factory=set)
    connectivity: Connectivity = Connectivity.ONLINE


@dataclass(frozen=True)
class Submission:
    """Wire unit delivered to the full node, one per checkpoint.

    Encoding: pipe-separated ``vehicle_key|seq|digest|trigger|sim_time``.
    """

    vehicle_key: str
    checkpoint_seq: int
    meta_digest: str
    trigger: EventType
    sim_time: int

    def wire_line(self) -> str:
        return "|".join(
            (
                self.vehicle_key,
                str(self.checkpoint_seq),
                self.meta_digest,
                self.trigger.value,
                str(self.sim_time),
            )
        )

    @classmethod
    def from_wire(cls, line: str) -> "Submission":
        key, seq, digest, trigger, sim_time = (p.strip() for p in line.strip().split("|"))
        return cls(
            vehicle_key=key,
            checkpoint_seq=int(seq),
            meta_digest=digest,
            trigger=EventType(trigger),
            sim_time=int(sim_time),
        )


@dataclass(frozen=True)
class SubmitOutcome:
    accepted: tuple[tuple[str, int], ...]  # (vehicle_key, checkpoint_seq)
    rejected: tuple[tuple[Submission, str], ...] = ()


class LedgerEndpoint(Protocol):
    def submit(self, submissions: list[Submission]) -> SubmitOutcome: ...


def meta_digest(pairs: Iterable[tuple[str, str]]) -> str:
    """Fold (record_key, payload_hash) pairs into one order-free digest.

    Pairs are sorted by record key and concatenated as raw digest bytes.
    The empty set hashes to SHA-256 of the empty byte string.
    """
    h = hashlib.sha256()
    for key, payload in sorted(pairs):
        h.update(bytes.fromhex(key))
        h.update(bytes.fromhex(payload))
    return h.hexdigest()


class MasterNode:
    """The single logical actor coordinating checkpoints for one vehicle."""

    def __init__(
        self,
        network: DhtNetwork,
        *,
        capture_interval_s: int = DEFAULT_CAPTURE_INTERVAL_S,
        mileage_stride_km: int = DEFAULT_MILEAGE_STRIDE_KM,
        initial_odometer_km: int = 0,
    ):
        self.network = network
        self.capture_interval_s = capture_interval_s
        self.mileage_stride_km = mileage_stride_km
        self.buffer = LightClientBuffer()
        self.meta_hashes: list[MetaHash] = []  # retained copies, newest last
        self.alerts: list[str] = []
        self.last_capture_time = 0
        self._mirror: dict[str, AuditRecord] = {}
        self._high_sequence = 0
        self._checkpoint_seq = 0
        self._mileage_mark = initial_odometer_km // mileage_stride_km
        self._vehicle_key = ""
        self._key_by_seq: dict[int, str] = {}

    # -- identity ---------------------------------------------------------

    def set_vehicle_key(self, key_hex: str) -> None:
        self._vehicle_key = key_hex

    @property
    def vehicle_key(self) -> str:
        return self._vehicle_key

    # -- mirror -----------------------------------------------------------

    def mirror_update(self, record: AuditRecord, sequence: int) -> None:
        """Fold one accepted record into the full mirror (idempotent)."""
        self._mirror.setdefault(record.record_key, record)
        if sequence > self._high_sequence:
            self._high_sequence = sequence

    @property
    def mirror_size(self) -> int:
        return len(self._mirror)

    def mirrored(self, record_key: str) -> AuditRecord | None:
        return self._mirror.get(record_key)

    # -- checkpoints --------------------------------------------------------

    def capture_meta_hash(
        self, trigger: EventType, sim_time: int, odometer_km: int | None = None
    ) -> MetaHash:
        """Checkpoint the mirror and unlock eviction of everything covered."""
        if self._high_sequence < self.network.sequence:
            raise UnquiescedCaptureError(
                f"mirror at sequence {self._high_sequence} lags network "
                f"sequence {self.network.sequence}; quiesce and retry"
            )
        digest = meta_digest(
            (r.record_key, r.payload_hash) for r in self._mirror.values()
        )
        self._checkpoint_seq += 1
        mh = MetaHash(
            digest=digest,
            covered_records=len(self._mirror),
            checkpoint_seq=self._checkpoint_seq,
            sim_time=sim_time,
            trigger=trigger,
        )
        self.network.advance_checkpoint_floor(self._high_sequence + 1)
        self.meta_hashes.append(mh)
        self.buffer.pending.append(mh)
        self._key_by_seq[mh.checkpoint_seq] = self._vehicle_key
        self.last_capture_time = sim_time
        if trigger is EventType.MILEAGE_THRESHOLD and odometer_km is not None:
            self._mileage_mark = odometer_km // self.mileage_stride_km
        return mh

    def trigger_policy(
        self, event_type: EventType, sim_time: int, odometer_km: int
    ) -> bool:
        """Decide capture-now (True) or defer (False) for an event."""
        if event_type in IMMEDIATE_TRIGGERS:
            return True
        if event_type is EventType.PERIODIC_INTERVAL:
            return sim_time - self.last_capture_time >= self.capture_interval_s
        if event_type is EventType.MILEAGE_THRESHOLD:
            return odometer_km // self.mileage_stride_km > self._mileage_mark
        return False

    # -- uplink ------------------------------------------------------------

    def set_connectivity(self, state: Connectivity) -> None:
        self.buffer.connectivity = state

    @property
    def online(self) -> bool:
        return self.buffer.connectivity is Connectivity.ONLINE

    def submit_pending(self, endpoint: LedgerEndpoint) -> int:
        """Drain the buffer in checkpoint order; returns checkpoints accepted.

        Offline is a no-op. Rejected submissions stay pending (preserving
        order for the next drain) and surface as alerts.
        """
        if not self.online or not self.buffer.pending:
            return 0
        batch = [
            Submission(
                vehicle_key=self._key_by_seq[mh.checkpoint_seq],
                checkpoint_seq=mh.checkpoint_seq,
                meta_digest=mh.digest,
                trigger=mh.trigger,
                sim_time=mh.sim_time,
            )
            for mh in self.buffer.pending
        ]
        outcome = endpoint.submit(batch)
        accepted_seqs = {seq for _, seq in outcome.accepted}
        self.buffer.submitted.update(accepted_seqs)
        self.buffer.pending = [
            mh for mh in self.buffer.pending if mh.checkpoint_seq not in accepted_seqs
        ]
        for submission, reason in outcome.rejected:
            self.alerts.append(
                f"full node rejected checkpoint {submission.checkpoint_seq}: {reason}"
            )
        return len(accepted_seqs)

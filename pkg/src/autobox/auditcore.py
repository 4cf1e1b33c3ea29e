"""Canonical domain types and hashing for the in-vehicle audit trail.

Everything downstream keys off the digests produced here: DHT placement
uses record keys, parity clusters index record payload hashes, checkpoint
meta-hashes fold record/payload digest pairs, and ledger entries carry the
derived vehicle key. The byte-level canonical forms in this module are
therefore load-bearing: two implementations that disagree on a single byte
disagree on every digest derived from it.

Canonical form, everywhere: sorted ``field=value`` lines joined with a
single newline, no trailing newline, UTF-8. Newlines are forbidden inside
field values because the newline is the field separator.

All digests are SHA-256 and are rendered as lowercase hex wherever a
textual encoding is needed. Timestamps are simulated-clock integers;
nothing in this package reads the wall clock.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields
from datetime import date
from enum import Enum
from typing import Iterable

# 17 chars, uppercase alphanumerics minus I/O/Q (easily confused glyphs).
VIN_RE = re.compile(r"^[A-HJ-NPR-Z0-9]{17}$")

PAYLOAD_SUMMARY_LIMIT = 64  # bytes, keeps records friendly to tiny stores


class MetadataError(ValueError):
    """A domain value violates its canonical-form constraints."""


class EventType(str, Enum):
    """Why an audit record was emitted (also used as checkpoint trigger)."""

    PERIODIC_INTERVAL = "PeriodicInterval"
    OBD_PLUG_IN = "ObdPlugIn"
    CONFIG_CHANGE = "ConfigChange"
    REFLASH = "Reflash"
    MILEAGE_THRESHOLD = "MileageThreshold"
    SERVICE_NOTICE = "ServiceNotice"
    STARTUP_CHECK = "StartupCheck"


class AirbagStatus(str, Enum):
    OK = "Ok"
    DEPLOYED = "Deployed"
    FAULT_LATCHED = "FaultLatched"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_hex_digest(value: str) -> bool:
    return len(value) == 64 and all(c in "0123456789abcdef" for c in value)


def validate_vin(vin: str) -> None:
    if not VIN_RE.match(vin):
        raise MetadataError(f"invalid VIN {vin!r}: need 17 chars from [A-HJ-NPR-Z0-9]")


@dataclass(frozen=True)
class ModuleMetadata:
    """Software/hardware descriptor a module self-identifies with.

    This is the unit of hashing: any single-field change produces a new
    payload digest. Mutations (reflash, tamper, swap) are modeled by
    replacing the instance, never by in-place edits.
    """

    module_id: str
    design_date: date
    manufacture_date: date
    manufacture_location: str
    supplier_id: str
    production_lot: str
    software_version: str
    variant_code: str
    serial_number: str
    vin: str

    def validate(self) -> None:
        if not self.module_id:
            raise MetadataError("module_id must be non-empty")
        if not self.serial_number:
            raise MetadataError("serial_number must be non-empty")
        validate_vin(self.vin)
        for name, value in _field_items(self):
            if isinstance(value, str) and "\n" in value:
                raise MetadataError(f"newline in field {name!r} breaks canonical form")


@dataclass(frozen=True)
class SharedCriticalData:
    """Protected vehicle data replicated across modules.

    Legitimate histories only ever move odometer_km up; the consistency
    check flags replicas that disagree, it does not repair them.
    """

    vin: str
    odometer_km: int
    airbag_status: AirbagStatus
    service_event_count: int

    def validate(self) -> None:
        validate_vin(self.vin)
        if self.odometer_km < 0:
            raise MetadataError("odometer_km must be non-negative")
        if self.service_event_count < 0:
            raise MetadataError("service_event_count must be non-negative")


@dataclass(frozen=True)
class AuditRecord:
    """One hashed, timestamped, typed event as stored in the DHT.

    record_key is recomputable from the other fields, which is what makes
    node store dumps independently auditable.
    """

    record_key: str
    module_id: str
    event_type: EventType
    sim_time: int
    payload_hash: str
    payload_summary: str

    def verify_key(self) -> bool:
        return self.record_key == compute_record_key(
            self.module_id, self.event_type, self.sim_time, self.payload_hash
        )

    def dump_line(self) -> str:
        """Audit dump encoding: key, module, event, time, payload hash."""
        return "\t".join(
            (
                self.record_key,
                self.module_id,
                self.event_type.value,
                str(self.sim_time),
                self.payload_hash,
            )
        )

    @classmethod
    def from_dump_line(cls, line: str) -> "AuditRecord":
        key, module_id, event, sim_time, payload_hash = line.rstrip("\n").split("\t")
        record = cls(
            record_key=key,
            module_id=module_id,
            event_type=EventType(event),
            sim_time=int(sim_time),
            payload_hash=payload_hash,
            payload_summary="",
        )
        return record


@dataclass(frozen=True)
class VehicleKey:
    """Opaque retrieval key derived from the vehicle's module serials.

    The derivation is one-way (hash of sorted serials plus the most recent
    software version), so holding the key reveals none of the inputs, and
    the key rotates whenever the software payload legitimately changes.
    """

    key: str
    derived_from_version: str


def _field_items(metadata: ModuleMetadata) -> list[tuple[str, object]]:
    return sorted((f.name, getattr(metadata, f.name)) for f in fields(metadata))


def canonical_serialize(metadata: ModuleMetadata) -> bytes:
    """Byte-exact canonical encoding of module metadata.

    Sorted ``field=value`` lines, newline-joined, no trailing newline.
    Dates render as ISO ``YYYY-MM-DD``. Raises MetadataError for values
    that cannot round-trip through this form.
    """
    metadata.validate()
    lines = []
    for name, value in _field_items(metadata):
        if isinstance(value, date):
            text = value.isoformat()
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    return "\n".join(lines).encode("utf-8")


def compute_record_key(
    module_id: str, event_type: EventType, sim_time: int, payload_hash: str
) -> str:
    body = "\n".join(
        (
            f"event_type={event_type.value}",
            f"module_id={module_id}",
            f"payload_hash={payload_hash}",
            f"sim_time={sim_time}",
        )
    )
    return sha256_hex(body.encode("utf-8"))


def identity_hash(
    metadata: ModuleMetadata, sim_time: int, event_type: EventType
) -> AuditRecord:
    """Produce the audit record a module emits to self-identify."""
    if sim_time < 0:
        raise ValueError("sim_time must be non-negative")
    payload_hash = sha256_hex(canonical_serialize(metadata))
    summary = f"{metadata.module_id}@{metadata.software_version}"
    summary = summary.encode("utf-8")[:PAYLOAD_SUMMARY_LIMIT].decode("utf-8", "ignore")
    return AuditRecord(
        record_key=compute_record_key(
            metadata.module_id, event_type, sim_time, payload_hash
        ),
        module_id=metadata.module_id,
        event_type=event_type,
        sim_time=sim_time,
        payload_hash=payload_hash,
        payload_summary=summary,
    )


def derive_vehicle_key(serials: Iterable[str], latest_version: str) -> VehicleKey:
    """Fold the sorted serial set and newest software version into one key."""
    unique = sorted(set(serials))
    if not unique:
        raise ValueError("serial set must be non-empty")
    for s in unique:
        if "\n" in s:
            raise MetadataError("newline in serial number breaks canonical form")
    if "\n" in latest_version:
        raise MetadataError("newline in version breaks canonical form")
    lines = [f"serial={s}" for s in unique]
    lines.append(f"version={latest_version}")
    digest = sha256_hex("\n".join(lines).encode("utf-8"))
    return VehicleKey(key=digest, derived_from_version=latest_version)

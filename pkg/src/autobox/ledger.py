"""Simulated OEM full node: hash-chained block ledger plus verdict policy.

The chain is the local stand-in for a public ledger, with the same
submission interface a real chain client would sit behind; swapping in an
external chain means replacing FullNode while keeping Submission and the
wire format. What is testable locally is the tamper evidence of the chain
structure itself: every byte of a persisted block is covered by either the
block's Merkle root or its header hash, so verification pinpoints the
first block whose bytes no longer recompute.

Block layout on disk (append-only, one record per block):

    <decimal byte length of payload>\\n
    <index>|<prev_hash>|<entries_root>|<block_hash>\\n
    <submission wire line>\\n        (one or more)

block_hash covers ``index|prev_hash|entries_root``; entries_root is a
binary Merkle root over the entry lines (leaf = SHA-256 of the line,
duplicate-last when a level is odd). Block 0 links from 64 zero hex chars.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .auditcore import is_hex_digest, sha256_hex
from .masternode import Submission, SubmitOutcome

GENESIS_PREV = "0" * 64


class LedgerFormatError(ValueError):
    """The ledger file cannot be read as a ledger at all."""


class UnknownVariantError(ValueError):
    """The approved library has no entry for this variant (library gap)."""


class UnknownVehicleError(ValueError):
    """No variant registration exists for this vehicle key."""


class VerdictStatus(str, Enum):
    APPROVED = "Approved"
    SERVICE_NEEDED = "ServiceNeeded"
    EMERGENCY_OTA = "EmergencyOta"
    IMMOBILIZE = "Immobilize"


@dataclass(frozen=True)
class Verdict:
    status: VerdictStatus
    reason: str
    vehicle_key: str
    checkpoint_seq: int

    def output_line(self) -> str:
        return "\t".join(
            (self.vehicle_key, str(self.checkpoint_seq), self.status.value, self.reason)
        )


@dataclass(frozen=True)
class VerdictPolicy:
    """How a failed checksum escalates.

    A tamper-flagged vehicle immobilizes; a critical variant warrants an
    emergency update; everything else is routed to service.
    """

    critical_variants: frozenset[str] = frozenset()


class ApprovedLibrary:
    """Per-variant sets of acceptable meta digests; mutations append-only."""

    def __init__(self, approved: dict[str, Iterable[str]] | None = None):
        self._approved: dict[str, set[str]] = {}
        self.provenance: list[tuple[str, str, str]] = []
        for variant, digests in (approved or {}).items():
            for digest in digests:
                self.add(variant, digest, note="initial load")

    def add(self, variant: str, digest: str, note: str = "") -> None:
        if not is_hex_digest(digest):
            raise ValueError(f"not a hex digest: {digest!r}")
        self._approved.setdefault(variant, set()).add(digest)
        self.provenance.append((variant, digest, note))

    def approved_for(self, variant: str) -> frozenset[str]:
        if variant not in self._approved:
            raise UnknownVariantError(f"no approved digests on file for variant {variant!r}")
        return frozenset(self._approved[variant])

    def variants(self) -> list[str]:
        return sorted(self._approved)

    def to_file_text(self) -> str:
        lines = []
        for variant in sorted(self._approved):
            for digest in sorted(self._approved[variant]):
                lines.append(f"{variant}\t{digest}\n")
        return "".join(lines)

    @classmethod
    def from_file_text(cls, text: str) -> "ApprovedLibrary":
        lib = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                variant, digest = line.split("\t")
            except ValueError as exc:
                raise ValueError(f"library line {n}: expected variant<TAB>digest") from exc
            lib.add(variant, digest, note="file load")
        return lib


def oem_checksum(
    submission: Submission,
    library: ApprovedLibrary,
    variant: str,
    *,
    policy: VerdictPolicy | None = None,
    tamper_flag: bool = False,
) -> Verdict:
    """Check a submitted meta digest against the approved set for a variant."""
    policy = policy or VerdictPolicy()
    approved = library.approved_for(variant)
    if submission.meta_digest in approved:
        status, reason = VerdictStatus.APPROVED, f"meta digest approved for variant {variant}"
    elif tamper_flag:
        status = VerdictStatus.IMMOBILIZE
        reason = f"tamper flag set and meta digest not approved for variant {variant}"
    elif variant in policy.critical_variants:
        status = VerdictStatus.EMERGENCY_OTA
        reason = f"meta digest not approved for critical variant {variant}"
    else:
        status = VerdictStatus.SERVICE_NEEDED
        reason = f"meta digest not in approved set for variant {variant}"
    return Verdict(
        status=status,
        reason=reason,
        vehicle_key=submission.vehicle_key,
        checkpoint_seq=submission.checkpoint_seq,
    )


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Binary Merkle root; odd levels duplicate their last node."""
    if not leaves:
        raise ValueError("merkle root of zero leaves is undefined")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [
            hashlib.sha256(level[i] + level[i + 1]).digest()
            for i in range(0, len(level), 2)
        ]
    return level[0]


def _entry_leaf(wire_line: str) -> bytes:
    return hashlib.sha256(wire_line.encode("utf-8")).digest()


def _block_hash(index: int, prev_hash: str, entries_root: str) -> str:
    return sha256_hex(f"{index}|{prev_hash}|{entries_root}".encode("utf-8"))


@dataclass(frozen=True)
class LedgerBlock:
    index: int
    prev_hash: str
    entries: tuple[Submission, ...]
    entries_root: str
    block_hash: str

    @classmethod
    def build(cls, index: int, prev_hash: str, entries: Sequence[Submission]) -> "LedgerBlock":
        if not entries:
            raise ValueError("a block must carry at least one submission")
        root = merkle_root([_entry_leaf(s.wire_line()) for s in entries]).hex()
        return cls(
            index=index,
            prev_hash=prev_hash,
            entries=tuple(entries),
            entries_root=root,
            block_hash=_block_hash(index, prev_hash, root),
        )

    def payload_text(self) -> str:
        header = f"{self.index}|{self.prev_hash}|{self.entries_root}|{self.block_hash}"
        lines = [header] + [s.wire_line() for s in self.entries]
        return "".join(line + "\n" for line in lines)

    def file_record(self) -> bytes:
        payload = self.payload_text().encode("utf-8")
        return str(len(payload)).encode("ascii") + b"\n" + payload


@dataclass(frozen=True)
class VerifyResult:
    valid: bool
    broken_at: int | None = None

    def describe(self) -> str:
        return "valid" if self.valid else f"broken-at {self.broken_at}"


@dataclass(frozen=True)
class HistoryEntry:
    checkpoint_seq: int
    meta_digest: str
    trigger: str
    sim_time: int
    block_index: int

    def machine_line(self) -> str:
        return "\t".join(
            (
                str(self.checkpoint_seq),
                self.meta_digest,
                self.trigger,
                str(self.sim_time),
                str(self.block_index),
            )
        )


@dataclass(frozen=True)
class AppendResult:
    block: LedgerBlock | None
    rejected: tuple[tuple[Submission, str], ...]

    @property
    def accepted(self) -> tuple[Submission, ...]:
        return self.block.entries if self.block else ()


def _parse_records(blob: bytes) -> list[tuple[int, bytes]]:
    """Split a ledger file into (payload_start_offset, payload) records.

    Structural failures raise _BrokenRecord carrying the index of the
    record that could not be read.
    """
    records = []
    pos = 0
    index = 0
    while pos < len(blob):
        newline = blob.find(b"\n", pos)
        if newline < 0:
            raise _BrokenRecord(index)
        try:
            length = int(blob[pos:newline].decode("ascii"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise _BrokenRecord(index) from exc
        if length <= 0:
            raise _BrokenRecord(index)
        start = newline + 1
        payload = blob[start : start + length]
        if len(payload) != length:
            raise _BrokenRecord(index)
        records.append((start, payload))
        pos = start + length
        index += 1
    return records


class _BrokenRecord(Exception):
    def __init__(self, index: int):
        super().__init__(index)
        self.index = index


def _verify_payload(index: int, payload: bytes, prev_hash: str) -> LedgerBlock | None:
    """Recompute one block from its payload bytes; None means broken."""
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError:
        return None
    lines = text.split("\n")
    if not lines or lines[-1] != "":
        return None
    lines = lines[:-1]
    if len(lines) < 2:
        return None
    header = lines[0].split("|")
    if len(header) != 4:
        return None
    idx_text, stored_prev, stored_root, stored_hash = header
    if idx_text != str(index) or stored_prev != prev_hash:
        return None
    if not (is_hex_digest(stored_prev) or stored_prev == GENESIS_PREV):
        return None
    root = merkle_root([_entry_leaf(line) for line in lines[1:]]).hex()
    if root != stored_root:
        return None
    if _block_hash(index, stored_prev, stored_root) != stored_hash:
        return None
    try:
        entries = tuple(Submission.from_wire(line) for line in lines[1:])
    except (ValueError, KeyError):
        return None
    for entry, line in zip(entries, lines[1:]):
        if entry.wire_line() != line:
            return None
        if not is_hex_digest(entry.meta_digest) or not is_hex_digest(entry.vehicle_key):
            return None
    return LedgerBlock(
        index=index,
        prev_hash=stored_prev,
        entries=entries,
        entries_root=stored_root,
        block_hash=stored_hash,
    )


def verify_chain(path: str | Path) -> VerifyResult:
    """Recompute every block hash and linkage in a persisted ledger.

    Returns the first index at which any recomputation fails. An empty
    file is not a ledger and raises LedgerFormatError instead.
    """
    blob = Path(path).read_bytes()
    if not blob:
        raise LedgerFormatError(f"{path}: empty file is not a ledger")
    try:
        records = _parse_records(blob)
    except _BrokenRecord as exc:
        return VerifyResult(valid=False, broken_at=exc.index)
    prev = GENESIS_PREV
    for index, (_, payload) in enumerate(records):
        block = _verify_payload(index, payload, prev)
        if block is None:
            return VerifyResult(valid=False, broken_at=index)
        prev = block.block_hash
    return VerifyResult(valid=True)


def load_ledger(path: str | Path) -> list[LedgerBlock]:
    """Load and verify a persisted ledger."""
    result = verify_chain(path)
    if not result.valid:
        raise LedgerFormatError(f"{path}: chain {result.describe()}")
    blob = Path(path).read_bytes()
    blocks = []
    prev = GENESIS_PREV
    for index, (_, payload) in enumerate(_parse_records(blob)):
        block = _verify_payload(index, payload, prev)
        assert block is not None  # verify_chain already passed
        blocks.append(block)
        prev = block.block_hash
    return blocks


class FullNode:
    """Append-only ledger authority with per-vehicle sequence tracking.

    Appends are serialized (single writer); queries read committed blocks
    only. Bind a path to persist each block as it commits.
    """

    def __init__(
        self,
        library: ApprovedLibrary | None = None,
        policy: VerdictPolicy | None = None,
        ledger_path: str | Path | None = None,
    ):
        self.library = library
        self.policy = policy or VerdictPolicy()
        self.chain: list[LedgerBlock] = []
        self._last_seq: dict[str, int] = {}
        self._history: dict[str, list[HistoryEntry]] = {}
        self._variants: dict[str, str] = {}
        self._ledger_path = Path(ledger_path) if ledger_path else None
        if self._ledger_path:
            self._ledger_path.write_bytes(b"")

    # -- registration ------------------------------------------------------

    def register_vehicle(self, vehicle_key: str, variant: str) -> None:
        self._variants[vehicle_key] = variant

    def variant_of(self, vehicle_key: str) -> str:
        try:
            return self._variants[vehicle_key]
        except KeyError:
            raise UnknownVehicleError(
                f"vehicle key {vehicle_key[:12]}… has no registered variant"
            ) from None

    # -- appends -----------------------------------------------------------

    def append_submissions(self, submissions: Sequence[Submission]) -> AppendResult:
        """Append one block of validated submissions.

        Malformed or replayed (non-increasing per-vehicle sequence)
        submissions are rejected individually and never enter the chain.
        """
        accepted: list[Submission] = []
        rejected: list[tuple[Submission, str]] = []
        seq_cursor = dict(self._last_seq)
        for sub in submissions:
            problem = self._malformed(sub)
            if problem:
                rejected.append((sub, f"malformed: {problem}"))
                continue
            last = seq_cursor.get(sub.vehicle_key)
            if last is not None and sub.checkpoint_seq <= last:
                rejected.append(
                    (sub, f"replay: checkpoint_seq {sub.checkpoint_seq} <= {last}")
                )
                continue
            seq_cursor[sub.vehicle_key] = sub.checkpoint_seq
            accepted.append(sub)
        if not accepted:
            return AppendResult(block=None, rejected=tuple(rejected))
        prev = self.chain[-1].block_hash if self.chain else GENESIS_PREV
        block = LedgerBlock.build(len(self.chain), prev, accepted)
        self.chain.append(block)
        self._last_seq = seq_cursor
        for sub in accepted:
            self._history.setdefault(sub.vehicle_key, []).append(
                HistoryEntry(
                    checkpoint_seq=sub.checkpoint_seq,
                    meta_digest=sub.meta_digest,
                    trigger=sub.trigger.value,
                    sim_time=sub.sim_time,
                    block_index=block.index,
                )
            )
        if self._ledger_path:
            with self._ledger_path.open("ab") as fh:
                fh.write(block.file_record())
        return AppendResult(block=block, rejected=tuple(rejected))

    @staticmethod
    def _malformed(sub: Submission) -> str | None:
        if not is_hex_digest(sub.vehicle_key):
            return "vehicle_key is not a 256-bit hex digest"
        if not is_hex_digest(sub.meta_digest):
            return "meta_digest is not a 256-bit hex digest"
        if sub.checkpoint_seq < 1:
            return "checkpoint_seq must be >= 1"
        if sub.sim_time < 0:
            return "sim_time must be non-negative"
        return None

    # -- endpoint interface (what a light client buffer talks to) -----------

    def submit(self, submissions: list[Submission]) -> SubmitOutcome:
        result = self.append_submissions(submissions)
        return SubmitOutcome(
            accepted=tuple((s.vehicle_key, s.checkpoint_seq) for s in result.accepted),
            rejected=result.rejected,
        )

    # -- verdicts ------------------------------------------------------------

    def evaluate(self, submission: Submission, *, tamper_flag: bool = False) -> Verdict:
        """Run the OEM checksum for a submission's registered variant."""
        if self.library is None:
            raise UnknownVariantError("no approved library configured")
        variant = self.variant_of(submission.vehicle_key)
        return oem_checksum(
            submission,
            self.library,
            variant,
            policy=self.policy,
            tamper_flag=tamper_flag,
        )

    # -- queries -------------------------------------------------------------

    def query_history(self, vehicle_key: str) -> list[HistoryEntry]:
        """Complete checkpoint-ordered history; empty for unknown keys."""
        return sorted(
            self._history.get(vehicle_key, ()), key=lambda e: e.checkpoint_seq
        )

    def save(self, path: str | Path) -> None:
        """Write the whole chain (for nodes not bound to a path)."""
        with Path(path).open("wb") as fh:
            for block in self.chain:
                fh.write(block.file_record())


def history_from_file(path: str | Path, vehicle_key: str) -> list[HistoryEntry]:
    """Rebuild one vehicle's history from a persisted ledger."""
    entries = []
    for block in load_ledger(path):
        for sub in block.entries:
            if sub.vehicle_key == vehicle_key:
                entries.append(
                    HistoryEntry(
                        checkpoint_seq=sub.checkpoint_seq,
                        meta_digest=sub.meta_digest,
                        trigger=sub.trigger.value,
                        sim_time=sub.sim_time,
                        block_index=block.index,
                    )
                )
    return sorted(entries, key=lambda e: e.checkpoint_seq)

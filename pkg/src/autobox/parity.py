"""Redundant storage clusters: d data devices plus one XOR parity device.

Byte-wise even parity over right-zero-extended stores: for every byte
position, the XOR across all data devices and the parity device is zero,
so any single device's content is the XOR of all the others. Plain parity
detects a fault but cannot locate it; the cluster therefore also indexes
every stored record with a digest of its bytes, which pins a corruption to
the device whose records stop verifying. Locate via record hashes, repair
via XOR.

Single-fault model throughout: two devices disagreeing at once is reported
as uncorrectable, never silently "fixed".

Devices are append-only. The recorded length of a device survives erasure
of its content, which is what makes reconstruction of a wholly lost device
well-defined.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence, Union

PARITY = "parity"

DeviceRef = Union[int, str]  # data device index, or the PARITY sentinel


class ClusterError(ValueError):
    """Structurally invalid cluster operation (bad device, bad sizes)."""


class MultiFaultError(RuntimeError):
    """More than one device is corrupt; single-parity cannot repair this."""


def compute_parity(data_stores: Sequence[bytes]) -> bytes:
    """Byte-wise XOR across stores, shorter stores reading as zeroes.

    Output length equals the longest store, making the parity device the
    largest in the cluster by construction.
    """
    if len(data_stores) < 2:
        raise ClusterError("parity needs at least 2 data stores")
    width = max(len(s) for s in data_stores)
    if width == 0:
        return b""
    acc = 0
    for store in data_stores:
        acc ^= int.from_bytes(bytes(store).ljust(width, b"\x00"), "big")
    return acc.to_bytes(width, "big")


@dataclass(frozen=True)
class RecordLocation:
    device: int
    offset: int
    length: int
    record_hash: str


@dataclass(frozen=True)
class ScrubReport:
    clean: bool
    device: DeviceRef | None = None
    records: frozenset[str] = frozenset()


class ParityCluster:
    """d append-only data stores, one parity store, one record index."""

    def __init__(self, device_count: int):
        if device_count < 2:
            raise ClusterError("cluster needs at least 2 data devices")
        self.device_count = device_count
        self._stores = [bytearray() for _ in range(device_count)]
        self._parity = bytearray()
        self._lengths = [0] * device_count  # recorded lengths survive erasure
        self._index: dict[str, RecordLocation] = {}

    # -- views -----------------------------------------------------------

    def data_store(self, device: int) -> bytes:
        return bytes(self._stores[device])

    @property
    def parity_store(self) -> bytes:
        return bytes(self._parity)

    def recorded_length(self, device: DeviceRef) -> int:
        if device == PARITY:
            return max(self._lengths, default=0)
        return self._lengths[self._data_index(device)]

    @property
    def record_index(self) -> dict[str, RecordLocation]:
        return dict(self._index)

    def has_record(self, record_key: str) -> bool:
        return record_key in self._index

    def _data_index(self, device: DeviceRef) -> int:
        if not isinstance(device, int) or not 0 <= device < self.device_count:
            raise ClusterError(f"no data device {device!r}")
        return device

    # -- writes ----------------------------------------------------------

    def append_record(self, device: int, record_key: str, payload: bytes) -> RecordLocation:
        """Append record bytes to a device and fold them into parity.

        Incremental: only the parity bytes under the appended range change,
        so a latent corruption elsewhere is never absorbed by a write.
        """
        idx = self._data_index(device)
        if record_key in self._index:
            raise ClusterError(f"record {record_key[:12]}… already indexed")
        store = self._stores[idx]
        if len(store) != self._lengths[idx]:
            raise ClusterError(f"device {idx} is erased; repair before appending")
        offset = self._lengths[idx]
        store.extend(payload)
        self._lengths[idx] = len(store)
        if len(self._parity) < len(store):
            self._parity.extend(b"\x00" * (len(store) - len(self._parity)))
        for j, b in enumerate(payload):
            self._parity[offset + j] ^= b
        loc = RecordLocation(
            device=idx,
            offset=offset,
            length=len(payload),
            record_hash=hashlib.sha256(payload).hexdigest(),
        )
        self._index[record_key] = loc
        return loc

    # -- fault injection and repair ---------------------------------------

    def corrupt_byte(self, device: DeviceRef, offset: int, xor_mask: int = 0xFF) -> tuple[int, int]:
        """Flip a stored byte in place, bypassing parity maintenance.

        Models bit rot or direct memory modification. Returns (pre, post)
        byte values for ground-truth bookkeeping.
        """
        if xor_mask % 256 == 0:
            raise ClusterError("xor_mask must change the byte")
        target = self._parity if device == PARITY else self._stores[self._data_index(device)]
        if not 0 <= offset < len(target):
            raise ClusterError(f"offset {offset} outside device {device!r}")
        pre = target[offset]
        target[offset] ^= xor_mask % 256
        return pre, target[offset]

    def erase_device(self, device: DeviceRef) -> None:
        """Discard a device's content; its recorded length is kept."""
        if device == PARITY:
            self._parity = bytearray()
        else:
            self._stores[self._data_index(device)] = bytearray()

    def write_back(self, device: DeviceRef, content: bytes) -> None:
        expected = self.recorded_length(device)
        if len(content) != expected:
            raise ClusterError(
                f"device {device!r} expects {expected} bytes, got {len(content)}"
            )
        if device == PARITY:
            self._parity = bytearray(content)
        else:
            self._stores[self._data_index(device)] = bytearray(content)


def scrub(cluster: ParityCluster) -> ScrubReport:
    """Check every record hash and the parity invariant.

    Record-hash mismatches locate the corrupt data device; a parity
    mismatch with all records intact indicts the parity device itself.
    """
    mismatched: dict[int, set[str]] = {}
    for key, loc in cluster.record_index.items():
        store = cluster.data_store(loc.device)
        chunk = store[loc.offset : loc.offset + loc.length]
        if hashlib.sha256(chunk).hexdigest() != loc.record_hash:
            mismatched.setdefault(loc.device, set()).add(key)
    if len(mismatched) > 1:
        raise MultiFaultError(
            f"record-hash mismatches on devices {sorted(mismatched)}; uncorrectable"
        )
    # Appends keep the parity device exactly as long as the longest data
    # device, so a length drift is itself a parity fault (e.g. erasure whose
    # true parity happened to be all zeroes).
    parity_ok = len(cluster.parity_store) == cluster.recorded_length(PARITY)
    width = max(cluster.recorded_length(PARITY), len(cluster.parity_store))
    if parity_ok and width:
        acc = int.from_bytes(cluster.parity_store.ljust(width, b"\x00"), "big")
        for i in range(cluster.device_count):
            acc ^= int.from_bytes(cluster.data_store(i).ljust(width, b"\x00"), "big")
        parity_ok = acc == 0
    if mismatched:
        device, keys = next(iter(mismatched.items()))
        return ScrubReport(clean=False, device=device, records=frozenset(keys))
    if not parity_ok:
        return ScrubReport(clean=False, device=PARITY)
    return ScrubReport(clean=True)


def reconstruct(cluster: ParityCluster, device: DeviceRef) -> bytes:
    """Rebuild one device as the XOR of all the others.

    For a data device the result is checked against the record index; a
    residual mismatch means a second device is also bad.
    """
    if device == PARITY:
        return compute_parity([cluster.data_store(i) for i in range(cluster.device_count)])
    idx = cluster._data_index(device)
    width = max(
        cluster.recorded_length(PARITY),
        max(len(cluster.data_store(i)) for i in range(cluster.device_count)),
        len(cluster.parity_store),
    )
    length = cluster.recorded_length(idx)
    if width == 0 or length == 0:
        return b""
    acc = int.from_bytes(cluster.parity_store.ljust(width, b"\x00"), "big")
    for i in range(cluster.device_count):
        if i == idx:
            continue
        acc ^= int.from_bytes(cluster.data_store(i).ljust(width, b"\x00"), "big")
    content = acc.to_bytes(width, "big")[:length]
    for key, loc in cluster.record_index.items():
        if loc.device != idx:
            continue
        chunk = content[loc.offset : loc.offset + loc.length]
        if hashlib.sha256(chunk).hexdigest() != loc.record_hash:
            raise MultiFaultError(
                f"reconstruction of device {idx} fails verification for "
                f"record {key[:12]}…; a second device must be corrupt"
            )
    return content


def repair(cluster: ParityCluster, device: DeviceRef) -> bytes:
    """Reconstruct a device and write the content back."""
    content = reconstruct(cluster, device)
    cluster.write_back(device, content)
    return content


# -- snapshot persistence --------------------------------------------------
#
# Format: one header line with device count and byte lengths, the raw store
# bytes in device order followed by the parity bytes, then the record index
# as tab-separated lines. The header's exact byte counts are what make the
# mixed text/binary layout parseable.


def save_snapshot(cluster: ParityCluster) -> bytes:
    lengths = [len(cluster.data_store(i)) for i in range(cluster.device_count)]
    for i, n in enumerate(lengths):
        if n != cluster.recorded_length(i):
            raise ClusterError(f"device {i} is erased; snapshot requires intact stores")
    header = "d={} lengths={} parity_len={}\n".format(
        cluster.device_count,
        ",".join(str(n) for n in lengths),
        len(cluster.parity_store),
    )
    chunks = [header.encode("utf-8")]
    chunks.extend(cluster.data_store(i) for i in range(cluster.device_count))
    chunks.append(cluster.parity_store)
    index_lines = []
    for key in sorted(cluster.record_index):
        loc = cluster.record_index[key]
        index_lines.append(
            f"{key}\t{loc.device}\t{loc.offset}\t{loc.length}\t{loc.record_hash}\n"
        )
    chunks.append("".join(index_lines).encode("utf-8"))
    return b"".join(chunks)


def load_snapshot(blob: bytes) -> ParityCluster:
    newline = blob.find(b"\n")
    if newline < 0:
        raise ClusterError("snapshot missing header line")
    try:
        parts = dict(
            item.split("=", 1) for item in blob[:newline].decode("utf-8").split()
        )
        device_count = int(parts["d"])
        lengths = [int(n) for n in parts["lengths"].split(",") if n]
        parity_len = int(parts["parity_len"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ClusterError(f"malformed snapshot header: {exc}") from exc
    if len(lengths) != device_count:
        raise ClusterError("snapshot header lengths disagree with device count")
    cluster = ParityCluster(device_count)
    pos = newline + 1
    for i, n in enumerate(lengths):
        cluster._stores[i] = bytearray(blob[pos : pos + n])
        cluster._lengths[i] = n
        if len(cluster._stores[i]) != n:
            raise ClusterError("snapshot truncated inside store bytes")
        pos += n
    cluster._parity = bytearray(blob[pos : pos + parity_len])
    if len(cluster._parity) != parity_len:
        raise ClusterError("snapshot truncated inside parity bytes")
    pos += parity_len
    for line in blob[pos:].decode("utf-8").splitlines():
        key, device, offset, length, record_hash = line.split("\t")
        cluster._index[key] = RecordLocation(
            device=int(device),
            offset=int(offset),
            length=int(length),
            record_hash=record_hash,
        )
    return cluster

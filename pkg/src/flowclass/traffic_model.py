"""Packet, stream and category data model.

Bulk data lives in :class:`PacketTable`, a columnar store backed by numpy
arrays.  :class:`PacketRecord` is the row view handed out when individual
packets are needed.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CONTROL_PROTOCOLS = frozenset(
    {"ICMP", "ARP", "DNS", "NTP", "DHCP", "MDNS", "ICMPV6", "IGMP"}
)

_MAC_HEX = re.compile(r"^[0-9a-f]{12}$")


class StreamMismatchError(ValueError):
    """A record does not belong to the device it is being classified for."""


def normalize_mac(mac: str) -> str:
    """Canonical ``aa:bb:cc:dd:ee:ff`` form; accepts ``:``/``-``/``.`` separators."""
    digits = re.sub(r"[:\-.]", "", mac.strip().lower())
    if not _MAC_HEX.match(digits):
        raise ValueError(f"invalid MAC address: {mac!r}")
    return ":".join(digits[i:i + 2] for i in range(0, 12, 2))


def protocol_key(label: str) -> str:
    return label.strip().upper()


class Kind(enum.Enum):
    USER = "User"
    CONTROL = "Control"


class Direction(enum.Enum):
    RECEIVED = "Received"
    TRANSMITTED = "Transmitted"


@dataclass(frozen=True)
class PacketClass:
    kind: Kind
    direction: Direction


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: float
    length: int
    protocol: str
    eth_src: str
    eth_dst: str
    info: str = ""

    def __post_init__(self):
        if not self.timestamp >= 0:
            raise ValueError(f"timestamp must be non-negative, got {self.timestamp}")
        if self.length < 0:
            raise ValueError(f"length must be non-negative, got {self.length}")
        object.__setattr__(self, "eth_src", normalize_mac(self.eth_src))
        object.__setattr__(self, "eth_dst", normalize_mac(self.eth_dst))


@dataclass(frozen=True)
class DeviceCategory:
    id: int
    name: str


def check_category_ids(categories: Iterable[DeviceCategory]) -> None:
    ids = sorted(c.id for c in categories)
    if ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"category ids must be contiguous from 1, got {ids}")


class ControlSet:
    """Protocol labels counted as control traffic; everything else is user traffic."""

    def __init__(self, labels: Iterable[str] = DEFAULT_CONTROL_PROTOCOLS):
        self.labels = frozenset(protocol_key(x) for x in labels if x.strip())

    @classmethod
    def from_file(cls, path: str | Path) -> ControlSet:
        lines = Path(path).read_text().splitlines()
        return cls(x for x in lines if x.strip() and not x.lstrip().startswith("#"))

    def __contains__(self, label: str) -> bool:
        return protocol_key(label) in self.labels

    def __repr__(self):
        return f"ControlSet({sorted(self.labels)})"


DEFAULT_CONTROL_SET = ControlSet()


def classify_packet(
    record: PacketRecord, device_mac: str, control: ControlSet = DEFAULT_CONTROL_SET
) -> PacketClass:
    mac = normalize_mac(device_mac)
    if record.eth_src == mac:
        direction = Direction.TRANSMITTED
    elif record.eth_dst == mac:
        direction = Direction.RECEIVED
    else:
        raise StreamMismatchError(
            f"record {record.eth_src} -> {record.eth_dst} does not involve device {mac}"
        )
    kind = Kind.CONTROL if record.protocol in control else Kind.USER
    return PacketClass(kind, direction)


@dataclass(frozen=True, eq=False)
class PacketTable:
    """Columnar packet storage.

    ``protocol_codes``, ``src_codes`` and ``dst_codes`` index into the
    ``protocols`` and ``macs`` vocabularies.  ``info`` is either ``None``
    (every record has empty info) or a tuple with one string per row.
    """

    timestamps: np.ndarray
    lengths: np.ndarray
    protocol_codes: np.ndarray
    src_codes: np.ndarray
    dst_codes: np.ndarray
    protocols: tuple[str, ...]
    macs: tuple[str, ...]
    info: tuple[str, ...] | None = None

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("lengths", "protocol_codes", "src_codes", "dst_codes"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if self.info is not None and len(self.info) != n:
            raise ValueError("column info has wrong length")
        if n and (self.timestamps.min() < 0 or not np.all(np.isfinite(self.timestamps))):
            raise ValueError("timestamps must be finite and non-negative")
        if n and self.lengths.min() < 0:
            raise ValueError("lengths must be non-negative")
        for arr in (self.timestamps, self.lengths, self.protocol_codes,
                    self.src_codes, self.dst_codes):
            arr.flags.writeable = False

    @classmethod
    def empty(cls) -> PacketTable:
        return cls.from_records([])

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord]) -> PacketTable:
        records = list(records)
        protocols: dict[str, int] = {}
        macs: dict[str, int] = {}
        pc = [protocols.setdefault(r.protocol, len(protocols)) for r in records]
        sc = [macs.setdefault(r.eth_src, len(macs)) for r in records]
        dc = [macs.setdefault(r.eth_dst, len(macs)) for r in records]
        info = tuple(r.info for r in records)
        return cls(
            timestamps=np.array([r.timestamp for r in records], dtype=np.float64),
            lengths=np.array([r.length for r in records], dtype=np.int64),
            protocol_codes=np.array(pc, dtype=np.int32),
            src_codes=np.array(sc, dtype=np.int32),
            dst_codes=np.array(dc, dtype=np.int32),
            protocols=tuple(protocols),
            macs=tuple(macs),
            info=info if any(info) else None,
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def record(self, i: int) -> PacketRecord:
        return PacketRecord(
            timestamp=float(self.timestamps[i]),
            length=int(self.lengths[i]),
            protocol=self.protocols[self.protocol_codes[i]],
            eth_src=self.macs[self.src_codes[i]],
            eth_dst=self.macs[self.dst_codes[i]],
            info="" if self.info is None else self.info[i],
        )

    def records(self) -> list[PacketRecord]:
        return [self.record(i) for i in range(len(self))]

    def take(self, index: np.ndarray | slice) -> PacketTable:
        """Row subset (boolean mask, integer indices or slice); vocabularies are shared."""
        if isinstance(index, slice):
            info = None if self.info is None else self.info[index]
        else:
            index = np.asarray(index)
            if index.dtype == bool:
                index = np.flatnonzero(index)
            info = None if self.info is None else tuple(self.info[i] for i in index)
        return PacketTable(
            timestamps=self.timestamps[index],
            lengths=self.lengths[index],
            protocol_codes=self.protocol_codes[index],
            src_codes=self.src_codes[index],
            dst_codes=self.dst_codes[index],
            protocols=self.protocols,
            macs=self.macs,
            info=info,
        )

    def mac_code(self, mac: str) -> int:
        """Vocabulary index of ``mac`` or -1 when absent."""
        try:
            return self.macs.index(normalize_mac(mac))
        except ValueError:
            return -1

    def involves(self, mac: str) -> np.ndarray:
        code = self.mac_code(mac)
        if code < 0:
            return np.zeros(len(self), dtype=bool)
        return (self.src_codes == code) | (self.dst_codes == code)

    def control_mask(self, control: ControlSet = DEFAULT_CONTROL_SET) -> np.ndarray:
        lookup = np.array([p in control for p in self.protocols] + [False], dtype=bool)
        return lookup[self.protocol_codes]

    def protocol_mask(self, label: str) -> np.ndarray:
        key = protocol_key(label)
        lookup = np.array([protocol_key(p) == key for p in self.protocols] + [False],
                          dtype=bool)
        return lookup[self.protocol_codes]

    def transmitted_mask(self, mac: str) -> np.ndarray:
        return self.src_codes == self.mac_code(mac)


@dataclass(frozen=True, eq=False)
class DeviceStream:
    """Time-ordered packets to or from one device."""

    device_mac: str
    table: PacketTable = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "device_mac", normalize_mac(self.device_mac))
        ts = self.table.timestamps
        if len(ts) > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("stream records must be non-decreasing in timestamp")
        if len(ts) and not np.all(self.table.involves(self.device_mac)):
            raise StreamMismatchError(f"stream contains records not involving {self.device_mac}")

    @classmethod
    def from_records(cls, device_mac: str, records: Sequence[PacketRecord]) -> DeviceStream:
        return cls(device_mac, PacketTable.from_records(records))

    @property
    def records(self) -> list[PacketRecord]:
        return self.table.records()

    def __len__(self) -> int:
        return len(self.table)

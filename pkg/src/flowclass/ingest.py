"""Capture-export parsing and per-device stream separation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from flowclass.traffic_model import (
    DeviceCategory,
    DeviceStream,
    PacketRecord,
    PacketTable,
    normalize_mac,
)

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("time", "length", "protocol", "eth.src", "eth.dst")
# Columns carrying no information beyond file order.
_ORDINAL_COLUMNS = {"no.", "no"}
_ALIASES = {
    "timestamp": "time",
    "len": "length",
    "proto": "protocol",
    "eth_src": "eth.src",
    "eth_dst": "eth.dst",
    "src_mac": "eth.src",
    "dst_mac": "eth.dst",
}
CAPTURE_HEADER = ("no.", "time", "protocol", "length", "eth.src", "eth.dst", "info")


class CaptureFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CaptureFile:
    path: Path | None
    table: PacketTable = field(repr=False)
    parse_warnings: tuple[tuple[int, str], ...] = ()

    @property
    def records(self) -> list[PacketRecord]:
        return self.table.records()

    def __len__(self) -> int:
        return len(self.table)


def _header_index(header: list[str]) -> tuple[dict[str, int], list[int]]:
    names = [_ALIASES.get(h.strip().lower(), h.strip().lower()) for h in header]
    index = {}
    for i, name in enumerate(names):
        index.setdefault(name, i)
    for col in REQUIRED_COLUMNS:
        if col not in index:
            raise CaptureFormatError(f"capture header is missing required column {col!r}")
    used = {index[c] for c in REQUIRED_COLUMNS}
    extras = [i for i, n in enumerate(names) if i not in used and n not in _ORDINAL_COLUMNS]
    return index, extras


def parse_capture(path: str | Path, delimiter: str = ",") -> CaptureFile:
    """Read a packet-analyzer CSV export.

    The header must name ``time``, ``length``, ``protocol``, ``eth.src`` and
    ``eth.dst`` (case-insensitive).  Any other column except the ordinal
    ``No.`` is kept verbatim in ``info``; several extra columns are joined
    with a single space.  Rows that fail to parse are skipped and reported in
    ``parse_warnings`` as ``(line_number, reason)``.
    """
    path = Path(path)
    timestamps, lengths, pcodes, scodes, dcodes, infos = [], [], [], [], [], []
    protocols: dict[str, int] = {}
    macs: dict[str, int] = {}
    mac_cache: dict[str, str] = {}
    warnings: list[tuple[int, str]] = []

    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise CaptureFormatError(f"{path}: empty capture file (no header row)") from None
        index, extras = _header_index(header)
        i_time, i_len, i_proto, i_src, i_dst = (index[c] for c in REQUIRED_COLUMNS)
        width = max(index[c] for c in REQUIRED_COLUMNS) + 1

        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                warnings.append((line, "blank row"))
                continue
            if len(row) < width:
                warnings.append((line, f"expected at least {width} fields, got {len(row)}"))
                continue
            try:
                t = float(row[i_time])
                if not (t >= 0 and t != float("inf")):
                    raise ValueError(f"bad timestamp {row[i_time]!r}")
                length = int(row[i_len])
                if length < 0:
                    raise ValueError(f"negative length {length}")
                proto = row[i_proto].strip()
                if not proto:
                    raise ValueError("empty protocol label")
                src, dst = row[i_src], row[i_dst]
                if src not in mac_cache:
                    mac_cache[src] = normalize_mac(src)
                if dst not in mac_cache:
                    mac_cache[dst] = normalize_mac(dst)
            except ValueError as exc:
                warnings.append((line, str(exc)))
                continue
            timestamps.append(t)
            lengths.append(length)
            pcodes.append(protocols.setdefault(proto, len(protocols)))
            scodes.append(macs.setdefault(mac_cache[src], len(macs)))
            dcodes.append(macs.setdefault(mac_cache[dst], len(macs)))
            infos.append(" ".join(row[i] for i in extras if i < len(row)))

    for line, reason in warnings:
        logger.warning("%s:%d: skipped row: %s", path, line, reason)
    table = PacketTable(
        timestamps=np.array(timestamps, dtype=np.float64),
        lengths=np.array(lengths, dtype=np.int64),
        protocol_codes=np.array(pcodes, dtype=np.int32),
        src_codes=np.array(scodes, dtype=np.int32),
        dst_codes=np.array(dcodes, dtype=np.int32),
        protocols=tuple(protocols),
        macs=tuple(macs),
        info=tuple(infos) if any(infos) else None,
    )
    return CaptureFile(path, table, tuple(warnings))


def write_capture(table: PacketTable, path: str | Path) -> None:
    """Write ``table`` in the format :func:`parse_capture` reads.

    Timestamps are written with ``repr`` so they round-trip exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts = table.timestamps.tolist()
    ln = table.lengths.tolist()
    pr = [table.protocols[c] for c in table.protocol_codes.tolist()]
    src = [table.macs[c] for c in table.src_codes.tolist()]
    dst = [table.macs[c] for c in table.dst_codes.tolist()]
    info = table.info if table.info is not None else [""] * len(table)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CAPTURE_HEADER)
        writer.writerows(
            (i + 1, repr(t), p, l, s, d, x)
            for i, (t, p, l, s, d, x) in enumerate(zip(ts, pr, ln, src, dst, info))
        )


@dataclass(frozen=True)
class SeparationResult:
    streams: dict[str, DeviceStream]
    dropped: int


def separate_streams(capture: CaptureFile | PacketTable, device_macs: Iterable[str]) -> SeparationResult:
    """Split a mixed capture into one stream per listed device MAC.

    A record lands in every listed device stream whose MAC appears as its
    source or destination; records touching no listed device are dropped and
    counted.  Streams are stably sorted by timestamp.
    """
    table = capture.table if isinstance(capture, CaptureFile) else capture
    macs = sorted({normalize_mac(m) for m in device_macs})
    if not macs:
        raise ValueError("device_macs must be non-empty")
    matched = np.zeros(len(table), dtype=bool)
    streams = {}
    for mac in macs:
        mask = table.involves(mac)
        matched |= mask
        idx = np.flatnonzero(mask)
        order = np.argsort(table.timestamps[idx], kind="stable")
        streams[mac] = DeviceStream(mac, table.take(idx[order]))
    dropped = int(len(table) - matched.sum())
    if dropped:
        logger.info("dropped %d records matching no listed device", dropped)
    return SeparationResult(streams, dropped)


@dataclass(frozen=True)
class DeviceEntry:
    mac: str
    category_id: int
    name: str


def read_device_list(path: str | Path) -> list[DeviceEntry]:
    """Parse ``MAC,category_id,device_name`` lines (``#`` comments allowed)."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",", 2)]
        if len(parts) < 2:
            raise CaptureFormatError(f"{path}:{lineno}: expected MAC,category_id,device_name")
        if parts[0].lower() == "mac":
            continue
        entries.append(DeviceEntry(normalize_mac(parts[0]), int(parts[1]),
                                   parts[2] if len(parts) > 2 else ""))
    return entries


def write_device_list(entries: Iterable[DeviceEntry], path: str | Path) -> None:
    lines = ["mac,category_id,device_name"]
    lines += [f"{e.mac},{e.category_id},{e.name}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def categories_from_names(names: Mapping[int, str]) -> list[DeviceCategory]:
    return [DeviceCategory(i, names[i]) for i in sorted(names)]


def stream_filename(mac: str) -> str:
    return normalize_mac(mac).replace(":", "-") + ".csv"


def write_streams(streams: Mapping[str, DeviceStream], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for mac, stream in streams.items():
        p = out_dir / stream_filename(mac)
        write_capture(stream.table, p)
        paths.append(p)
    return paths


def read_stream(path: str | Path, device_mac: str) -> DeviceStream:
    capture = parse_capture(path)
    return separate_streams(capture, [device_mac]).streams[normalize_mac(device_mac)]


def read_streams(stream_dir: str | Path, device_macs: Iterable[str]) -> dict[str, DeviceStream]:
    stream_dir = Path(stream_dir)
    out = {}
    for mac in device_macs:
        p = stream_dir / stream_filename(mac)
        if not p.exists():
            raise FileNotFoundError(f"no stream file for device {mac}: {p}")
        out[normalize_mac(mac)] = read_stream(p, mac)
    return out

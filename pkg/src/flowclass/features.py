"""Fixed-interval segmentation, per-segment statistics and window assembly."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from flowclass.traffic_model import (
    DEFAULT_CONTROL_SET,
    ControlSet,
    DeviceStream,
    PacketRecord,
    PacketTable,
    normalize_mac,
)

POPULATIONS = ("all", "user", "control", "received", "transmitted")
LENGTH_STATS = ("max", "min", "mean", "sum", "std", "var", "skew", "kurt")
DEFAULT_COUNT_PROTOCOLS = ("TCP", "UDP", "HTTP", "DNS", "ARP", "NTP", "ICMP")

DEFAULT_FEATURES = (
    "user_count",
    "user_length_mean",
    "user_length_max",
    "control_count",
    "control_length_mean",
    "control_length_max",
)

_POP_WORDS = {"all": "all", "total": "all", "user": "user", "control": "control",
              "received": "received", "transmitted": "transmitted"}
_STAT_WORDS = {"peak": "max", "maximum": "max", "max": "max", "minimum": "min", "min": "min",
               "average": "mean", "mean": "mean", "sum": "sum", "std": "std",
               "variance": "var", "var": "var", "skewness": "skew", "skew": "skew",
               "kurtosis": "kurt", "kurt": "kurt"}


class SchemaError(KeyError):
    pass


def full_schema(count_protocols: Sequence[str] = DEFAULT_COUNT_PROTOCOLS) -> tuple[str, ...]:
    names = [f"{p}_count" for p in POPULATIONS]
    names[0] = "total_count"
    names += [f"{p.lower()}_count" for p in count_protocols]
    names += [f"{p}_length_{s}" for p in POPULATIONS for s in LENGTH_STATS]
    return tuple(names)


def resolve_feature_name(name: str, schema: Sequence[str]) -> str:
    """Map a canonical or descriptive feature name onto ``schema``.

    Accepts phrases such as ``"user packet length peak"`` or
    ``"control packet number"``; "peak" means max and "average" means mean.
    """
    if name in schema:
        return name
    words = name.lower().replace("_", " ").replace("-", " ").split()
    pop = next((_POP_WORDS[w] for w in words if w in _POP_WORDS), None)
    if "standard" in words and "deviation" in words:
        stat = "std"
    else:
        stat = next((_STAT_WORDS[w] for w in words if w in _STAT_WORDS), None)
    is_count = any(w in ("number", "count", "packets") for w in words) and stat is None
    candidate = None
    if pop and is_count:
        candidate = "total_count" if pop == "all" else f"{pop}_count"
    elif pop and stat:
        candidate = f"{pop}_length_{stat}"
    if candidate in schema:
        return candidate
    raise SchemaError(f"unknown feature name: {name!r}")


@dataclass(frozen=True, eq=False)
class Segment:
    device_mac: str
    interval_index: int
    table: PacketTable = field(repr=False)

    @property
    def records(self) -> list[PacketRecord]:
        return self.table.records()

    def __len__(self) -> int:
        return len(self.table)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    schema: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.schema),):
            raise ValueError(f"{values.shape[0]} values for {len(self.schema)} schema names")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.schema.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.schema, self.values.tolist()))


@dataclass(frozen=True, eq=False)
class WindowedSample:
    """``t`` consecutive segment feature vectors of one device, with its label."""

    values: np.ndarray  # (t, n_features)
    schema: tuple[str, ...]
    label: int
    device_mac: str
    start_index: int = 0

    @property
    def features(self) -> list[FeatureVector]:
        return [FeatureVector(row, self.schema) for row in self.values]

    @property
    def window(self) -> int:
        return self.values.shape[0]


def _check_interval(interval: float) -> None:
    if not interval > 0 or not math.isfinite(interval):
        raise ValueError(f"segmentation interval must be positive, got {interval}")


def segment_indices(timestamps: np.ndarray, interval: float) -> np.ndarray:
    """Exact ``floor(t / T)``; ``floor_divide`` avoids the rounding of ``t / T`` near boundaries."""
    return np.floor_divide(np.asarray(timestamps, dtype=np.float64), interval).astype(np.int64)


def segment_stream(stream: DeviceStream, interval: float) -> list[Segment]:
    """Partition into half-open ``[iT, (i+1)T)`` intervals.

    Empty intervals between the first and last busy one are kept as empty
    segments so list position tracks wall-clock time.
    """
    _check_interval(interval)
    if not len(stream):
        return []
    seg = segment_indices(stream.table.timestamps, interval)
    first, last = int(seg[0]), int(seg[-1])
    bounds = np.searchsorted(seg, np.arange(first, last + 2))
    return [
        Segment(stream.device_mac, first + k,
                stream.table.take(slice(int(bounds[k]), int(bounds[k + 1]))))
        for k in range(last - first + 1)
    ]


def _group_length_stats(lengths: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group length statistics in ``LENGTH_STATS`` order.

    Uses population moments from a two-pass computation (group mean first,
    then central powers).  Skewness and kurtosis are 0 when the variance is.
    """
    out = np.zeros((n_groups, len(LENGTH_STATS)))
    if len(lengths) == 0:
        return out
    x = lengths.astype(np.float64)
    count = np.bincount(groups, minlength=n_groups).astype(np.float64)
    total = np.bincount(groups, weights=x, minlength=n_groups)
    nonempty = count > 0
    mean = np.divide(total, count, out=np.zeros(n_groups), where=nonempty)
    d = x - mean[groups]
    d2 = d * d
    m2 = np.bincount(groups, weights=d2, minlength=n_groups)
    m3 = np.bincount(groups, weights=d2 * d, minlength=n_groups)
    m4 = np.bincount(groups, weights=d2 * d2, minlength=n_groups)
    m2 = np.divide(m2, count, out=np.zeros(n_groups), where=nonempty)
    m3 = np.divide(m3, count, out=np.zeros(n_groups), where=nonempty)
    m4 = np.divide(m4, count, out=np.zeros(n_groups), where=nonempty)
    spread = m2 > 0
    skew = np.divide(m3, m2 ** 1.5, out=np.zeros(n_groups), where=spread)
    kurt = np.divide(m4, m2 * m2, out=np.zeros(n_groups), where=spread)

    gmax = np.full(n_groups, -np.inf)
    gmin = np.full(n_groups, np.inf)
    np.maximum.at(gmax, groups, x)
    np.minimum.at(gmin, groups, x)
    gmax[~nonempty] = 0.0
    gmin[~nonempty] = 0.0

    out[:, 0] = gmax
    out[:, 1] = gmin
    out[:, 2] = mean
    out[:, 3] = total
    out[:, 4] = np.sqrt(m2)
    out[:, 5] = m2
    out[:, 6] = skew
    out[:, 7] = kurt
    return out


def table_features(
    table: PacketTable,
    device_mac: str,
    groups: np.ndarray,
    n_groups: int,
    control: ControlSet = DEFAULT_CONTROL_SET,
    count_protocols: Sequence[str] = DEFAULT_COUNT_PROTOCOLS,
) -> np.ndarray:
    """Full-schema feature matrix, one row per group id in ``range(n_groups)``."""
    is_control = table.control_mask(control)
    is_tx = table.transmitted_mask(device_mac)
    masks = {
        "all": np.ones(len(table), dtype=bool),
        "user": ~is_control,
        "control": is_control,
        "received": ~is_tx,
        "transmitted": is_tx,
    }
    counts = [np.bincount(groups[masks[p]], minlength=n_groups) for p in POPULATIONS]
    counts += [np.bincount(groups[table.protocol_mask(p)], minlength=n_groups)
               for p in count_protocols]
    stats = [_group_length_stats(table.lengths[masks[p]], groups[masks[p]], n_groups)
             for p in POPULATIONS]
    return np.hstack([np.column_stack(counts).astype(np.float64)] + stats)


def extract_features(
    segment: Segment,
    device_mac: str | None = None,
    control: ControlSet = DEFAULT_CONTROL_SET,
    count_protocols: Sequence[str] = DEFAULT_COUNT_PROTOCOLS,
) -> FeatureVector:
    mac = normalize_mac(device_mac or segment.device_mac)
    groups = np.zeros(len(segment.table), dtype=np.int64)
    row = table_features(segment.table, mac, groups, 1, control, count_protocols)[0]
    return FeatureVector(row, full_schema(count_protocols))


@dataclass(frozen=True, eq=False)
class StreamFeatures:
    """Feature matrix of every segment of one device stream, first to last busy interval."""

    device_mac: str
    first_index: int
    matrix: np.ndarray  # (n_segments, len(schema))
    schema: tuple[str, ...]

    def vectors(self) -> list[FeatureVector]:
        return [FeatureVector(row, self.schema) for row in self.matrix]

    def select(self, names: Sequence[str]) -> StreamFeatures:
        cols = _schema_columns(self.schema, names)
        return StreamFeatures(self.device_mac, self.first_index, self.matrix[:, cols],
                              tuple(self.schema[c] for c in cols))


def stream_features(
    stream: DeviceStream,
    interval: float,
    control: ControlSet = DEFAULT_CONTROL_SET,
    count_protocols: Sequence[str] = DEFAULT_COUNT_PROTOCOLS,
) -> StreamFeatures:
    """Segment ``stream`` and extract features for every segment at once.

    Row ``k`` equals ``extract_features(segment_stream(stream, interval)[k])``.
    """
    _check_interval(interval)
    schema = full_schema(count_protocols)
    if not len(stream):
        return StreamFeatures(stream.device_mac, 0, np.zeros((0, len(schema))), schema)
    seg = segment_indices(stream.table.timestamps, interval)
    first = int(seg[0])
    groups = seg - first
    n = int(groups[-1]) + 1
    matrix = table_features(stream.table, stream.device_mac, groups, n, control, count_protocols)
    return StreamFeatures(stream.device_mac, first, matrix, schema)


def _schema_columns(schema: Sequence[str], names: Sequence[str]) -> list[int]:
    schema = tuple(schema)
    return [schema.index(resolve_feature_name(n, schema)) for n in names]


def select_schema(full: FeatureVector, names: Sequence[str]) -> FeatureVector:
    cols = _schema_columns(full.schema, names)
    return FeatureVector(full.values[cols], tuple(full.schema[c] for c in cols))


class FeatureScaler:
    """Per-feature min-max scaling fitted on training data.

    Features constant on the fitting set map to 0.  Values outside the
    fitted range are not clamped.
    """

    def __init__(self, minimum: np.ndarray, span: np.ndarray):
        self.minimum = np.asarray(minimum, dtype=np.float64)
        self.span = np.asarray(span, dtype=np.float64)

    @classmethod
    def fit(cls, data: np.ndarray) -> FeatureScaler:
        data = np.asarray(data, dtype=np.float64)
        data = data.reshape(-1, data.shape[-1])
        if data.shape[0] == 0:
            raise ValueError("cannot fit a scaler on an empty dataset")
        lo = data.min(axis=0)
        return cls(lo, data.max(axis=0) - lo)

    def transform(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        varying = self.span > 0
        scale = np.where(varying, self.span, 1.0)
        return np.where(varying, (data - self.minimum) / scale, 0.0)

    def inverse_transform(self, data: np.ndarray) -> np.ndarray:
        """Undo :meth:`transform`; constant features come back as their fitted value."""
        return np.asarray(data, dtype=np.float64) * self.span + self.minimum

    def __eq__(self, other):
        return (isinstance(other, FeatureScaler)
                and np.array_equal(self.minimum, other.minimum)
                and np.array_equal(self.span, other.span))


def normalize(dataset: Sequence[FeatureVector]) -> tuple[list[FeatureVector], FeatureScaler]:
    if not dataset:
        raise ValueError("normalize needs a non-empty dataset")
    schema = dataset[0].schema
    data = np.vstack([v.values for v in dataset])
    scaler = FeatureScaler.fit(data)
    return [FeatureVector(row, schema) for row in scaler.transform(data)], scaler


def window_starts(n: int, window: int, overlap: int) -> range:
    if window < 1:
        raise ValueError(f"window size must be positive, got {window}")
    if not 0 <= overlap < window:
        raise ValueError(f"overlap must satisfy 0 <= overlap < window, got {overlap} for {window}")
    return range(0, n - window + 1, window - overlap)


def window_array(matrix: np.ndarray, window: int, overlap: int) -> np.ndarray:
    """Stack overlapping windows of rows: ``(n_windows, window, n_features)``."""
    starts = window_starts(len(matrix), window, overlap)
    if not starts:
        return np.zeros((0, window, matrix.shape[1]))
    view = np.lib.stride_tricks.sliding_window_view(matrix, window, axis=0)
    return view[list(starts)].transpose(0, 2, 1).copy()


def make_windows(
    vectors: Sequence[FeatureVector],
    window: int,
    overlap: int,
    label: int,
    device_mac: str,
) -> list[WindowedSample]:
    starts = window_starts(len(vectors), window, overlap)
    if not starts:
        return []
    schema = vectors[0].schema
    if any(v.schema != schema for v in vectors):
        raise SchemaError("all feature vectors in a window sequence must share one schema")
    matrix = np.vstack([v.values for v in vectors])
    mac = normalize_mac(device_mac)
    return [WindowedSample(matrix[s:s + window], schema, label, mac, s) for s in starts]


@dataclass(eq=False)
class WindowDataset:
    """Array form of a list of :class:`WindowedSample`.

    ``X`` has shape ``(n, window, n_features)``; ``labels`` and ``macs`` are
    parallel arrays.
    """

    X: np.ndarray
    labels: np.ndarray
    macs: np.ndarray
    schema: tuple[str, ...]
    window: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.window, len(self.schema))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.macs = np.asarray(self.macs, dtype=object)
        if not (len(self.X) == len(self.labels) == len(self.macs)):
            raise ValueError("X, labels and macs must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> WindowDataset:
        return WindowDataset(self.X[index], self.labels[index], self.macs[index],
                             self.schema, self.window)

    def device_mask(self, macs: Iterable[str]) -> np.ndarray:
        wanted = {normalize_mac(m) for m in macs}
        return np.array([m in wanted for m in self.macs], dtype=bool)

    def samples(self) -> list[WindowedSample]:
        return [WindowedSample(x, self.schema, int(y), m)
                for x, y, m in zip(self.X, self.labels, self.macs)]

    @classmethod
    def from_samples(cls, samples: Sequence[WindowedSample]) -> WindowDataset:
        if not samples:
            raise ValueError("no samples")
        schema, window = samples[0].schema, samples[0].window
        return cls(np.stack([s.values for s in samples]), [s.label for s in samples],
                   [s.device_mac for s in samples], schema, window)

    @classmethod
    def concat(cls, parts: Sequence[WindowDataset]) -> WindowDataset:
        parts = list(parts)
        return cls(np.concatenate([p.X for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.macs for p in parts]),
                   parts[0].schema, parts[0].window)


def build_windows(
    features: Mapping[str, StreamFeatures],
    labels: Mapping[str, int],
    window: int,
    overlap: int,
) -> WindowDataset:
    """Window every device's (already schema-selected) feature matrix."""
    schema = None
    parts = []
    for mac in sorted(features):
        sf = features[mac]
        schema = schema or sf.schema
        if sf.schema != schema:
            raise SchemaError("devices disagree on the feature schema")
        X = window_array(sf.matrix, window, overlap)
        parts.append(WindowDataset(X, np.full(len(X), labels[mac]), np.full(len(X), mac, dtype=object),
                                   sf.schema, window))
    if not parts:
        raise ValueError("no device features to window")
    return WindowDataset.concat(parts)


def write_dataset(ds: WindowDataset, path: str | Path) -> None:
    """One CSV row per window: ``device_mac,label`` then values in window-major order.

    The header names each column ``w<k>:<feature>``; ``k`` runs over window
    positions, so the schema and window size are recoverable from it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["device_mac", "label"] + [f"w{k}:{name}" for k in range(ds.window) for name in ds.schema]
    flat = ds.X.reshape(len(ds), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for mac, y, row in zip(ds.macs, ds.labels.tolist(), flat.tolist()):
            w.writerow([mac, y] + [repr(v) for v in row])


def read_dataset(path: str | Path) -> WindowDataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["device_mac", "label"]:
            raise SchemaError(f"{path}: not a window dataset file")
        cols = [h.split(":", 1) for h in header[2:]]
        window = len({k for k, _ in cols})
        schema = tuple(name for k, name in cols if k == "w0")
        if window * len(schema) != len(cols):
            raise SchemaError(f"{path}: header does not describe a regular window layout")
        macs, labels, rows = [], [], []
        for row in reader:
            if not row:
                continue
            macs.append(normalize_mac(row[0]))
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), window, len(schema))
    return WindowDataset(X, labels, macs, schema, window)


def read_feature_names(path: str | Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]

"""Held-out-device experiments, confusion matrices and parameter sweeps."""

from __future__ import annotations

import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from flowclass.baselines import Classifier, make_classifier
from flowclass.cascade import CascadeConfig
from flowclass.features import (
    DEFAULT_COUNT_PROTOCOLS,
    DEFAULT_FEATURES,
    FeatureScaler,
    StreamFeatures,
    WindowDataset,
    build_windows,
    stream_features,
)
from flowclass.traffic_model import DEFAULT_CONTROL_SET, ControlSet, DeviceStream, normalize_mac

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ("interval", "window", "ratio")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(sorted(normalize_mac(m) for m in self.train)))
        object.__setattr__(self, "test", tuple(sorted(normalize_mac(m) for m in self.test)))

    def validate(self, labels: Mapping[str, int]) -> None:
        """Enforce the unseen-device constraint.

        Train and test devices must be disjoint, all must be labelled, and
        every test device's category needs at least one training device.
        """
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise SplitError(f"devices in both train and test: {sorted(overlap)}")
        if not self.train or not self.test:
            raise SplitError("split needs at least one train and one test device")
        missing = [m for m in self.train + self.test if m not in labels]
        if missing:
            raise SplitError(f"split lists devices without labels: {missing}")
        train_cats = {labels[m] for m in self.train}
        orphan = sorted({labels[m] for m in self.test} - train_cats)
        if orphan:
            raise SplitError(f"test categories {orphan} have no training device")


def read_split_file(path: str | Path) -> SplitSpec:
    """``[train]`` and ``[test]`` sections with one MAC per line."""
    sections: dict[str, list[str]] = {"train": [], "test": []}
    current = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise SplitError(f"{path}:{lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise SplitError(f"{path}:{lineno}: MAC outside a [train]/[test] section")
        sections[current].append(normalize_mac(line.split(",")[0]))
    return SplitSpec(tuple(sections["train"]), tuple(sections["test"]))


def write_split_file(split: SplitSpec, path: str | Path) -> None:
    lines = ["[train]", *split.train, "", "[test]", *split.test]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- reports

def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true labels, columns predicted labels (both 1-based)."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true) - 1, np.asarray(y_pred) - 1), 1)
    return cm


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    seed: int
    algo: str
    split: SplitSpec
    config: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int, **meta) -> EvalReport:
        cm = confusion_matrix(y_true, y_pred, num_classes)
        diag = np.diag(cm).astype(np.float64)
        col, row = cm.sum(axis=0), cm.sum(axis=1)
        precision = np.divide(diag, col, out=np.zeros(num_classes), where=col > 0)
        recall = np.divide(diag, row, out=np.zeros(num_classes), where=row > 0)
        total = cm.sum()
        accuracy = float(diag.sum() / total) if total else 0.0
        return cls(accuracy, cm, precision, recall, **meta)

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return (self.accuracy == other.accuracy and np.array_equal(self.confusion, other.confusion)
                and np.array_equal(self.precision, other.precision)
                and np.array_equal(self.recall, other.recall) and self.seed == other.seed
                and self.algo == other.algo and self.split == other.split
                and self.config == other.config and self.audit == other.audit)

    def to_text(self) -> str:
        out = io.StringIO()
        for note in self.notes:
            out.write(f"# {note}\n")
        out.write(f"algo: {self.algo}\nseed: {self.seed}\naccuracy: {self.accuracy:.4f}\n")
        out.write(f"train devices: {', '.join(self.split.train)}\n")
        out.write(f"test devices: {', '.join(self.split.test)}\n")
        out.write("confusion matrix (rows = true, columns = predicted):\n")
        n = len(self.confusion)
        out.write("      " + "".join(f"{c:>8d}" for c in range(1, n + 1)) + "\n")
        for r in range(n):
            out.write(f"{r + 1:>6d}" + "".join(f"{v:>8d}" for v in self.confusion[r]) + "\n")
        out.write("class  precision  recall\n")
        for c in range(n):
            out.write(f"{c + 1:>5d}  {self.precision[c]:>9.4f}  {self.recall[c]:>6.4f}\n")
        if self.audit:
            out.write("audit: " + ", ".join(f"{k}={v}" for k, v in self.audit.items()) + "\n")
        return out.getvalue()

    def to_csv(self) -> str:
        n = len(self.confusion)
        lines = ["true_label," + ",".join(f"pred_{c}" for c in range(1, n + 1)) + ",precision,recall"]
        for r in range(n):
            lines.append(f"{r + 1}," + ",".join(str(v) for v in self.confusion[r])
                         + f",{self.precision[r]!r},{self.recall[r]!r}")
        return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    reports: list[EvalReport]
    classifiers: list[Classifier] = field(default_factory=list, repr=False)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.reports])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        return float(self.accuracies.std())  # population std

    def summary(self) -> str:
        accs = ", ".join(f"{a:.4f}" for a in self.accuracies)
        return (f"{self.reports[0].algo}: mean accuracy {self.mean_accuracy:.4f} "
                f"(std {self.std_accuracy:.4f}) over {len(self.reports)} runs [{accs}]")

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, rep in enumerate(self.reports):
            (out_dir / f"run{k}.txt").write_text(rep.to_text())
            (out_dir / f"run{k}_confusion.csv").write_text(rep.to_csv())
        rows = ["run,seed,accuracy"] + [f"{k},{r.seed},{r.accuracy!r}" for k, r in enumerate(self.reports)]
        (out_dir / "runs.csv").write_text("\n".join(rows) + "\n")
        (out_dir / "summary.txt").write_text(self.summary() + "\n")


# --------------------------------------------------------------------------- featurisation

@dataclass
class DeviceData:
    """Schema-selected per-segment features of every labelled device at one interval."""

    features: dict[str, StreamFeatures]
    labels: dict[str, int]
    interval: float

    @property
    def num_classes(self) -> int:
        return max(self.labels.values())

    def windows(self, window: int, overlap: int) -> WindowDataset:
        return build_windows(self.features, self.labels, window, overlap)


def featurize_streams(
    streams: Mapping[str, DeviceStream],
    labels: Mapping[str, int],
    interval: float,
    names: Sequence[str] = DEFAULT_FEATURES,
    control: ControlSet = DEFAULT_CONTROL_SET,
    count_protocols: Sequence[str] = DEFAULT_COUNT_PROTOCOLS,
) -> DeviceData:
    labels = {normalize_mac(m): int(c) for m, c in labels.items()}
    feats = {}
    for mac, stream in streams.items():
        mac = normalize_mac(mac)
        if mac not in labels:
            continue
        feats[mac] = stream_features(stream, interval, control, count_protocols).select(names)
    return DeviceData(feats, {m: labels[m] for m in feats}, interval)


# --------------------------------------------------------------------------- experiments

ClassifierFactory = Callable[[str, CascadeConfig], Classifier]


def _default_factory(knn_k: int = 10, tree_max_depth: int = 12) -> ClassifierFactory:
    def factory(algo: str, config: CascadeConfig) -> Classifier:
        return make_classifier(algo, config, knn_k=knn_k, tree_max_depth=tree_max_depth)
    return factory


def run_experiment(
    data: DeviceData | WindowDataset,
    split: SplitSpec,
    algo: str,
    config: CascadeConfig | None = None,
    repeats: int = 5,
    base_seed: int = 0,
    window: int = 6,
    overlap: int = 3,
    train_ratio: float | None = None,
    factory: ClassifierFactory | None = None,
    keep_classifiers: bool = False,
    notes: Sequence[str] = (),
) -> ExperimentResult:
    """Fit on the train devices and score on the held-out test devices, ``repeats`` times.

    Repeat ``r`` uses seed ``base_seed + r`` for subsampling, shuffling and
    model initialisation.  The min-max scaler is fitted on the training rows
    only.  ``train_ratio`` keeps that fraction of the train-device windows.
    Each report's ``audit`` counts how many rows entered normalisation and
    fitting, and how many of those came from test devices.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    config = config or CascadeConfig()
    factory = factory or _default_factory()
    if isinstance(data, DeviceData):
        labels = data.labels
        ds = data.windows(window, overlap)
    else:
        ds = data
        labels = {}
        for m, y in zip(ds.macs, ds.labels.tolist()):
            labels.setdefault(m, y)
    split.validate(labels)
    num_classes = max(labels.values())
    config = dataclasses.replace(config, num_classes=num_classes, window=ds.window,
                                 num_features=len(ds.schema))

    train_rows = np.flatnonzero(ds.device_mask(split.train))
    test_rows = np.flatnonzero(ds.device_mask(split.test))
    if len(train_rows) == 0 or len(test_rows) == 0:
        raise SplitError("split leaves no train or no test windows")
    is_test_device = ds.device_mask(split.test)

    notes = tuple(notes)
    if train_ratio is not None:
        notes += (f"train_ratio={train_ratio:g} is a sample-level fraction of the train devices' "
                  "windows; test devices stay held out",)
    result = ExperimentResult([])
    for r in range(repeats):
        seed = base_seed + r
        rng = np.random.default_rng(seed)
        rows = train_rows
        if train_ratio is not None:
            if not 0.0 < train_ratio <= 1.0:
                raise ValueError("train_ratio must lie in (0, 1]")
            n = max(1, int(round(train_ratio * len(rows))))
            rows = np.sort(rng.choice(rows, size=n, replace=False))
        scaler = FeatureScaler.fit(ds.X[rows])
        audit = {"norm_rows": int(len(rows)), "norm_test_device_rows": int(is_test_device[rows].sum())}
        rows = rng.permutation(rows)
        clf = factory(algo, dataclasses.replace(config, seed=seed))
        clf.fit(scaler.transform(ds.X[rows]), ds.labels[rows])
        audit.update(fit_rows=int(len(rows)), fit_test_device_rows=int(is_test_device[rows].sum()))
        pred = clf.predict(scaler.transform(ds.X[test_rows]))
        if hasattr(clf, "scaler"):
            clf.scaler = scaler
        report = EvalReport.from_predictions(
            ds.labels[test_rows], pred, num_classes, seed=seed, algo=getattr(clf, "name", algo),
            split=split, config=config.header() | {"train_ratio": train_ratio}, audit=audit,
            notes=notes)
        logger.info("%s seed %d: accuracy %.4f", report.algo, seed, report.accuracy)
        result.reports.append(report)
        if keep_classifiers:
            result.classifiers.append(clf)
    return result


@dataclass
class SweepRow:
    value: float
    mean_accuracy: float
    std_accuracy: float
    repeats: int


def sweep_to_csv(param: str, rows: Iterable[SweepRow]) -> str:
    lines = [f"{param},mean_accuracy,std_accuracy,repeats"]
    lines += [f"{r.value:g},{r.mean_accuracy!r},{r.std_accuracy!r},{r.repeats}" for r in rows]
    return "\n".join(lines) + "\n"


def sweep(
    param: str,
    values: Sequence[float],
    streams: Mapping[str, DeviceStream],
    labels: Mapping[str, int],
    split: SplitSpec,
    algo: str = "cascade",
    config: CascadeConfig | None = None,
    interval: float = 300.0,
    window: int = 6,
    overlap: int = 3,
    names: Sequence[str] = DEFAULT_FEATURES,
    repeats: int = 5,
    base_seed: int = 0,
    factory: ClassifierFactory | None = None,
) -> list[SweepRow]:
    """One :func:`run_experiment` per value of ``param``.

    ``interval`` re-segments the streams at each value (seconds).
    ``window`` sets the window size with a 50% overlap (``t // 2``).
    ``ratio`` keeps that fraction of train-device windows for fitting; test
    devices stay held out.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if not values:
        raise ValueError("sweep needs at least one value")
    base = None if param == "interval" else featurize_streams(streams, labels, interval, names)
    rows = []
    for v in values:
        kw = dict(window=window, overlap=overlap)
        data = base
        if param == "interval":
            data = featurize_streams(streams, labels, float(v), names)
        elif param == "window":
            kw = dict(window=int(v), overlap=int(v) // 2)
        res = run_experiment(data, split, algo, config, repeats, base_seed,
                             train_ratio=float(v) if param == "ratio" else None,
                             factory=factory, **kw)
        rows.append(SweepRow(float(v), res.mean_accuracy, res.std_accuracy, repeats))
        logger.info("sweep %s=%g: %s", param, v, res.summary())
    return rows

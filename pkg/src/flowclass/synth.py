"""Synthetic multi-device captures built from per-category traffic archetypes.

Each device emits user and control packets from a doubly-stochastic Poisson
process: a per-minute intensity combines a diurnal sinusoid with a two-state
idle/active modulator whose holding times are exponential.  Devices of one
category differ through a per-device jitter of every archetype parameter.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from flowclass.ingest import CaptureFile, DeviceEntry
from flowclass.traffic_model import DeviceCategory, PacketTable, normalize_mac

MIN_LENGTH, MAX_LENGTH = 42, 1514
BIN_SECONDS = 60.0
DAY_SECONDS = 86400.0
BROADCAST = "ff:ff:ff:ff:ff:ff"


@dataclass(frozen=True)
class LengthComponent:
    mean: float
    std: float
    weight: float


@dataclass(frozen=True)
class CategoryArchetype:
    """Traffic profile of one device category.  Rates are packets per minute."""

    name: str
    category_id: int
    user_rate: float
    control_rate: float
    burstiness: float = 1.0
    mean_idle_minutes: float = 30.0
    mean_active_minutes: float = 10.0
    user_lengths: tuple[LengthComponent, ...] = (LengthComponent(400.0, 100.0, 1.0),)
    control_lengths: tuple[LengthComponent, ...] = (LengthComponent(80.0, 15.0, 1.0),)
    diurnal_amplitude: float = 0.0
    user_protocols: Mapping[str, float] = field(default_factory=lambda: {"TCP": 1.0})
    control_protocols: Mapping[str, float] = field(default_factory=lambda: {"DNS": 1.0})
    tx_fraction: float = 0.5

    def __post_init__(self):
        if self.user_rate < 0 or self.control_rate < 0:
            raise ValueError(f"{self.name}: rates must be non-negative")
        if self.burstiness < 1.0:
            raise ValueError(f"{self.name}: burstiness must be >= 1")
        if self.mean_idle_minutes <= 0 or self.mean_active_minutes <= 0:
            raise ValueError(f"{self.name}: holding times must be positive")
        if not 0.0 <= self.diurnal_amplitude <= 1.0:
            raise ValueError(f"{self.name}: diurnal amplitude must lie in [0, 1]")
        if not 0.0 <= self.tx_fraction <= 1.0:
            raise ValueError(f"{self.name}: tx_fraction must lie in [0, 1]")
        for label, mix in (("user_lengths", self.user_lengths), ("control_lengths", self.control_lengths)):
            if not mix or abs(sum(c.weight for c in mix) - 1.0) > 1e-9 or any(c.weight < 0 or c.std < 0 for c in mix):
                raise ValueError(f"{self.name}: {label} weights must be non-negative and sum to 1")
        for label, mix in (("user_protocols", self.user_protocols), ("control_protocols", self.control_protocols)):
            if not mix or abs(sum(mix.values()) - 1.0) > 1e-9 or min(mix.values()) < 0:
                raise ValueError(f"{self.name}: {label} weights must be non-negative and sum to 1")

    def jittered(self, rng: np.random.Generator, spread: float = 0.2) -> CategoryArchetype:
        """Copy with every rate, holding time and length mean scaled by U(1-spread, 1+spread)."""

        def j(v: float) -> float:
            return float(v * rng.uniform(1.0 - spread, 1.0 + spread))

        return dataclasses.replace(
            self,
            user_rate=j(self.user_rate),
            control_rate=j(self.control_rate),
            burstiness=max(1.0, j(self.burstiness)),
            mean_idle_minutes=j(self.mean_idle_minutes),
            mean_active_minutes=j(self.mean_active_minutes),
            user_lengths=tuple(dataclasses.replace(c, mean=j(c.mean)) for c in self.user_lengths),
            control_lengths=tuple(dataclasses.replace(c, mean=j(c.mean)) for c in self.control_lengths),
        )


@dataclass(frozen=True)
class SyntheticDeviceSpec:
    mac: str
    category_id: int
    seed: int
    name: str = ""
    split: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "mac", normalize_mac(self.mac))
        if self.split not in (None, "train", "test"):
            raise ValueError(f"device {self.mac}: split must be train or test, got {self.split!r}")


@dataclass(frozen=True)
class Scenario:
    archetypes: dict[int, CategoryArchetype]
    devices: tuple[SyntheticDeviceSpec, ...]
    duration_days: float = 19.0
    seed: int = 0
    gateway: str = "02:00:00:00:00:fe"
    background_rate: float = 0.0

    @property
    def categories(self) -> list[DeviceCategory]:
        return [DeviceCategory(i, self.archetypes[i].name) for i in sorted(self.archetypes)]

    def device_entries(self) -> list[DeviceEntry]:
        return [DeviceEntry(d.mac, d.category_id, d.name) for d in self.devices]

    def labels(self) -> dict[str, int]:
        return {d.mac: d.category_id for d in self.devices}

    def split_macs(self) -> tuple[list[str], list[str]]:
        train = [d.mac for d in self.devices if d.split == "train"]
        test = [d.mac for d in self.devices if d.split == "test"]
        return train, test

    def restrict(self, category_ids: Sequence[int]) -> Scenario:
        """Keep only the listed categories, relabelled 1..n in the given order."""
        remap = {old: new for new, old in enumerate(category_ids, 1)}
        archetypes = {remap[i]: dataclasses.replace(a, category_id=remap[i])
                      for i, a in self.archetypes.items() if i in remap}
        devices = tuple(dataclasses.replace(d, category_id=remap[d.category_id])
                        for d in self.devices if d.category_id in remap)
        return dataclasses.replace(self, archetypes=archetypes, devices=devices)


# --------------------------------------------------------------------------- generation

def _draw_lengths(rng: np.random.Generator, mix: Sequence[LengthComponent], n: int) -> np.ndarray:
    comp = rng.choice(len(mix), size=n, p=[c.weight for c in mix])
    means = np.array([c.mean for c in mix])[comp]
    stds = np.array([c.std for c in mix])[comp]
    lengths = np.rint(rng.normal(means, stds))
    return np.clip(lengths, MIN_LENGTH, MAX_LENGTH).astype(np.int64)


def _modulator(rng: np.random.Generator, arch: CategoryArchetype, n_bins: int) -> np.ndarray:
    """Per-minute rate multiplier of the idle/active modulator, long-run mean 1."""
    state = np.zeros(n_bins, dtype=bool)
    p_active = arch.mean_active_minutes / (arch.mean_idle_minutes + arch.mean_active_minutes)
    t = 0.0
    active = rng.random() < p_active
    while t < n_bins:
        hold = rng.exponential(arch.mean_active_minutes if active else arch.mean_idle_minutes)
        lo, hi = int(np.ceil(t - 0.5)), int(np.ceil(t + hold - 0.5))
        if active:
            state[max(lo, 0):min(hi, n_bins)] = True
        t += hold
        active = not active
    base = 1.0 / (1.0 - p_active + p_active * arch.burstiness)
    return np.where(state, base * arch.burstiness, base)


def _arrivals(rng: np.random.Generator, per_minute: np.ndarray, duration: float) -> np.ndarray:
    """Sorted arrival times of a Poisson process with piecewise-constant per-minute intensity."""
    n_bins = len(per_minute)
    starts = np.arange(n_bins) * BIN_SECONDS
    widths = np.minimum(BIN_SECONDS, duration - starts)
    counts = rng.poisson(per_minute * widths / BIN_SECONDS)
    bins = np.repeat(np.arange(n_bins), counts)
    times = starts[bins] + rng.random(len(bins)) * widths[bins]
    # microsecond resolution, as in analyzer exports
    times = np.floor(times * 1e6) / 1e6
    return np.sort(times)


@dataclass
class _DeviceTraffic:
    timestamps: np.ndarray
    lengths: np.ndarray
    proto_names: tuple[str, ...]
    proto_codes: np.ndarray  # index into proto_names
    transmitted: np.ndarray
    broadcast: np.ndarray  # peer is the broadcast address rather than the gateway


def generate_device(spec: SyntheticDeviceSpec, archetype: CategoryArchetype, duration: float,
                    seed: int) -> tuple[_DeviceTraffic, CategoryArchetype]:
    """Traffic of one device plus the jittered profile it was drawn from."""
    profile = archetype.jittered(np.random.default_rng([spec.seed, 0x5EED]))
    rng = np.random.default_rng([seed, spec.seed])
    n_bins = int(np.ceil(duration / BIN_SECONDS))
    minute_mid = (np.arange(n_bins) + 0.5) * BIN_SECONDS
    phase = rng.uniform(0.0, 2.0 * np.pi)
    diurnal = 1.0 + profile.diurnal_amplitude * np.sin(2.0 * np.pi * minute_mid / DAY_SECONDS + phase)

    user_t = _arrivals(rng, profile.user_rate * diurnal * _modulator(rng, profile, n_bins), duration)
    ctrl_t = _arrivals(rng, np.full(n_bins, profile.control_rate), duration)

    names = tuple(profile.user_protocols) + tuple(profile.control_protocols)
    n_user = len(profile.user_protocols)
    user_codes = rng.choice(n_user, size=len(user_t), p=list(profile.user_protocols.values()))
    ctrl_codes = n_user + rng.choice(len(profile.control_protocols), size=len(ctrl_t),
                                     p=list(profile.control_protocols.values()))

    ts = np.concatenate([user_t, ctrl_t])
    lengths = np.concatenate([_draw_lengths(rng, profile.user_lengths, len(user_t)),
                              _draw_lengths(rng, profile.control_lengths, len(ctrl_t))])
    codes = np.concatenate([user_codes, ctrl_codes])
    tx = rng.random(len(ts)) < profile.tx_fraction
    arp = np.array([n.upper() == "ARP" for n in names] + [False])[codes]
    order = np.argsort(ts, kind="stable")
    traffic = _DeviceTraffic(ts[order], lengths[order], names, codes[order], tx[order], (tx & arp)[order])
    return traffic, profile


def generate_capture(
    specs: Sequence[SyntheticDeviceSpec],
    archetypes: Mapping[int, CategoryArchetype],
    duration: float,
    seed: int,
    gateway: str = "02:00:00:00:00:fe",
    background_rate: float = 0.0,
) -> tuple[CaptureFile, dict[str, int]]:
    """Merge every device's traffic into one time-sorted capture.

    Returns the capture and the ground-truth ``MAC -> category id`` map.
    ``background_rate`` adds gateway chatter with an unlisted host
    (packets/minute) that stream separation should drop.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    if not specs:
        raise ValueError("need at least one device spec")
    gateway = normalize_mac(gateway)
    macs = {gateway: 0, BROADCAST: 1}
    parts = []
    for spec in specs:
        if spec.category_id not in archetypes:
            raise ValueError(f"device {spec.mac} refers to unknown category {spec.category_id}")
        if spec.mac in macs:
            raise ValueError(f"duplicate or reserved device MAC {spec.mac}")
        macs[spec.mac] = len(macs)
        traffic, _ = generate_device(spec, archetypes[spec.category_id], duration, seed)
        parts.append((spec.mac, traffic))
    if background_rate > 0:
        host = "02:00:00:00:00:fd"
        macs[host] = len(macs)
        rng = np.random.default_rng([seed, 0xBAC])
        ts = _arrivals(rng, np.full(int(np.ceil(duration / BIN_SECONDS)), background_rate), duration)
        parts.append((host, _DeviceTraffic(
            ts, _draw_lengths(rng, (LengthComponent(200.0, 50.0, 1.0),), len(ts)), ("TCP",),
            np.zeros(len(ts), dtype=np.int64), rng.random(len(ts)) < 0.5, np.zeros(len(ts), dtype=bool))))

    protocols: dict[str, int] = {}
    cols = {k: [] for k in ("t", "len", "proto", "src", "dst")}
    for mac, tr in parts:
        own = macs[mac]
        peer = np.where(tr.broadcast, macs[BROADCAST], macs[gateway])
        remap = np.array([protocols.setdefault(n, len(protocols)) for n in tr.proto_names], dtype=np.int32)
        cols["t"].append(tr.timestamps)
        cols["len"].append(tr.lengths)
        cols["proto"].append(remap[tr.proto_codes])
        cols["src"].append(np.where(tr.transmitted, own, peer).astype(np.int32))
        cols["dst"].append(np.where(tr.transmitted, peer, own).astype(np.int32))
    t = np.concatenate(cols["t"])
    order = np.argsort(t, kind="stable")
    table = PacketTable(
        timestamps=t[order],
        lengths=np.concatenate(cols["len"])[order],
        protocol_codes=np.concatenate(cols["proto"])[order],
        src_codes=np.concatenate(cols["src"])[order],
        dst_codes=np.concatenate(cols["dst"])[order],
        protocols=tuple(protocols),
        macs=tuple(macs),
    )
    return CaptureFile(None, table), {s.mac: s.category_id for s in specs}


def generate_scenario(scenario: Scenario, duration_days: float | None = None,
                      seed: int | None = None) -> tuple[CaptureFile, dict[str, int]]:
    days = scenario.duration_days if duration_days is None else duration_days
    return generate_capture(scenario.devices, scenario.archetypes, days * DAY_SECONDS,
                            scenario.seed if seed is None else seed, scenario.gateway,
                            scenario.background_rate)


# --------------------------------------------------------------------------- scenario files

def _mixture(text: str) -> tuple[LengthComponent, ...]:
    comps = []
    for item in text.split(","):
        mean, std, weight = (float(v) for v in item.strip().split(":"))
        comps.append(LengthComponent(mean, std, weight))
    return tuple(comps)


def _weights(text: str) -> dict[str, float]:
    out = {}
    for item in text.split(","):
        name, w = item.strip().rsplit(":", 1)
        out[name.strip()] = float(w)
    return out


_FLOAT_FIELDS = ("user_rate", "control_rate", "burstiness", "mean_idle_minutes",
                 "mean_active_minutes", "diurnal_amplitude", "tx_fraction")


def parse_scenario(text: str) -> Scenario:
    """Parse an INI-style scenario.

    Sections: ``[scenario]`` (duration_days, seed, gateway, background_rate),
    one ``[category <name>]`` per archetype and one ``[device <name>]`` per
    device.  Length mixtures are ``mean:std:weight`` lists, protocol mixes
    ``LABEL:weight`` lists.
    """
    cp = configparser.ConfigParser(delimiters=("=",), interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    archetypes: dict[int, CategoryArchetype] = {}
    devices = []
    for section in cp.sections():
        kind, _, name = section.partition(" ")
        sec = cp[section]
        if kind == "category":
            kw = {k: float(sec[k]) for k in _FLOAT_FIELDS if k in sec}
            for k in ("user_lengths", "control_lengths"):
                if k in sec:
                    kw[k] = _mixture(sec[k])
            for k in ("user_protocols", "control_protocols"):
                if k in sec:
                    kw[k] = _weights(sec[k])
            cid = int(sec["id"])
            archetypes[cid] = CategoryArchetype(name=name.strip(), category_id=cid, **kw)
        elif kind == "device":
            devices.append(SyntheticDeviceSpec(sec["mac"], int(sec["category"]), int(sec["seed"]),
                                               name.strip(), sec.get("split") or None))
        elif kind != "scenario":
            raise ValueError(f"unknown scenario section [{section}]")
    ids = sorted(archetypes)
    if ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"category ids must be contiguous from 1, got {ids}")
    head = cp["scenario"] if cp.has_section("scenario") else {}
    return Scenario(
        archetypes=archetypes,
        devices=tuple(devices),
        duration_days=float(head.get("duration_days", 19.0)),
        seed=int(head.get("seed", 0)),
        gateway=normalize_mac(head.get("gateway", "02:00:00:00:00:fe")),
        background_rate=float(head.get("background_rate", 0.0)),
    )


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def default_scenario() -> Scenario:
    """Four categories, fifteen devices, with a shipped train/test device split."""
    text = resources.files("flowclass").joinpath("data/default_scenario.ini").read_text()
    return parse_scenario(text)

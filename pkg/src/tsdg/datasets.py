"""Multi-domain time-series datasets: the sawtooth/square toy set and a portable file format.

File format
-----------
A dataset is a directory holding two files:

``manifest.json``
    ``{"name", "n_domains", "n_classes", "channels", "length",
    "domains": [{"id": int, "name": str, "count": int}, ...]}``
``samples.csv``
    one line per sample: ``domain_id,class_id,v_0,...,v_{C*T-1}`` with the
    series flattened channel-major and every value printed with 17
    significant digits, so reading back reproduces each float exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
SAMPLES = "samples.csv"


class DatasetFormatError(ValueError):
    """Malformed manifest or sample record."""


class DatasetIntegrityError(ValueError):
    """Manifest and samples disagree."""


@dataclass
class DomainDataset:
    """All samples of all domains. ``domains`` holds 1-based domain ids."""

    x: np.ndarray  # [N, channels, length]
    y: np.ndarray  # [N] class index
    domains: np.ndarray  # [N] domain id
    num_classes: int
    domain_names: dict[int, str] = field(default_factory=dict)
    name: str = "dataset"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.x.ndim != 3 or not (len(self.x) == len(self.y) == len(self.domains)):
            raise DatasetFormatError("x must be [N, channels, length] with matching y and domains")
        for d in self.domain_ids:
            self.domain_names.setdefault(d, str(d))

    @property
    def domain_ids(self) -> tuple[int, ...]:
        return tuple(int(d) for d in np.unique(self.domains))

    @property
    def channels(self) -> int:
        return self.x.shape[1]

    @property
    def length(self) -> int:
        return self.x.shape[2]

    def indices(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.domains == domain)

    def counts(self) -> dict[int, int]:
        return {d: int((self.domains == d).sum()) for d in self.domain_ids}

    def domain_id(self, name_or_id) -> int:
        """Resolve ``"D"`` or ``4`` or ``"4"`` to a domain id."""
        for d, n in self.domain_names.items():
            if n == str(name_or_id):
                return d
        try:
            d = int(name_or_id)
        except (TypeError, ValueError):
            raise KeyError(f"unknown domain {name_or_id!r}") from None
        if d not in self.domain_ids:
            raise KeyError(f"unknown domain {name_or_id!r}")
        return d

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.intp)
        names = {d: self.domain_names[d] for d in np.unique(self.domains[idx]).tolist()}
        return DomainDataset(self.x[idx], self.y[idx], self.domains[idx], self.num_classes, names, self.name)


# toy data ----------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDomain:
    name: str
    channel2_signal: bool
    noise_std: float
    count: int


@dataclass(frozen=True)
class ToySpec:
    length: int = 200
    min_cycles: float = 1.0 / 6.0
    max_cycles: float = 5.0
    domains: tuple[ToyDomain, ...] = (
        ToyDomain("A", False, 2.0, 400),
        ToyDomain("B", False, 4.0, 400),
        ToyDomain("C", True, 2.0, 400),
        ToyDomain("D", True, 4.0, 1200),
    )


SAWTOOTH, SQUARE = 0, 1
TOY_CLASSES = ("sawtooth", "square")


def sawtooth_wave(cycles, length: int) -> np.ndarray:
    """Linear ramp from -1 to 1 each cycle, phase 0. ``cycles`` may be an array."""
    t = np.arange(length) / length * np.asarray(cycles, dtype=np.float64)[..., None]
    return 2.0 * (t - np.floor(t)) - 1.0


def square_wave(cycles, length: int) -> np.ndarray:
    """Sign of a phase-0 sine with the given cycle count (+1 at zero crossings)."""
    t = np.arange(length) / length * np.asarray(cycles, dtype=np.float64)[..., None]
    return np.where(np.sin(2.0 * np.pi * t) >= 0.0, 1.0, -1.0)


def generate_toy(spec: ToySpec = ToySpec(), seed: int | np.random.Generator = 0) -> DomainDataset:
    """Two-channel binary sawtooth-vs-square data over the domains listed in ``spec``.

    Channel 1 carries the class waveform in every domain. Domains flagged
    ``channel2_signal`` also carry a square wave on channel 2 for the square
    class. Signal-bearing channels get N(0, noise_std^2) noise; signal-free
    channels get N(0, 1).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xs, ys, ds, names = [], [], [], {}
    for did, dom in enumerate(spec.domains, start=1):
        n = dom.count
        labels = np.array([SAWTOOTH] * (n // 2) + [SQUARE] * (n - n // 2))
        rng.shuffle(labels)
        cycles = rng.uniform(spec.min_cycles, spec.max_cycles, size=n)
        is_sq = labels == SQUARE
        ch1 = np.where(is_sq[:, None], square_wave(cycles, spec.length), sawtooth_wave(cycles, spec.length))
        ch2 = np.zeros_like(ch1)
        ch2_std = np.ones(n)
        if dom.channel2_signal:
            ch2[is_sq] = square_wave(cycles[is_sq], spec.length)
            ch2_std[is_sq] = dom.noise_std
        noise = rng.standard_normal((n, 2, spec.length))
        x = np.stack([ch1 + dom.noise_std * noise[:, 0], ch2 + ch2_std[:, None] * noise[:, 1]], axis=1)
        xs.append(x)
        ys.append(labels)
        ds.append(np.full(n, did))
        names[did] = dom.name
    return DomainDataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds), 2, names, "toy")


# file I/O ------------------------------------------------------------------------

def write_dataset(dataset: DomainDataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    counts = dataset.counts()
    manifest = {
        "name": dataset.name,
        "n_domains": len(counts),
        "n_classes": dataset.num_classes,
        "channels": dataset.channels,
        "length": dataset.length,
        "domains": [{"id": d, "name": dataset.domain_names[d], "count": c} for d, c in counts.items()],
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    flat = dataset.x.reshape(len(dataset.x), -1)
    with open(path / SAMPLES, "w") as fh:
        for d, y, row in zip(dataset.domains, dataset.y, flat):
            fh.write(f"{int(d)},{int(y)}," + ",".join(format(v, ".17g") for v in row) + "\n")


def _read_manifest(path: Path) -> dict:
    try:
        m = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path / MANIFEST}: {exc}") from None
    required = ("n_domains", "n_classes", "channels", "length", "domains")
    missing = [k for k in required if k not in m]
    if missing:
        raise DatasetFormatError(f"manifest missing keys {missing}")
    if int(m["n_domains"]) < 1 or not m["domains"]:
        raise DatasetFormatError("manifest declares 0 domains")
    if len(m["domains"]) != int(m["n_domains"]):
        raise DatasetFormatError(f"manifest lists {len(m['domains'])} domains but n_domains={m['n_domains']}")
    for k in ("n_classes", "channels", "length"):
        if int(m[k]) < 1:
            raise DatasetFormatError(f"manifest {k} must be >= 1")
    return m


def read_dataset(path: str | Path) -> DomainDataset:
    path = Path(path)
    m = _read_manifest(path)
    channels, length = int(m["channels"]), int(m["length"])
    width = 2 + channels * length
    declared = {int(d["id"]): int(d["count"]) for d in m["domains"]}
    xs, ys, ds = [], [], []
    with open(path / SAMPLES) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise DatasetFormatError(f"{SAMPLES} line {lineno}: expected {width} fields, found {len(parts)}")
            try:
                d, y = int(parts[0]), int(parts[1])
                vals = np.array([float(v) for v in parts[2:]])
            except ValueError as exc:
                raise DatasetFormatError(f"{SAMPLES} line {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise DatasetFormatError(f"{SAMPLES} line {lineno}: non-finite value")
            if d not in declared:
                raise DatasetFormatError(f"{SAMPLES} line {lineno}: domain {d} not in manifest")
            if not 0 <= y < int(m["n_classes"]):
                raise DatasetFormatError(f"{SAMPLES} line {lineno}: class {y} out of range")
            xs.append(vals.reshape(channels, length))
            ys.append(y)
            ds.append(d)
    expected = sum(declared.values())
    if len(xs) != expected:
        raise DatasetIntegrityError(f"manifest declares {expected} samples, found {len(xs)}")
    ds_arr = np.array(ds, dtype=np.int64)
    for d, c in declared.items():
        found = int((ds_arr == d).sum())
        if found != c:
            raise DatasetIntegrityError(f"domain {d}: manifest declares {c} samples, found {found}")
    names = {int(d["id"]): str(d.get("name", d["id"])) for d in m["domains"]}
    x = np.array(xs).reshape(len(xs), channels, length)
    return DomainDataset(x, np.array(ys), ds_arr, int(m["n_classes"]), names, m.get("name", path.name))

"""Run configuration: sectioned INI text, flag overrides, validation and a stable hash.

Example::

    [data]
    source = toy

    [run]
    target = D
    seeds = 0,1,2

    [method]
    similarity = metadata
    clusters = A,B;C
    lambda = 1.0
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .augment import PRESETS, AugmentationSpec
from .models import SPECS
from .regularizer import RegularizerConfig, RegularizerConfigError
from .similarity import MODES, ClusterAssignment
from .trainer import MethodConfig, TrainSchedule


class ConfigError(ValueError):
    pass


# section -> key -> default (as text, the way it would appear in a file)
DEFAULTS: dict[str, dict[str, str]] = {
    "data": {"source": "toy", "toy_seed": "0"},
    "run": {"target": "last", "seeds": "0", "out": "runs/default", "val_fraction": "0.2", "with_erm": "off"},
    "method": {
        "similarity": "learned",
        "lambda": "0.01",
        "xi": "0.1",
        "clusters": "",
        "distance": "sq_l2",
        "level": "domain",
        "representation": "logits",
    },
    "schedule": {
        "iterations": "3000",
        "lr": "0.001",
        "lr_drop_at": "",  # empty: 80% of iterations (2400 of 3000)
        "lr_drop_factor": "10",
        "batch_per_domain": "32",
        "weight_decay": "5e-05",
        "refresh_interval": "100",
        "stop_source_risk": "",
        "eval_every": "10",
    },
    "augment": {"enabled": "off", "preset": "bearings"},
    "model": {"backbone": "toy", "hidden_dim": ""},
    "report": {"ece_bins": "15", "reliability": "on", "bound_terms": "off", "checkpoints": "on"},
}

_BOOL = {"on": True, "off": False, "true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def parse_bool(text: str, key: str = "value") -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected on/off, got {text!r}") from None


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    return seeds


def parse_clusters(text: str) -> list[list[str]]:
    """``"A,B;C"`` -> ``[["A", "B"], ["C"]]``."""
    groups = [[n.strip() for n in g.split(",") if n.strip()] for g in text.split(";")]
    return [g for g in groups if g]


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings. ``values`` keeps the canonical text of every key."""

    values: dict[str, dict[str, str]]

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def as_dict(self) -> dict[str, dict[str, str]]:
        return {s: dict(kv) for s, kv in self.values.items()}

    @property
    def hash(self) -> str:
        """Hash of every setting except the output directory."""
        values = self.as_dict()
        values["run"].pop("out")
        blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # typed views

    @property
    def seeds(self) -> tuple[int, ...]:
        return parse_seeds(self.get("run", "seeds"))

    @property
    def target(self) -> str:
        return self.get("run", "target")

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    def schedule(self) -> TrainSchedule:
        s = self.values["schedule"]
        stop = s["stop_source_risk"].strip()
        iterations = int(s["iterations"])
        drop = s["lr_drop_at"].strip()
        return TrainSchedule(
            iterations=iterations,
            lr=float(s["lr"]),
            lr_drop_at=int(drop) if drop else int(round(0.8 * iterations)),
            lr_drop_factor=float(s["lr_drop_factor"]),
            batch_per_domain=int(s["batch_per_domain"]),
            weight_decay=float(s["weight_decay"]),
            refresh_interval=int(s["refresh_interval"]),
            stop_source_risk=float(stop) if stop else None,
            eval_every=int(s["eval_every"]),
        )

    def cluster_groups(self) -> list[list[str]]:
        return parse_clusters(self.get("method", "clusters"))

    def method(self, resolve_domain=lambda name: name) -> MethodConfig:
        """Build the method; ``resolve_domain`` maps cluster-map names to domain ids."""
        m = self.values["method"]
        clusters = None
        if m["similarity"] == "metadata":
            clusters = ClusterAssignment.from_groups(
                [[resolve_domain(n) for n in g] for g in self.cluster_groups()]
            )
        return MethodConfig(
            similarity=m["similarity"],
            lam=float(m["lambda"]),
            xi=float(m["xi"]),
            clusters=clusters,
            distance=m["distance"],
            level=m["level"],
            representation=m["representation"],
        )

    def augmentation(self) -> AugmentationSpec | None:
        if not parse_bool(self.get("augment", "enabled"), "augment.enabled"):
            return None
        return PRESETS[self.get("augment", "preset")]()

    def report_flag(self, key: str) -> bool:
        return parse_bool(self.get("report", key), f"report.{key}")


def _read_file(path: str | Path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values, then overrides (``{section: {key: text}}``) and validate."""
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for layer in (file_values or {}, overrides or {}):
        for section, kv in layer.items():
            if section not in values:
                raise ConfigError(f"unknown section [{section}]; valid sections: {', '.join(DEFAULTS)}")
            for key, val in kv.items():
                if key not in values[section]:
                    valid = ", ".join(values[section])
                    raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {valid}")
                values[section][key] = str(val).strip()
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    return resolve(_read_file(path) if path is not None else None, overrides)


def validate(cfg: RunConfig) -> None:
    m = cfg.values["method"]
    if m["similarity"] not in MODES:
        raise ConfigError(f"method.similarity must be one of {MODES}, got {m['similarity']!r}")
    try:
        lam, xi = float(m["lambda"]), float(m["xi"])
    except ValueError as exc:
        raise ConfigError(f"method: {exc}") from None
    if lam < 0:
        raise ConfigError("method.lambda must be >= 0")
    if m["similarity"] == "learned" and not xi > 0:
        raise ConfigError("learned similarity requires xi > 0")
    if m["similarity"] == "metadata" and not cfg.cluster_groups():
        raise ConfigError("metadata similarity requires a cluster map (method.clusters, e.g. 'A,B;C')")
    try:
        RegularizerConfig(m["distance"], m["level"], m["representation"], lam)
    except RegularizerConfigError as exc:
        raise ConfigError(str(exc)) from None
    parse_seeds(cfg.get("run", "seeds"))
    try:
        cfg.schedule()
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    parse_bool(cfg.get("augment", "enabled"), "augment.enabled")
    if cfg.get("augment", "preset") not in PRESETS:
        raise ConfigError(f"augment.preset must be one of {sorted(PRESETS)}")
    if cfg.get("model", "backbone") not in SPECS:
        raise ConfigError(f"model.backbone must be one of {sorted(SPECS)}")
    if cfg.get("model", "hidden_dim"):
        if cfg.get("model", "backbone") not in ("toy", "hhar"):
            raise ConfigError("model.hidden_dim only applies to the toy and hhar backbones")
        try:
            if int(cfg.get("model", "hidden_dim")) < 1:
                raise ValueError
        except ValueError:
            raise ConfigError("model.hidden_dim must be a positive integer") from None
    parse_bool(cfg.get("run", "with_erm"), "run.with_erm")
    for key in ("reliability", "bound_terms", "checkpoints"):
        cfg.report_flag(key)
    if int(cfg.get("report", "ece_bins")) < 1:
        raise ConfigError("report.ece_bins must be >= 1")
    if not 0.0 < float(cfg.get("run", "val_fraction")) < 1.0:
        raise ConfigError("run.val_fraction must lie in (0, 1)")


def write_config(cfg: RunConfig, path: str | Path) -> None:
    """Echo the resolved config as INI, headed by its hash."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(cfg.values)
    with open(path, "w") as fh:
        fh.write(f"# config_hash: {cfg.hash}\n")
        cp.write(fh)

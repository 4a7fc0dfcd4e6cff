"""Domain-wise time-series augmentation: mean shift, scaling and masking.

Series are arrays of shape ``[channels, length]`` or batches
``[batch, channels, length]``; statistics are always per sample, per channel,
taken over time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("mean_shift", "scale", "mask")


@dataclass(frozen=True)
class Dist:
    """A scalar distribution: ``constant`` (uses ``a``) or ``uniform`` on [a, b]."""

    kind: str = "constant"
    a: float = 0.0
    b: float = 0.0

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return float(self.a)
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Dist":
        """Parse ``0.5`` or ``uniform(0.8,1.2)``."""
        text = text.strip()
        if text.startswith("uniform(") and text.endswith(")"):
            a, b = (float(v) for v in text[len("uniform(") : -1].split(","))
            return cls("uniform", a, b)
        return cls("constant", float(text))

    def __str__(self) -> str:
        return f"uniform({self.a!r},{self.b!r})" if self.kind == "uniform" else repr(float(self.a))


@dataclass(frozen=True)
class AugmentationSpec:
    """Which augmentations are enabled and how their parameters are drawn.

    ``*_source`` fields are either ``"sample"`` (per-series statistics) or
    ``"constant"`` (use the matching ``*_value``).
    """

    kinds: tuple[str, ...] = ()
    shift_mu_source: str = "sample"
    shift_mu_value: float = 0.0
    shift_mu_new: Dist = field(default_factory=Dist)
    scale_mu_source: str = "sample"
    scale_mu_value: float = 0.0
    scale_sigma_source: str = "sample"
    scale_sigma_value: float = 1.0
    scale_sigma_new: Dist = field(default_factory=lambda: Dist("constant", 1.0))
    mask_mu_source: str = "sample"
    mask_mu_value: float = 0.0
    mask_prob: float = 0.1
    apply_prob: float = 0.5
    chain_prob: float = 0.0
    max_chain: int = 3

    def __post_init__(self):
        for name in ("mask_prob", "apply_prob", "chain_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown augmentation kinds {sorted(unknown)}; valid: {list(KINDS)}")
        if self.max_chain < 1:
            raise ValueError("max_chain must be >= 1")
        for name in ("shift_mu_source", "scale_mu_source", "scale_sigma_source", "mask_mu_source"):
            if getattr(self, name) not in ("sample", "constant"):
                raise ValueError(f"{name} must be 'sample' or 'constant'")

    @property
    def enabled(self) -> bool:
        return bool(self.kinds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        d["shift_mu_new"] = str(self.shift_mu_new)
        d["scale_sigma_new"] = str(self.scale_sigma_new)
        return d


def bearings_preset() -> AugmentationSpec:
    return AugmentationSpec(
        kinds=KINDS,
        shift_mu_new=Dist("constant", 0.0),
        scale_sigma_new=Dist("constant", 1.0),
        chain_prob=0.5,
    )


def hhar_preset() -> AugmentationSpec:
    return AugmentationSpec(
        kinds=("scale",),
        scale_mu_source="constant",
        scale_mu_value=0.0,
        scale_sigma_source="constant",
        scale_sigma_value=1.0,
        scale_sigma_new=Dist("uniform", 0.8, 1.2),
    )


PRESETS = {"none": AugmentationSpec, "bearings": bearings_preset, "hhar": hhar_preset, "mimic": hhar_preset}


def _stat(x: np.ndarray, source: str, value: float, fn) -> np.ndarray:
    if source == "sample":
        return fn(x, axis=-1, keepdims=True)
    return np.full(x.shape[:-1] + (1,), float(value))


def mean_shift(x, mu, mu_new) -> np.ndarray:
    """``x - mu + mu_new`` per channel."""
    x = np.asarray(x, dtype=np.float64)
    return x - np.asarray(mu, dtype=np.float64) + np.asarray(mu_new, dtype=np.float64)


def scale(x, mu, sigma, sigma_new) -> np.ndarray:
    """``(x - mu) / sigma * sigma_new + mu`` per channel.

    Raises if any sigma is not positive; :func:`scale_safe` skips those channels.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("scale: sigma must be > 0 for every channel")
    mu = np.asarray(mu, dtype=np.float64)
    return (x - mu) / sigma * sigma_new + mu


def scale_safe(x, mu, sigma, sigma_new) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), x.shape[:-1] + (1,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), x.shape[:-1] + (1,))
    ok = sigma > 0
    safe = np.where(ok, sigma, 1.0)
    return np.where(ok, (x - mu) / safe * sigma_new + mu, x)


def mask(x, mu, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each time step (all channels at once) by ``mu`` with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {p}")
    x = np.asarray(x, dtype=np.float64)
    hit = rng.random(x.shape[:-2] + (1, x.shape[-1])) < p
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), x.shape[:-1] + (1,))
    return np.where(hit, mu, x)


@dataclass(frozen=True)
class Augmentation:
    """A composed augmentation; ``steps`` is empty for the identity."""

    steps: tuple[tuple[str, float], ...]
    spec: AugmentationSpec

    @property
    def is_identity(self) -> bool:
        return not self.steps

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = self.spec
        for kind, value in self.steps:
            if kind == "mean_shift":
                mu = _stat(x, s.shift_mu_source, s.shift_mu_value, np.mean)
                x = mean_shift(x, mu, value)
            elif kind == "scale":
                mu = _stat(x, s.scale_mu_source, s.scale_mu_value, np.mean)
                sigma = _stat(x, s.scale_sigma_source, s.scale_sigma_value, np.std)
                x = scale_safe(x, mu, sigma, value)
            else:
                mu = _stat(x, s.mask_mu_source, s.mask_mu_value, np.mean)
                x = mask(x, mu, s.mask_prob, rng)
        return x


def sample_domain_augmentation(
    spec: AugmentationSpec, domain: int, iteration: int, rng: np.random.Generator
) -> Augmentation:
    """Draw the augmentation one domain's batch receives at one iteration.

    With probability ``apply_prob`` a first kind is drawn uniformly; further
    kinds (with replacement) are chained while a ``chain_prob`` coin succeeds,
    up to ``max_chain`` in total. Per-draw parameters (e.g. a uniform
    ``sigma_new``) are drawn here so the whole batch shares them.
    ``domain`` and ``iteration`` only label the draw; all randomness comes
    from ``rng``.
    """
    if not spec.kinds or rng.random() >= spec.apply_prob:
        return Augmentation((), spec)
    steps = []
    while True:
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        if kind == "mean_shift":
            value = spec.shift_mu_new.draw(rng)
        elif kind == "scale":
            value = spec.scale_sigma_new.draw(rng)
        else:
            value = spec.mask_prob
        steps.append((kind, value))
        if len(steps) >= spec.max_chain or rng.random() >= spec.chain_prob:
            break
    return Augmentation(tuple(steps), spec)


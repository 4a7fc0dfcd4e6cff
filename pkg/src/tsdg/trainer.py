"""Training loop with selective consistency regularization, and the leave-one-domain-out harness."""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import metrics
from .augment import AugmentationSpec, sample_domain_augmentation
from .datasets import DomainDataset
from .divergence import bound_terms
from .models import Model, build, spec_by_name
from .regularizer import (
    RegularizerConfig,
    cluster_references,
    neighbor_references,
    omega,
    omega_meta,
    omega_sample_level,
)
from .similarity import (
    MODES,
    ClusterAssignment,
    WeightMatrix,
    compute_centroids,
    learned_weights,
    metadata_weights,
    nearest_neighbor_domains,
    refresh_schedule,
    uniform_all_weights,
)

log = logging.getLogger(__name__)

STREAM_NAMES = ("init", "batching", "augmentation", "toy", "hp", "divergence", "split")


def streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(k,)))
        for k, name in enumerate(STREAM_NAMES)
    }


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 3000
    lr: float = 1e-3
    lr_drop_at: int = 2400
    lr_drop_factor: float = 10.0
    batch_per_domain: int = 32
    weight_decay: float = 5e-5
    refresh_interval: int = 100
    # optional early stop once mean source validation risk falls below this
    stop_source_risk: float | None = None
    eval_every: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.lr_drop_at <= self.iterations:
            raise ValueError("lr_drop_at must lie in [0, iterations]")
        if self.batch_per_domain < 1:
            raise ValueError("batch_per_domain must be >= 1")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")

    def lr_at(self, iteration: int) -> float:
        return self.lr / self.lr_drop_factor if iteration >= self.lr_drop_at else self.lr


@dataclass(frozen=True)
class MethodConfig:
    """Similarity mode plus regularizer settings. ``lam == 0`` is plain ERM."""

    similarity: str = "learned"
    lam: float = 0.01
    xi: float = 0.1
    clusters: ClusterAssignment | None = None
    distance: str = "sq_l2"
    level: str = "domain"
    representation: str = "logits"

    def __post_init__(self):
        if self.similarity not in MODES:
            raise ValueError(f"similarity must be one of {MODES}, got {self.similarity!r}")
        if self.similarity == "learned" and self.xi <= 0:
            raise ValueError("learned similarity requires xi > 0")
        self.regularizer  # validates the distance/level/representation combination

    @property
    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.distance, self.level, self.representation, self.lam)

    @property
    def active(self) -> bool:
        return self.similarity != "none" and self.lam > 0


ERM = MethodConfig(similarity="none", lam=0.0)


# data splits -----------------------------------------------------------------

class ExperimentData:
    """Source train/validation splits plus a held-out target behind an audit counter.

    Training code only touches ``source_train`` / ``source_val``; every call
    to :meth:`target` increments ``target_reads``.
    """

    def __init__(self, dataset: DomainDataset, target: int, rng: np.random.Generator, val_fraction: float = 0.2):
        if len(dataset.domain_ids) < 2:
            raise ValueError("need at least two domains")
        self.dataset_name = dataset.name
        self.num_classes = dataset.num_classes
        self.channels = dataset.channels
        self.length = dataset.length
        self.target_id = target
        self.domain_names = dict(dataset.domain_names)
        self.sources = tuple(d for d in dataset.domain_ids if d != target)
        if target not in dataset.domain_ids:
            raise ValueError(f"target domain {target} not in dataset")
        self.source_train: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.source_val: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.source_all: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for d in self.sources:
            idx = dataset.indices(d)
            tr, va = stratified_split(dataset.y[idx], val_fraction, rng)
            self.source_train[d] = (dataset.x[idx[tr]], dataset.y[idx[tr]])
            self.source_val[d] = (dataset.x[idx[va]], dataset.y[idx[va]])
            self.source_all[d] = (dataset.x[idx], dataset.y[idx])
            if len(tr) == 0:
                raise ValueError(f"source domain {d} has no training samples")
        tidx = dataset.indices(target)
        self._target = (dataset.x[tidx], dataset.y[tidx])
        self.target_reads = 0

    def target(self) -> tuple[np.ndarray, np.ndarray]:
        self.target_reads += 1
        return self._target

    def name(self, d: int) -> str:
        return self.domain_names.get(d, str(d))


def stratified_split(labels, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; returns sorted (train, val) positions."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        pos = np.flatnonzero(labels == c)
        pos = pos[rng.permutation(len(pos))]
        n_val = int(round(val_fraction * len(pos)))
        if n_val >= len(pos):
            n_val = len(pos) - 1
        val.extend(pos[:n_val])
        train.extend(pos[n_val:])
    return np.sort(np.array(train, dtype=np.intp)), np.sort(np.array(val, dtype=np.intp))


def sample_batches(
    source_train: Mapping[int, tuple[np.ndarray, np.ndarray]], batch_per_domain: int, rng: np.random.Generator
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Uniform sampling with replacement of ``batch_per_domain`` samples per domain."""
    out = {}
    for d in sorted(source_train):
        x, y = source_train[d]
        if len(x) == 0:
            raise ValueError(f"source domain {d} is empty")
        idx = rng.integers(0, len(x), size=batch_per_domain)
        out[d] = (x[idx], y[idx])
    return out


def sample_hyperparameters(rng: np.random.Generator) -> tuple[float, float]:
    """lambda = 10^U(-3,-1), xi = 10^U(-2,2)."""
    lam = 10.0 ** rng.uniform(-3.0, -1.0)
    xi = 10.0 ** rng.uniform(-2.0, 2.0)
    return float(lam), float(xi)


# training ----------------------------------------------------------------------

@dataclass
class LossRecord:
    iteration: int
    lr: float
    ce: float
    omega: float
    lam_omega: float
    total: float
    batch_per_domain: int = 0
    weight_decay: float = 0.0


@dataclass
class RefreshRecord:
    iteration: int
    nn: dict[int, int | None]
    weights: list[list[float]]


@dataclass
class TrainResult:
    model: Model
    losses: list[LossRecord] = field(default_factory=list)
    refreshes: list[RefreshRecord] = field(default_factory=list)
    stopped_at: int | None = None
    schedule: TrainSchedule | None = None
    source_val_accuracy: float = float("nan")

    @property
    def iterations_run(self) -> int:
        return len(self.losses)


def _static_weights(method: MethodConfig, domains) -> WeightMatrix:
    if method.similarity == "metadata":
        if method.clusters is None:
            raise ValueError("metadata similarity requires a cluster assignment")
        missing = set(domains) - set(method.clusters.domains)
        if missing:
            raise ValueError(f"cluster map does not cover source domains {sorted(missing)}")
        sub = ClusterAssignment({d: method.clusters.clusters[d] for d in domains})
        return metadata_weights(sub)
    if method.similarity == "uniform_all":
        return uniform_all_weights(domains)
    return WeightMatrix.zeros(domains, method.similarity)


def _assignment(method: MethodConfig, domains) -> ClusterAssignment | None:
    if method.similarity == "metadata":
        return ClusterAssignment({d: method.clusters.clusters[d] for d in domains})
    if method.similarity == "uniform_all":
        return ClusterAssignment.single(domains)
    return None


def _representation(z, g, kind: str):
    if kind == "features":
        return z
    if kind == "logits":
        return g
    return ad.softmax(g)


def _omega_value(method, table, weights, nn, assignment, rep, labels, doms):
    cfg = method.regularizer
    if cfg.level == "sample":
        if method.similarity == "learned":
            ref = neighbor_references(table, nn, weights)
        else:
            ref = cluster_references(table, assignment)
        return omega_sample_level(rep, labels, doms, ref, cfg.distance)
    if cfg.distance != "sq_l2" and assignment is not None:
        return omega_meta(table, assignment, cfg.distance)
    return omega(table, weights, cfg.distance)


def mean_source_accuracy(model: Model, split: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> float:
    accs = [metrics.accuracy(model.predict_proba(x), y) for x, y in split.values() if len(x)]
    return float(np.mean(accs)) if accs else float("nan")


def _final_refresh(model, data, schedule, method, weights, nn, rngs) -> RefreshRecord:
    batches = sample_batches(data.source_train, schedule.batch_per_domain, rngs["batching"])
    with ad.no_grad():
        parts = {}
        for d, (x, y) in batches.items():
            z, g = model.forward(x, train=False)
            parts[d] = (_representation(z, g, method.representation), y)
        table = compute_centroids(parts, data.num_classes, method.representation)
    ad.current_graph().clear()
    if method.similarity == "learned":
        nn = nearest_neighbor_domains(table)
        weights = learned_weights(table, nn, method.xi)
    return RefreshRecord(schedule.iterations, dict(nn), weights.values.tolist())


def train(
    model: Model,
    data: ExperimentData,
    schedule: TrainSchedule,
    method: MethodConfig,
    augmentation: AugmentationSpec | None = None,
    seed: int = 0,
    rngs: dict[str, np.random.Generator] | None = None,
) -> TrainResult:
    """Run the regularized training loop on the source domains of ``data``.

    Per iteration: sample per-domain batches, augment each domain's batch,
    refresh similarity weights every ``refresh_interval`` iterations (learned
    mode), take one Adam step on ``CE + lam * Omega``. Returns the model in
    eval mode with per-iteration loss and per-refresh weight records.
    """
    rngs = rngs or streams(seed)
    params = model.parameters()
    domains = data.sources
    L = data.num_classes
    weights = _static_weights(method, domains)
    assignment = _assignment(method, domains)
    nn: dict[int, int | None] = {}
    cfg = method.regularizer
    result = TrainResult(model, schedule=schedule)
    augmentation = augmentation if augmentation is not None and augmentation.enabled else None

    for it in range(schedule.iterations):
        lr = schedule.lr_at(it)
        batches = sample_batches(data.source_train, schedule.batch_per_domain, rngs["batching"])
        xs, ys, ds = [], [], []
        for d, (x, y) in batches.items():
            if augmentation is not None:
                fn = sample_domain_augmentation(augmentation, d, it, rngs["augmentation"])
                x = fn(x, rngs["augmentation"])
            xs.append(x)
            ys.append(y)
            ds.append(np.full(len(y), d))
        x_all, y_all, d_all = np.concatenate(xs), np.concatenate(ys), np.concatenate(ds)
        z, g = model.forward(x_all, train=True)
        ce = ad.softmax_cross_entropy(g, ad.one_hot(y_all, L))

        omega_val = 0.0
        loss = ce
        if method.similarity != "none":
            track = method.active
            with contextlib.nullcontext() if track else ad.no_grad():
                rep = _representation(z, g, cfg.representation)
                parts = {d: (ad.take_rows(rep, np.flatnonzero(d_all == d)), y_all[d_all == d]) for d in domains}
                table = compute_centroids(parts, L, cfg.representation)
                if refresh_schedule(it, schedule.refresh_interval):
                    if method.similarity == "learned":
                        nn = nearest_neighbor_domains(table)
                        weights = learned_weights(table, nn, method.xi)
                    result.refreshes.append(RefreshRecord(it, dict(nn), weights.values.tolist()))
                om = _omega_value(method, table, weights, nn, assignment, rep, y_all, d_all)
            omega_val = float(om.data)
            if track:
                loss = ce + om * method.lam

        ce_val, total = float(ce.data), float(loss.data)
        if not (math.isfinite(total) and math.isfinite(omega_val)):
            ad.current_graph().clear()
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}: ce={ce_val}, omega={omega_val}, total={total}"
            )
        per_domain = len(y_all) // len(batches)
        result.losses.append(
            LossRecord(it, lr, ce_val, omega_val, method.lam * omega_val, total, per_domain, schedule.weight_decay)
        )
        ad.backward(loss)
        ad.adam_step(params, lr, weight_decay=schedule.weight_decay)

        if schedule.stop_source_risk is not None and (it + 1) % schedule.eval_every == 0:
            if 1.0 - mean_source_accuracy(model, data.source_val) < schedule.stop_source_risk:
                result.stopped_at = it
                log.debug("source risk below %.3f at iteration %d", schedule.stop_source_risk, it)
                break
    else:
        if method.similarity != "none" and refresh_schedule(schedule.iterations, schedule.refresh_interval):
            # closing snapshot at iteration I; recorded only, no update
            result.refreshes.append(_final_refresh(model, data, schedule, method, weights, nn, rngs))

    result.source_val_accuracy = mean_source_accuracy(model, data.source_val)
    return result


# experiment harness -------------------------------------------------------------

BackboneFactory = Callable[[ExperimentData], object]


def default_backbone(name: str = "toy", **kwargs) -> BackboneFactory:
    """Backbone spec factory adapted to the dataset's channels, length and classes."""

    def make(data: ExperimentData):
        return spec_by_name(
            name, length=data.length, in_channels=data.channels, num_classes=data.num_classes, **kwargs
        )

    return make


@dataclass
class RunOutcome:
    target: int
    seed: int
    method: str
    config: MethodConfig
    result: TrainResult
    accuracy: float
    ece: float
    auc: float | None
    wall_time_s: float
    data: ExperimentData

    def row(self, target_name: str) -> dict:
        return {
            "target": target_name,
            "seed": self.seed,
            "method": self.method,
            "lambda": self.config.lam,
            "xi": self.config.xi,
            "similarity_mode": self.config.similarity,
            "accuracy": self.accuracy,
            "ece": self.ece,
            "auc": self.auc,
            "source_val_accuracy": self.result.source_val_accuracy,
            "iterations": self.result.iterations_run,
            "wall_time_s": self.wall_time_s,
        }


def run_one(
    dataset: DomainDataset,
    target: int,
    seed: int,
    method: MethodConfig,
    schedule: TrainSchedule = TrainSchedule(),
    augmentation: AugmentationSpec | None = None,
    backbone: BackboneFactory | None = None,
    method_name: str = "method",
    val_fraction: float = 0.2,
    n_bins: int = 15,
) -> RunOutcome:
    """Train on all domains except ``target`` and evaluate on the target."""
    t0 = time.perf_counter()
    rngs = streams(seed)
    data = ExperimentData(dataset, target, rngs["split"], val_fraction)
    backbone = backbone or default_backbone("toy")
    model = build(backbone(data), rngs["init"])
    result = train(model, data, schedule, method, augmentation, rngs=rngs)
    tx, ty = data.target()
    probs = model.predict_proba(tx)
    auc_val = None
    if data.num_classes == 2 and len(np.unique(ty)) == 2:
        auc_val = metrics.auc(probs[:, 1], ty)
    return RunOutcome(
        target, seed, method_name, method, result,
        metrics.accuracy(probs, ty), metrics.ece(probs, ty, n_bins), auc_val,
        time.perf_counter() - t0, data,
    )


def leave_one_domain_out(
    dataset: DomainDataset,
    methods: Mapping[str, MethodConfig],
    seeds,
    schedule: TrainSchedule = TrainSchedule(),
    augmentation: AugmentationSpec | None = None,
    backbone: BackboneFactory | None = None,
    targets=None,
) -> list[RunOutcome]:
    """Every (target, seed, method) combination, sorted by (target, seed, method order)."""
    targets = dataset.domain_ids if targets is None else tuple(targets)
    out = []
    for target in targets:
        for seed in seeds:
            for name, method in methods.items():
                try:
                    out.append(run_one(dataset, target, seed, method, schedule, augmentation, backbone, name))
                except Exception as exc:
                    raise RuntimeError(f"run failed for target={target}, seed={seed}, method={name}: {exc}") from exc
    return out


def run_bound_terms(outcome: RunOutcome, rng: np.random.Generator | None = None, div_samples: int = 400):
    """Bound terms for a finished run.

    Target samples are permuted once; the first ``div_samples`` feed the
    divergence estimates and the rest give the target risk (all of them if
    the target is too small to split).
    """
    data = outcome.data
    rng = rng if rng is not None else streams(outcome.seed)["divergence"]
    tx, ty = data.target()
    perm = rng.permutation(len(tx))
    k = min(div_samples, len(tx) // 2)
    div_idx, risk_idx = perm[:k], perm[k:]
    if len(risk_idx) == 0:
        risk_idx = perm
    source_eval = {
        data.name(d): (data.source_all[d][0], data.source_val[d][0], data.source_val[d][1]) for d in data.sources
    }
    return bound_terms(
        outcome.result.model, source_eval, data.name(data.target_id),
        tx[div_idx], tx[risk_idx], ty[risk_idx], rng,
    )

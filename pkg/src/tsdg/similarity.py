"""Class-conditional domain centroids and the regularization weight schemes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REPRESENTATIONS = ("features", "logits", "soft_labels")
MODES = ("none", "metadata", "learned", "uniform_all")


@dataclass
class CentroidTable:
    """Per-domain ``[L, dim]`` centroid tensors plus per-class sample counts.

    Rows with a zero count are absent and are never compared.
    """

    representation: str
    domains: tuple[int, ...]
    means: dict[int, Tensor]
    counts: dict[int, np.ndarray]

    @property
    def num_classes(self) -> int:
        return len(next(iter(self.counts.values())))

    @property
    def dim(self) -> int:
        return next(iter(self.means.values())).shape[1]

    def present(self, domain: int) -> np.ndarray:
        return self.counts[domain] > 0

    def shared(self, i: int, j: int) -> np.ndarray:
        return self.present(i) & self.present(j)

    def array(self, domain: int) -> np.ndarray:
        return self.means[domain].data

    @classmethod
    def from_arrays(cls, arrays: Mapping[int, np.ndarray], counts: Mapping[int, np.ndarray] | None = None,
                    representation: str = "logits", requires_grad: bool = False) -> "CentroidTable":
        """Wrap precomputed centroid arrays (handy for tests and analysis)."""
        domains = tuple(sorted(arrays))
        means = {d: Tensor(np.asarray(arrays[d], dtype=np.float64), requires_grad=requires_grad) for d in domains}
        if counts is None:
            counts = {d: np.ones(len(arrays[d]), dtype=np.int64) for d in domains}
        return cls(representation, domains, means, {d: np.asarray(counts[d]) for d in domains})


def compute_centroids(
    batch_per_domain: Mapping[int, tuple[Tensor, np.ndarray]],
    num_classes: int,
    representation: str = "logits",
) -> CentroidTable:
    """Group-by-mean of each domain's representations by class label.

    The mean is taken as a constant averaging matrix times the representation
    tensor, so gradients flow back into every contributing sample.
    """
    if representation not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {representation!r}")
    means, counts = {}, {}
    dims = set()
    for d in sorted(batch_per_domain):
        reps, labels = batch_per_domain[d]
        reps = ad.as_tensor(reps)
        labels = np.asarray(labels, dtype=np.intp)
        dims.add(reps.shape[1])
        onehot = ad.one_hot(labels, num_classes).T  # [L, n]
        n = onehot.sum(axis=1)
        avg = onehot / np.where(n > 0, n, 1.0)[:, None]
        means[d] = ad.matmul(Tensor(avg), reps)
        counts[d] = n.astype(np.int64)
    if len(dims) > 1:
        raise ValueError(f"inconsistent representation dims {sorted(dims)}")
    return CentroidTable(representation, tuple(sorted(batch_per_domain)), means, counts)


@dataclass(frozen=True)
class ClusterAssignment:
    """Map from domain id to cluster id (any hashable labels, compared by equality)."""

    clusters: Mapping[int, int]

    def __post_init__(self):
        if not self.clusters:
            raise ValueError("cluster assignment is empty")

    @property
    def domains(self) -> tuple[int, ...]:
        return tuple(sorted(self.clusters))

    @property
    def k(self) -> int:
        return len(set(self.clusters.values()))

    def members(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {}
        for d in self.domains:
            out.setdefault(self.clusters[d], []).append(d)
        return {c: tuple(v) for c, v in out.items()}

    @classmethod
    def from_groups(cls, groups) -> "ClusterAssignment":
        """``[[1, 2], [3]]`` -> domains 1, 2 in cluster 1 and domain 3 in cluster 2."""
        clusters = {}
        for c, group in enumerate(groups, start=1):
            for d in group:
                if d in clusters:
                    raise ValueError(f"domain {d} assigned twice")
                clusters[int(d)] = c
        return cls(clusters)

    @classmethod
    def single(cls, domains) -> "ClusterAssignment":
        return cls({int(d): 1 for d in domains})


@dataclass(frozen=True)
class WeightMatrix:
    domains: tuple[int, ...]
    values: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown similarity mode {self.mode!r}")
        if self.values.shape != (len(self.domains), len(self.domains)):
            raise ValueError("weight matrix shape does not match domain list")
        if np.any(self.values < 0):
            raise ValueError("weights must be nonnegative")

    def w(self, i: int, j: int) -> float:
        return float(self.values[self.domains.index(i), self.domains.index(j)])

    def pairs(self):
        """Yield ``(i, j, w)`` for every nonzero off-diagonal weight."""
        for a, i in enumerate(self.domains):
            for b, j in enumerate(self.domains):
                if a != b and self.values[a, b] > 0:
                    yield i, j, float(self.values[a, b])

    @classmethod
    def zeros(cls, domains, mode: str = "none") -> "WeightMatrix":
        domains = tuple(domains)
        return cls(domains, np.zeros((len(domains), len(domains))), mode)


def metadata_weights(assignment: ClusterAssignment, mode: str = "metadata") -> WeightMatrix:
    """``w(i, j) = 1 / (2 |S_c|)`` when i and j share cluster c, else 0."""
    domains = assignment.domains
    members = assignment.members()
    values = np.zeros((len(domains), len(domains)))
    for a, i in enumerate(domains):
        for b, j in enumerate(domains):
            c = assignment.clusters[i]
            if assignment.clusters[j] == c:
                values[a, b] = 1.0 / (2 * len(members[c]))
    return WeightMatrix(domains, values, mode)


def uniform_all_weights(domains) -> WeightMatrix:
    """Align every pair of domains: metadata weights with a single cluster."""
    return metadata_weights(ClusterAssignment.single(domains), mode="uniform_all")


def _sq_dists(centroids: CentroidTable, i: int, j: int) -> np.ndarray:
    diff = centroids.array(i) - centroids.array(j)
    return (diff * diff).sum(axis=1)


def nearest_neighbor_domains(centroids: CentroidTable) -> dict[int, int | None]:
    """Per domain, the other domain that is closest for the most classes.

    Distances are squared L2 between class centroids. Per-class argmins and
    the final vote both break ties toward the lowest domain id. Domains with
    no comparable class map to ``None``.
    """
    domains = centroids.domains
    out: dict[int, int | None] = {}
    for i in domains:
        votes = {j: 0 for j in domains if j != i}
        for cls in np.flatnonzero(centroids.present(i)):
            best, best_d = None, np.inf
            for j in domains:
                if j == i or not centroids.present(j)[cls]:
                    continue
                diff = centroids.array(i)[cls] - centroids.array(j)[cls]
                dist = float(diff @ diff)
                if dist < best_d:
                    best, best_d = j, dist
            if best is not None:
                votes[best] += 1
        top = max(votes.values(), default=0)
        out[i] = min(j for j, v in votes.items() if v == top) if top > 0 else None
    return out


def learned_weights(centroids: CentroidTable, nn: Mapping[int, int | None], xi: float) -> WeightMatrix:
    """RBF similarity to the nearest neighbor, averaged over shared classes.

    Computed from centroid values only, so no gradient flows through it.
    """
    if xi <= 0:
        raise ValueError(f"xi must be > 0, got {xi}")
    domains = centroids.domains
    values = np.zeros((len(domains), len(domains)))
    for a, i in enumerate(domains):
        j = nn.get(i)
        if j is None:
            continue
        shared = centroids.shared(i, j)
        if not shared.any():
            continue
        d2 = _sq_dists(centroids, i, j)[shared]
        values[a, domains.index(j)] = float(np.mean(np.exp(-d2 / (2.0 * xi * xi))))
    return WeightMatrix(domains, values, "learned")


def refresh_schedule(iteration: int, interval: int) -> bool:
    if interval < 1:
        raise ValueError("refresh interval must be >= 1")
    return iteration % interval == 0

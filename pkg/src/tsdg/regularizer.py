"""Cross-domain consistency penalty on class-conditional centroids.

Two equivalent domain-level forms are provided: the pairwise weighted sum
(:func:`omega`) and the cluster-centroid form (:func:`omega_meta`). For
squared L2 they agree exactly under metadata weights; the cluster form is
what cosine and KL use under metadata similarity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .similarity import REPRESENTATIONS, CentroidTable, ClusterAssignment, WeightMatrix

DISTANCES = ("sq_l2", "cosine", "kl")
LEVELS = ("domain", "sample")
_NORM_FLOOR = 1e-12
_PROB_FLOOR = 1e-12


class RegularizerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizerConfig:
    distance: str = "sq_l2"
    level: str = "domain"
    representation: str = "logits"
    lam: float = 0.0

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise RegularizerConfigError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.level not in LEVELS:
            raise RegularizerConfigError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.representation not in REPRESENTATIONS:
            raise RegularizerConfigError(
                f"representation must be one of {REPRESENTATIONS}, got {self.representation!r}"
            )
        if self.distance == "kl" and self.representation != "soft_labels":
            raise RegularizerConfigError("kl distance is only defined on soft_labels")
        if self.lam < 0:
            raise RegularizerConfigError(f"lambda must be >= 0, got {self.lam}")


def row_distance(a, b, kind: str) -> Tensor:
    """Distance between matching rows of ``a`` and ``b`` (both ``[k, dim]``) -> ``[k]``.

    ``b`` is the reference side for the asymmetric KL.
    """
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if kind == "sq_l2":
        diff = a - b
        return (diff * diff).sum(axis=1)
    if kind == "cosine":
        na2 = (a * a).sum(axis=1)
        nb2 = (b * b).sum(axis=1)
        floor2 = _NORM_FLOOR * _NORM_FLOOR
        ok = ((na2.data >= floor2) & (nb2.data >= floor2)).astype(np.float64)
        denom = ad.sqrt(ad.clip_min(na2, floor2)) * ad.sqrt(ad.clip_min(nb2, floor2))
        cos = (a * b).sum(axis=1) / denom
        return (1.0 - cos) * ok
    if kind == "kl":
        pa = ad.clip_min(a, _PROB_FLOOR)
        pb = ad.clip_min(b, _PROB_FLOOR)
        return (pa * (ad.log(pa) - ad.log(pb))).sum(axis=1)
    raise RegularizerConfigError(f"unknown distance {kind!r}")


def _check_kind(centroids: CentroidTable, distance: str) -> None:
    if distance == "kl" and centroids.representation != "soft_labels":
        raise RegularizerConfigError("kl distance is only defined on soft_labels")


def omega(centroids: CentroidTable, weights: WeightMatrix, distance: str = "sq_l2") -> Tensor:
    """Weighted sum over domain pairs of per-class centroid distances.

    Classes absent from either domain of a pair are skipped. The weights are
    plain numbers, so the gradient reaches both centroids but never ``w``.
    """
    _check_kind(centroids, distance)
    total: Tensor | None = None
    for i, j, w in weights.pairs():
        shared = np.flatnonzero(centroids.shared(i, j))
        if shared.size == 0:
            continue
        ci = ad.take_rows(centroids.means[i], shared)
        cj = ad.take_rows(centroids.means[j], shared)
        term = row_distance(ci, cj, distance).sum() * w
        total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


def omega_meta(centroids: CentroidTable, assignment: ClusterAssignment, distance: str = "sq_l2") -> Tensor:
    """Distance of each domain centroid to its cluster centroid, summed.

    The cluster centroid of class l averages the domains of the cluster where
    l is present (set P); the class term is scaled by |P| / |S_c| so that,
    for squared L2, the value equals :func:`omega` under metadata weights even
    when some cells are missing. With every cell present the scale is 1.
    """
    _check_kind(centroids, distance)
    total: Tensor | None = None
    for members in assignment.members().values():
        if len(members) < 2:
            continue
        masks = {d: centroids.present(d).astype(np.float64) for d in members}
        n_present = sum(masks.values())
        if not np.any(n_present > 1):
            continue
        gamma = None
        for d in members:
            part = centroids.means[d] * masks[d][:, None]
            gamma = part if gamma is None else gamma + part
        gamma = gamma / np.where(n_present > 0, n_present, 1.0)[:, None]
        scale = n_present / len(members)
        for d in members:
            term = (row_distance(centroids.means[d], gamma, distance) * (masks[d] * scale)).sum()
            total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


@dataclass(frozen=True)
class SampleReference:
    """Detached per-domain reference centroids for the sample-level penalty."""

    centroids: Mapping[int, np.ndarray]  # domain -> [L, dim]
    present: Mapping[int, np.ndarray]  # domain -> bool[L]
    weight: Mapping[int, float]  # domain -> multiplier (0 disables)


def cluster_references(centroids: CentroidTable, assignment: ClusterAssignment) -> SampleReference:
    """Each domain's reference is its cluster centroid; singleton clusters are disabled."""
    refs, present, weight = {}, {}, {}
    for members in assignment.members().values():
        masks = np.array([centroids.present(d) for d in members], dtype=np.float64)
        n = masks.sum(axis=0)
        stacked = np.array([centroids.array(d) for d in members])
        gamma = (stacked * masks[:, :, None]).sum(axis=0) / np.where(n > 0, n, 1.0)[:, None]
        for d in members:
            refs[d] = gamma
            present[d] = n > 0
            weight[d] = 1.0 if len(members) > 1 else 0.0
    return SampleReference(refs, present, weight)


def neighbor_references(
    centroids: CentroidTable, nn: Mapping[int, int | None], weights: WeightMatrix
) -> SampleReference:
    """Each domain's reference is its nearest neighbor's centroid, weighted by w(d, nn(d))."""
    refs, present, weight = {}, {}, {}
    for d in centroids.domains:
        j = nn.get(d)
        if j is None:
            refs[d] = np.zeros_like(centroids.array(d))
            present[d] = np.zeros(centroids.num_classes, dtype=bool)
            weight[d] = 0.0
        else:
            refs[d] = centroids.array(j).copy()
            present[d] = centroids.present(j)
            weight[d] = weights.w(d, j)
    return SampleReference(refs, present, weight)


def omega_sample_level(reps, labels, domains, reference: SampleReference, distance: str = "sq_l2") -> Tensor:
    """Mean over all samples of weight(d_n) * dist(rep_n, reference[d_n][y_n]).

    Samples whose reference cell is absent or whose domain weight is 0
    contribute 0 but still count in the mean.
    """
    reps = ad.as_tensor(reps)
    labels = np.asarray(labels, dtype=np.intp)
    domains = np.asarray(domains)
    n = len(labels)
    if n == 0:
        return Tensor(0.0)
    target = np.zeros(reps.shape)
    coef = np.zeros(n)
    for k in range(n):
        d, y = int(domains[k]), int(labels[k])
        if d in reference.centroids and reference.present[d][y]:
            target[k] = reference.centroids[d][y]
            coef[k] = reference.weight[d]
    return (row_distance(reps, Tensor(target), distance) * coef).sum() / float(n)

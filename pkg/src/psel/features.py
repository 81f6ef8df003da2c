"""Hand-crafted instance features for baseline selection models.

The vector layout is fixed and documented by FEATURE_NAMES_TSP /
FEATURE_NAMES_CVRP; CVRP appends demand statistics. Statistics use the
population convention (ddof=0).
"""

from __future__ import annotations

import csv

import numpy as np

from .instances import DomainError, RoutingInstance, pairwise_distances

FEATURE_NAMES_TSP = [
    "dist_std",
    "centroid_x",
    "centroid_y",
    "radius",
    "distinct_dist_fraction",
    "nnd_variance",
    "nnd_cov",
    "cluster_node_ratio",
    "outlier_node_ratio",
    "mean_cluster_radius",
    "scale",
]
FEATURE_NAMES_CVRP = FEATURE_NAMES_TSP + ["demand_mean", "demand_std"]


def feature_names(kind: str) -> list[str]:
    return FEATURE_NAMES_CVRP if kind == "CVRP" else FEATURE_NAMES_TSP


def density_clusters(coords: np.ndarray, eps: float, min_pts: int = 4):
    """Plain DBSCAN over the full distance matrix.

    Returns (labels, n_clusters); label -1 marks outliers. Neighborhoods
    include the point itself, the classic counting convention.
    """
    n = coords.shape[0]
    dm = pairwise_distances(coords)
    neighbors = dm <= eps
    core = neighbors.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.intp)
    cluster = 0
    for start in range(n):
        if labels[start] != -1 or not core[start]:
            continue
        stack = [start]
        labels[start] = cluster
        while stack:
            p = stack.pop()
            if not core[p]:
                continue
            for q in np.flatnonzero(neighbors[p]):
                if labels[q] == -1:
                    labels[q] = cluster
                    stack.append(int(q))
        cluster += 1
    return labels, cluster


def manual_features(instance: RoutingInstance) -> np.ndarray:
    coords = instance.coords
    n = coords.shape[0]
    if n < 2:
        raise DomainError("manual features require at least 2 nodes")
    dm = pairwise_distances(coords)
    iu = np.triu_indices(n, k=1)
    pd = dm[iu]

    centroid = coords.mean(axis=0)
    radius = float(np.hypot(*(coords - centroid).T).max())
    distinct = len(np.unique(np.round(pd, 6)))
    frac_distinct = distinct / len(pd)

    nn = np.where(np.eye(n, dtype=bool), np.inf, dm).min(axis=1)
    mean_nn = float(nn.mean())
    if mean_nn > 0:
        nnd = nn / mean_nn
        nnd_var = float(nnd.var())
        nnd_cov = float(nnd.std() / nnd.mean())
    else:
        nnd_var = 0.0
        nnd_cov = 0.0

    labels, n_clusters = density_clusters(coords, eps=2.0 * mean_nn)
    outliers = int((labels == -1).sum())
    radii = []
    for c in range(n_clusters):
        pts = coords[labels == c]
        radii.append(float(np.hypot(*(pts - pts.mean(axis=0)).T).max()))
    mean_cluster_radius = float(np.mean(radii)) if radii else 0.0

    vec = [
        float(pd.std()),
        float(centroid[0]),
        float(centroid[1]),
        radius,
        frac_distinct,
        nnd_var,
        nnd_cov,
        n_clusters / n,
        outliers / n,
        mean_cluster_radius,
        float(n),
    ]
    if instance.kind == "CVRP":
        cust = instance.demands[1:]
        vec.append(float(cust.mean()))
        vec.append(float(cust.std()))
    return np.array(vec)


def export_features_csv(dataset: list, path: str) -> None:
    if not dataset:
        raise DomainError("cannot export features for an empty dataset")
    names = feature_names(dataset[0].kind)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id"] + names)
        for it in dataset:
            vec = manual_features(it)
            w.writerow([it.id] + [repr(float(x)) for x in vec])

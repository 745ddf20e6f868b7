"""Region tokenization by grid binning, plus the kNN region graph with heat-kernel weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch


@dataclass
class RegionSet:
    features: torch.Tensor  # (M, d) float64, mean of member projected patches
    masses: np.ndarray  # (M,) float64 patch counts, all >= 1
    centroids: np.ndarray  # (M, 2) float64, mean of original member coords
    assignment: np.ndarray  # (N,) int64 patch -> region
    grid_side: int

    @property
    def n_regions(self) -> int:
        return int(self.masses.shape[0])


@dataclass
class RegionGraph:
    neighbors: np.ndarray  # (M, k) int64, self excluded
    weights: np.ndarray | None  # (M, k) float64, rows sum to 1
    tau: float | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.neighbors.shape[0])

    @property
    def k(self) -> int:
        return int(self.neighbors.shape[1])

    def undirected_edges(self) -> set[tuple[int, int]]:
        edges = set()
        for m in range(self.n_nodes):
            for n in self.neighbors[m]:
                edges.add((min(m, int(n)), max(m, int(n))))
        return edges


def _normalize_coords(coords: np.ndarray) -> np.ndarray:
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = hi - lo
    out = np.empty_like(coords, dtype=np.float64)
    for axis in range(coords.shape[1]):
        if span[axis] > 0:
            out[:, axis] = (coords[:, axis] - lo[axis]) / span[axis]
        else:
            out[:, axis] = 0.5
    return out


def tokenize_regions(projected: torch.Tensor, coords: np.ndarray, target_m: int) -> RegionSet:
    """Bin patches into at most target_m grid regions and average their features.

    Binning happens in per-axis min-max normalized coordinates; centroids are
    reported in the original units. Empty cells are dropped, so the actual
    region count M can be below target_m. Members of a cell are reduced in a
    canonical order (cell, coords, features) so the result is exactly invariant
    to patch permutations.
    """
    n = coords.shape[0]
    if n < 1 or target_m < 1:
        raise ValueError("need N >= 1 and target_m >= 1")
    if projected.shape[0] != n:
        raise ValueError("projected and coords row counts differ")
    coords = np.asarray(coords, dtype=np.float64)
    g = math.ceil(math.sqrt(target_m))
    uv = _normalize_coords(coords)
    ix = np.clip(np.floor(uv[:, 0] * g).astype(np.int64), 0, g - 1)
    iy = np.clip(np.floor(uv[:, 1] * g).astype(np.int64), 0, g - 1)
    cell = iy * g + ix

    feat_np = projected.detach().numpy()
    order = np.lexsort(
        tuple(feat_np[:, j] for j in range(feat_np.shape[1] - 1, -1, -1))
        + (coords[:, 1], coords[:, 0], cell)
    )
    cell_sorted = cell[order]
    region_ids, region_of_sorted, counts = np.unique(
        cell_sorted, return_inverse=True, return_counts=True
    )
    m = region_ids.shape[0]

    idx_t = torch.from_numpy(region_of_sorted)
    feat_sum = torch.zeros((m, projected.shape[1]), dtype=projected.dtype)
    feat_sum = feat_sum.index_add(0, idx_t, projected[torch.from_numpy(order)])
    features = feat_sum / torch.from_numpy(counts.astype(np.float64)).unsqueeze(1)

    cent_sum = np.zeros((m, 2), dtype=np.float64)
    np.add.at(cent_sum, region_of_sorted, coords[order])
    centroids = cent_sum / counts[:, None]

    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = region_of_sorted
    return RegionSet(
        features=features,
        masses=counts.astype(np.float64),
        centroids=centroids,
        assignment=assignment,
        grid_side=g,
    )


def build_region_graph(centroids: np.ndarray, k_nn: int) -> RegionGraph:
    """kNN topology over centroids; ties broken toward the lower index; weights unfilled."""
    centroids = np.asarray(centroids, dtype=np.float64)
    m = centroids.shape[0]
    if m < 1:
        raise ValueError("need at least one centroid")
    k = min(k_nn, m - 1)
    if k <= 0:
        return RegionGraph(neighbors=np.zeros((m, 0), dtype=np.int64), weights=None)
    d2 = ((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return RegionGraph(neighbors=order[:, :k].astype(np.int64), weights=None)


def heat_kernel_weights(
    graph: RegionGraph, centroids: np.ndarray, tau_mode: str | float = "median"
) -> RegionGraph:
    """Fill edge weights exp(-||c_m - c_n||^2 / tau), row-normalized.

    tau_mode "median" resolves tau as the median squared neighbor distance over
    all edges of the slide; a zero-distance graph falls back to tau=1 (uniform
    weights). A float tau_mode is used directly.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    if graph.n_nodes != centroids.shape[0]:
        raise ValueError("graph and centroid counts differ")
    if graph.k == 0:
        return replace(graph, weights=np.zeros((graph.n_nodes, 0)), tau=1.0)
    diffs = centroids[:, None, :] - centroids[graph.neighbors]
    d2 = (diffs**2).sum(axis=2)
    if isinstance(tau_mode, str):
        if tau_mode != "median":
            raise ValueError(f"unknown tau_mode {tau_mode!r}")
        tau = float(np.median(d2))
        if tau <= 0:
            tau = 1.0
    else:
        tau = float(tau_mode)
        if tau <= 0:
            raise ValueError("tau must be positive")
    raw = np.exp(-d2 / tau)
    weights = raw / raw.sum(axis=1, keepdims=True)
    return replace(graph, weights=weights, tau=tau)


def regions_to_csv_rows(regions: RegionSet) -> list[tuple]:
    return [
        (m, float(regions.centroids[m, 0]), float(regions.centroids[m, 1]), float(regions.masses[m]))
        for m in range(regions.n_regions)
    ]


def graph_to_csv_rows(graph: RegionGraph) -> list[tuple]:
    rows = []
    for m in range(graph.n_nodes):
        for j in range(graph.k):
            rows.append((m, int(graph.neighbors[m, j]), float(graph.weights[m, j])))
    return rows

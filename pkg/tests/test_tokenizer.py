import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from roam.tokenizer import (
    build_region_graph,
    heat_kernel_weights,
    tokenize_regions,
)


def rand_inputs(n=50, d=6, seed=0):
    rng = np.random.default_rng(seed)
    projected = torch.from_numpy(rng.normal(size=(n, d)))
    coords = rng.uniform(size=(n, 2))
    return projected, coords


class TestTokenize:
    def test_single_cell(self):
        projected = torch.from_numpy(np.arange(16, dtype=np.float64).reshape(4, 4))
        coords = np.array([[0.1, 0.1], [0.11, 0.1], [0.1, 0.11], [0.105, 0.105]])
        # All four fall in one cell of a 1x1 grid.
        regions = tokenize_regions(projected, coords, target_m=1)
        assert regions.n_regions == 1
        assert regions.masses.tolist() == [4.0]
        np.testing.assert_allclose(regions.features.numpy()[0], projected.mean(0).numpy())
        np.testing.assert_allclose(regions.centroids[0], coords.mean(0))

    def test_mass_conservation_three_cells(self):
        rng = np.random.default_rng(1)
        n = 60
        centers = np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]])
        coords = centers[rng.integers(0, 3, n)]
        projected = torch.from_numpy(rng.normal(size=(n, 4)))
        regions = tokenize_regions(projected, coords, target_m=256)
        assert regions.n_regions == 3
        assert regions.masses.sum() == n

    def test_default_target_on_big_slide(self):
        projected, coords = rand_inputs(n=4096, d=8, seed=2)
        regions = tokenize_regions(projected, coords, target_m=256)
        assert regions.n_regions <= 256
        assert regions.masses.sum() == 4096

    def test_region_count_bound(self):
        projected, coords = rand_inputs(n=30, seed=3)
        for target in (1, 4, 9, 100):
            regions = tokenize_regions(projected, coords, target)
            g = math.ceil(math.sqrt(target))
            assert regions.n_regions <= min(30, g * g)

    def test_permutation_invariance_exact(self):
        projected, coords = rand_inputs(n=80, seed=4)
        base = tokenize_regions(projected, coords, 16)
        perm = np.random.default_rng(5).permutation(80)
        shuffled = tokenize_regions(projected[torch.from_numpy(perm)], coords[perm], 16)
        np.testing.assert_array_equal(base.features.numpy(), shuffled.features.numpy())
        np.testing.assert_array_equal(base.masses, shuffled.masses)
        np.testing.assert_array_equal(base.centroids, shuffled.centroids)

    def test_constant_axis_maps_to_center(self):
        projected = torch.zeros((3, 2), dtype=torch.float64)
        coords = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
        regions = tokenize_regions(projected, coords, target_m=4)
        # x collapses to 0.5, so regions separate along y only
        assert regions.n_regions == 2
        assert regions.masses.sum() == 3

    def test_centroid_inside_member_bbox(self):
        projected, coords = rand_inputs(n=200, seed=6)
        regions = tokenize_regions(projected, coords, 25)
        for m in range(regions.n_regions):
            member = coords[regions.assignment == m]
            assert (regions.centroids[m] >= member.min(0) - 1e-12).all()
            assert (regions.centroids[m] <= member.max(0) + 1e-12).all()


class TestRegionGraph:
    def test_collinear_tie_break(self):
        centroids = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        graph = build_region_graph(centroids, k_nn=1)
        assert graph.neighbors[1, 0] == 0  # tie between 0 and 2 goes to lower index

    def test_k_clamped(self):
        graph = build_region_graph(np.array([[0.0, 0.0], [1.0, 1.0]]), k_nn=8)
        assert graph.neighbors.tolist() == [[1], [0]]

    def test_single_node_empty(self):
        graph = build_region_graph(np.array([[0.3, 0.3]]), k_nn=8)
        assert graph.k == 0

    def test_against_bruteforce(self):
        rng = np.random.default_rng(7)
        centroids = rng.uniform(size=(10, 2))
        graph = build_region_graph(centroids, k_nn=3)
        for m in range(10):
            dist = [(np.sum((centroids[m] - centroids[j]) ** 2), j) for j in range(10) if j != m]
            expected = [j for _, j in sorted(dist)][:3]
            assert graph.neighbors[m].tolist() == expected


class TestHeatKernelWeights:
    def test_equidistant_neighbors(self):
        centroids = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        graph = heat_kernel_weights(build_region_graph(centroids, 2), centroids)
        np.testing.assert_allclose(graph.weights[0], [0.5, 0.5], atol=1e-15)

    def test_closed_form_two_neighbors(self):
        tau = 0.7
        centroids = np.array([[0.0, 0.0], [math.sqrt(tau), 0.0], [0.0, math.sqrt(2 * tau)]])
        graph = heat_kernel_weights(build_region_graph(centroids, 2), centroids, tau_mode=tau)
        # squared distances (tau, 2*tau) -> weights e^-1, e^-2 normalized
        expected = np.array([math.exp(-1), math.exp(-2)])
        expected /= expected.sum()
        np.testing.assert_allclose(graph.weights[0], expected, atol=1e-12)
        np.testing.assert_allclose(expected, [0.7310585786300049, 0.2689414213699951], atol=1e-12)

    def test_identical_centroids_uniform_fallback(self):
        centroids = np.zeros((4, 2))
        graph = heat_kernel_weights(build_region_graph(centroids, 3), centroids)
        assert graph.tau == 1.0
        np.testing.assert_allclose(graph.weights, np.full((4, 3), 1.0 / 3), atol=1e-15)

    def test_rejects_bad_tau(self):
        centroids = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            heat_kernel_weights(build_region_graph(centroids, 1), centroids, tau_mode=-1.0)

    @settings(max_examples=20, deadline=None)
    @given(m=st.integers(2, 30), k=st.integers(1, 8), seed=st.integers(0, 10**6))
    def test_rows_stochastic(self, m, k, seed):
        centroids = np.random.default_rng(seed).uniform(size=(m, 2))
        graph = heat_kernel_weights(build_region_graph(centroids, k), centroids)
        assert graph.neighbors.shape[1] == min(k, m - 1)
        np.testing.assert_allclose(graph.weights.sum(axis=1), 1.0, atol=1e-12)
        assert (graph.weights >= 0).all()

#!/usr/bin/env python3
"""
Tests for bin partitions, similarity volumes, attention masks and relative depth.
"""

import sys
import unittest

import numpy as np
import torch

from arde import (LENGTH_FLOOR, AttentionMaskSet, BinHead, BinPartition, all_allow_masks, bin_centers,
                  compute_similarity, generate_masks, normalize_lengths, relative_depth,
                  uniform_partition)


def prefix_sum_centers(lengths):
    centers = []
    running = 0.0
    for length in lengths:
        centers.append(running + length / 2.0)
        running += length
    return np.array(centers)


class TestBinPartition(unittest.TestCase):

    def test_centers_match_prefix_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            n = int(rng.integers(1, 129))
            lengths = rng.random(n) + 1e-3
            lengths = lengths / lengths.sum()
            centers = bin_centers(torch.from_numpy(lengths)).numpy()
            np.testing.assert_allclose(centers, prefix_sum_centers(lengths), rtol=0, atol=1e-12)

    def test_normalized_lengths_are_a_partition(self):
        raw = torch.tensor([[-1000.0, 0.0, 3.0, 50.0]], dtype=torch.float64)
        lengths = normalize_lengths(raw)
        self.assertTrue((lengths > 0).all())
        self.assertAlmostEqual(float(lengths.sum()), 1.0, places=12)
        floored_total = float(torch.nn.functional.softplus(raw).clamp_min(LENGTH_FLOOR).sum())
        self.assertGreaterEqual(float(lengths[0, 0]) * floored_total, LENGTH_FLOOR * 0.999)

    def test_single_bin_center_is_half(self):
        lengths = normalize_lengths(torch.tensor([[2.0]], dtype=torch.float64))
        self.assertEqual(float(bin_centers(lengths)[0, 0]), 0.5)

    def test_uniform_partition(self):
        partition = uniform_partition(2, 4)
        np.testing.assert_allclose(partition.centers[0].numpy(), [0.125, 0.375, 0.625, 0.875])

    def test_bin_head_shapes_and_finiteness(self):
        torch.manual_seed(0)
        head = BinHead(8)
        partition, features = head(torch.randn(3, 5, 8))
        self.assertEqual(tuple(partition.lengths.shape), (3, 5))
        self.assertEqual(tuple(features.shape), (3, 5, 8))
        torch.testing.assert_close(partition.lengths.sum(dim=1), torch.ones(3))
        with self.assertRaises(ValueError):
            head(torch.full((1, 5, 8), float("nan")))


class TestSimilarityAndDepth(unittest.TestCase):

    def test_similarity_is_dot_product(self):
        torch.manual_seed(1)
        E = torch.randn(2, 3, 4, dtype=torch.float64)
        F = torch.randn(2, 4, 5, 6, dtype=torch.float64)
        P = compute_similarity(E, F)
        self.assertEqual(tuple(P.shape), (2, 3, 5, 6))
        self.assertAlmostEqual(float(P[1, 2, 3, 4]), float(E[1, 2] @ F[1, :, 3, 4]), places=12)

    def test_similarity_width_mismatch(self):
        with self.assertRaises(ValueError):
            compute_similarity(torch.randn(1, 2, 3), torch.randn(1, 4, 2, 2))

    def test_relative_depth_is_convex_combination(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(1, 17))
            lengths = normalize_lengths(torch.from_numpy(rng.normal(size=(2, n))))
            partition = BinPartition(lengths, bin_centers(lengths))
            P = torch.from_numpy(rng.normal(scale=5.0, size=(2, n, 3, 4)))
            R = relative_depth(partition, P)
            lo = partition.centers.min(dim=1).values[:, None, None]
            hi = partition.centers.max(dim=1).values[:, None, None]
            self.assertTrue(((R >= lo - 1e-12) & (R <= hi + 1e-12)).all())
            self.assertTrue(((R > 0) & (R < 1)).all())

    def test_single_bin_relative_depth(self):
        partition = uniform_partition(1, 1)
        R = relative_depth(partition, torch.randn(1, 1, 4, 4, dtype=torch.float64))
        self.assertTrue(torch.equal(R, torch.full((1, 4, 4), 0.5, dtype=torch.float64)))


class TestMasks(unittest.TestCase):

    def test_zero_similarity_allows_everything(self):
        P = torch.zeros(2, 3, 8, 8)
        for size in ((8, 8), (4, 4), (16, 16)):
            masks = generate_masks(P, size, num_heads=2)
            self.assertEqual(tuple(masks.allow.shape), (2, 3, 2) + size)
            self.assertTrue(masks.allow.all())

    def test_empty_query_falls_back_to_all_allow(self):
        P = torch.full((1, 2, 4, 4), -5.0)
        P[0, 1, :, :2] = 5.0
        masks = generate_masks(P, (4, 4), num_heads=3)
        self.assertTrue(masks.allow[0, 0].all())
        self.assertTrue(masks.allow[0, 1, :, :, :2].all())
        self.assertFalse(masks.allow[0, 1, :, :, 2:].any())

    def test_masks_do_not_track_gradients(self):
        P = torch.randn(1, 2, 4, 4, requires_grad=True)
        self.assertFalse(generate_masks(P, (2, 2), 1).allow.requires_grad)

    def test_blocked_layout_is_batch_major(self):
        allow = torch.ones(2, 3, 4, 2, 2, dtype=torch.bool)
        allow[1, 2, 3, 0, 1] = False
        blocked = AttentionMaskSet(allow).blocked_for_attention()
        self.assertEqual(tuple(blocked.shape), (8, 3, 4))
        self.assertEqual(int(blocked.sum()), 1)
        self.assertTrue(blocked[1 * 4 + 3, 2, 0 * 2 + 1])

    def test_all_allow_masks(self):
        masks = all_allow_masks(2, 5, 4, (3, 2))
        self.assertEqual(masks.resolution, (3, 2))
        self.assertTrue(masks.allow.all())


def run_tests():
    """Run the test suite."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestBinPartition, TestSimilarityAndDepth, TestMasks):
        suite.addTests(loader.loadTestsFromTestCase(case))
    result = unittest.TextTestRunner(verbosity=2).run(suite)
    return 0 if result.wasSuccessful() else 1


if __name__ == '__main__':
    print("Running ARDE Tests...")
    print("=" * 50)

    exit_code = run_tests()

    print("=" * 50)
    if exit_code == 0:
        print("✅ All tests passed!")
    else:
        print("❌ Some tests failed!")

    sys.exit(exit_code)

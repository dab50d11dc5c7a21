#!/usr/bin/env python3
"""
Tests for depth, error and similarity renderings.
"""

import sys
import unittest

import numpy as np

from depth_types import DepthKind, DepthMap
from visualize import colorize_depth, colorize_error, similarity_grid


class TestColorize(unittest.TestCase):

    def test_depth_rendering(self):
        values = np.linspace(1.0, 5.0, 12).reshape(3, 4)
        valid = np.ones((3, 4), dtype=bool)
        valid[0, 0] = False
        rgb = colorize_depth(DepthMap(values, valid))
        self.assertEqual(rgb.shape, (3, 4, 3))
        self.assertEqual(rgb.dtype, np.float32)
        self.assertTrue(np.all(rgb[0, 0] == 0))
        self.assertTrue((rgb >= 0).all() and (rgb <= 1).all())
        self.assertFalse(np.array_equal(rgb[0, 1], rgb[2, 3]))

    def test_fixed_range_and_constant_maps(self):
        depth = DepthMap.dense(np.full((2, 2), 3.0))
        flat = colorize_depth(depth)
        self.assertTrue(np.all(flat == flat[0, 0]))
        ranged = colorize_depth(depth, vmin=0.0, vmax=6.0)
        self.assertFalse(np.array_equal(flat[0, 0], ranged[0, 0]))
        relative = DepthMap.dense(np.full((2, 2), 0.5), DepthKind.RELATIVE)
        self.assertEqual(colorize_depth(relative).shape, (2, 2, 3))

    def test_nothing_valid_is_black(self):
        depth = DepthMap(np.ones((2, 3)), np.zeros((2, 3), dtype=bool))
        self.assertTrue(np.all(colorize_depth(depth) == 0))

    def test_error_is_centered(self):
        gt = DepthMap.dense(np.full((1, 3), 4.0))
        pred = DepthMap.dense(np.array([[3.0, 4.0, 5.0]]))
        rgb = colorize_error(pred, gt)
        # under-prediction is blue, over-prediction red
        self.assertGreater(rgb[0, 0, 2], rgb[0, 0, 0])
        self.assertGreater(rgb[0, 2, 0], rgb[0, 2, 2])
        with self.assertRaises(ValueError):
            colorize_error(pred, DepthMap.dense(np.ones((2, 2))))


class TestSimilarityGrid(unittest.TestCase):

    def test_grid_layout(self):
        probs = np.random.default_rng(0).random((5, 4, 6))
        grid = similarity_grid(probs)
        # 5 maps -> 3 columns, 2 rows, 1 px padding
        self.assertEqual(grid.shape, (2 * 5 - 1, 3 * 7 - 1, 3))
        self.assertTrue(np.all(grid[4, :] == 1.0))
        self.assertTrue(np.all(grid[5:, 14:] == 1.0))

    def test_explicit_columns(self):
        grid = similarity_grid(np.zeros((4, 2, 2)), columns=4, pad=0)
        self.assertEqual(grid.shape, (2, 8, 3))
        self.assertTrue(np.all(grid == grid[0, 0]))

    def test_bad_shape(self):
        with self.assertRaises(ValueError):
            similarity_grid(np.zeros((2, 2)))


def run_tests():
    """Run the test suite."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestColorize, TestSimilarityGrid):
        suite.addTests(loader.loadTestsFromTestCase(case))
    result = unittest.TextTestRunner(verbosity=2).run(suite)
    return 0 if result.wasSuccessful() else 1


if __name__ == '__main__':
    print("Running Visualization Tests...")
    print("=" * 50)

    exit_code = run_tests()

    print("=" * 50)
    if exit_code == 0:
        print("✅ All tests passed!")
    else:
        print("❌ Some tests failed!")

    sys.exit(exit_code)

#!/usr/bin/env python3
"""
Tests for depth value types, PNG codecs, validity policies and projection.
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from depth_types import (KITTI_POLICY, NYU_POLICY, POLICIES, CameraIntrinsics, DepthKind, DepthMap, ValidityPolicy,
                         apply_validity, clip_to_png_range, default_intrinsics, load_depth_png, load_rgb_png,
                         project_point_cloud, save_depth_png, save_rgb_png, write_ply)
from errors import DepthIOError, InvalidDepthError


class TestDepthMap(unittest.TestCase):

    def test_rejects_non_positive_valid_pixels(self):
        with self.assertRaises(InvalidDepthError):
            DepthMap(np.array([[1.0, 0.0]]), np.array([[True, True]]))
        with self.assertRaises(InvalidDepthError):
            DepthMap(np.array([[1.0, np.nan]]), np.array([[True, True]]))

    def test_invalid_pixels_may_hold_anything(self):
        depth = DepthMap(np.array([[1.0, 0.0, -3.0]]), np.array([[True, False, False]]))
        self.assertEqual(depth.n_valid, 1)

    def test_relative_must_stay_below_one(self):
        with self.assertRaises(InvalidDepthError):
            DepthMap.dense(np.array([[0.5, 1.0]]), DepthKind.RELATIVE)
        DepthMap.dense(np.array([[0.5, 0.999]]), DepthKind.RELATIVE)

    def test_shape_checks(self):
        with self.assertRaises(InvalidDepthError):
            DepthMap(np.ones(4), np.ones(4, dtype=bool))
        with self.assertRaises(InvalidDepthError):
            DepthMap(np.ones((2, 2)), np.ones((2, 3), dtype=bool))

    def test_arrays_are_frozen_copies(self):
        values = np.ones((2, 2))
        depth = DepthMap.dense(values)
        values[0, 0] = 5.0
        self.assertEqual(depth.values[0, 0], 1.0)
        with self.assertRaises(ValueError):
            depth.values[0, 0] = 2.0


class TestDepthPng(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_exact_on_quantized_values(self):
        rng = np.random.default_rng(0)
        raw = rng.integers(1, 65535, size=(6, 7))
        valid = rng.random((6, 7)) < 0.8
        depth = DepthMap(raw / 256.0, valid)
        path = self.dir / "depth.png"

        save_depth_png(depth, path, 256.0)
        loaded = load_depth_png(path, 256.0)

        np.testing.assert_array_equal(loaded.valid, valid)
        np.testing.assert_array_equal(loaded.values[valid], depth.values[valid])

    def test_values_within_quantization(self):
        depth = DepthMap.dense(np.array([[1.2345, 7.0001], [0.01, 42.4242]]))
        path = self.dir / "depth.png"
        save_depth_png(depth, path, 256.0)
        loaded = load_depth_png(path, 256.0)
        self.assertLessEqual(np.abs(loaded.values - depth.values).max(), 0.5 / 256.0)

    def test_overflow_is_rejected(self):
        depth = DepthMap.dense(np.array([[300.0]]))
        with self.assertRaises(InvalidDepthError):
            save_depth_png(depth, self.dir / "big.png", 256.0)

    def test_tiny_depth_would_become_missing(self):
        depth = DepthMap.dense(np.array([[0.001]]))
        with self.assertRaises(InvalidDepthError):
            save_depth_png(depth, self.dir / "tiny.png", 256.0)

    def test_clip_to_png_range(self):
        values = np.array([[300.0, 0.001, 5.0], [np.nan, 255.99, 1.0]])
        valid = np.array([[True, True, True], [False, True, True]])
        clipped, moved = clip_to_png_range(DepthMap(values, valid), 256.0)
        self.assertEqual(moved, 2)
        self.assertEqual(clipped.values[0, 0], 65535 / 256.0)
        self.assertEqual(clipped.values[0, 1], 1 / 256.0)
        self.assertEqual(clipped.values[0, 2], 5.0)
        np.testing.assert_array_equal(clipped.valid, valid)
        path = self.dir / "clipped.png"
        save_depth_png(clipped, path, 256.0)
        with Image.open(path) as img:
            self.assertEqual(int(np.asarray(img).max()), 65535)
        with self.assertRaises(ValueError):
            clip_to_png_range(DepthMap(values, valid), 0.0)

    def test_missing_and_wrong_mode_files(self):
        with self.assertRaises(DepthIOError):
            load_depth_png(self.dir / "nope.png", 256.0)
        rgb_path = self.dir / "rgb.png"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(rgb_path)
        with self.assertRaises(DepthIOError):
            load_depth_png(rgb_path, 256.0)

    def test_rgb_round_trip(self):
        image = np.random.default_rng(1).integers(0, 256, size=(5, 4, 3)).astype(np.uint8)
        path = self.dir / "rgb.png"
        save_rgb_png(image, path)
        loaded = load_rgb_png(path)
        self.assertEqual(loaded.dtype, np.float32)
        np.testing.assert_array_equal(np.rint(loaded * 255).astype(np.uint8), image)


class TestValidityAndProjection(unittest.TestCase):

    def test_apply_validity_is_inclusive(self):
        depth = DepthMap.dense(np.array([[0.5, 1.0, 10.0, 10.5]]))
        masked = apply_validity(depth, ValidityPolicy(1.0, 10.0))
        np.testing.assert_array_equal(masked.valid, [[False, True, True, False]])
        np.testing.assert_array_equal(masked.values, depth.values)

    def test_policy_bounds(self):
        with self.assertRaises(ValueError):
            ValidityPolicy(0.0, 10.0)
        with self.assertRaises(ValueError):
            ValidityPolicy(5.0, 1.0)

    def test_named_policies(self):
        self.assertEqual(POLICIES, {"nyu": NYU_POLICY, "kitti": KITTI_POLICY})
        self.assertEqual((NYU_POLICY.max_depth, KITTI_POLICY.max_depth), (10.0, 80.0))

    def test_projection_of_known_pixels(self):
        values = np.zeros((3, 3))
        valid = np.zeros((3, 3), dtype=bool)
        values[1, 1], valid[1, 1] = 2.0, True
        values[0, 2], valid[0, 2] = 4.0, True
        K = CameraIntrinsics(fx=2.0, fy=2.0, cx=1.0, cy=1.0)

        points = project_point_cloud(DepthMap(values, valid), K)

        np.testing.assert_allclose(points, [[2.0, -2.0, 4.0], [0.0, 0.0, 2.0]])

    def test_principal_point_outside_image(self):
        depth = DepthMap.dense(np.ones((4, 4)))
        with self.assertRaises(ValueError):
            project_point_cloud(depth, CameraIntrinsics(1.0, 1.0, 9.0, 1.0))

    def test_default_intrinsics_center(self):
        K = default_intrinsics(48, 64)
        self.assertEqual((K.fx, K.fy, K.cx, K.cy), (64.0, 64.0, 32.0, 24.0))

    def test_write_ply(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "cloud.ply"
            write_ply(np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]), path)
            lines = path.read_text(encoding="ascii").splitlines()
        self.assertEqual(lines[0], "ply")
        self.assertIn("element vertex 2", lines)
        self.assertEqual(lines[-1].split(), ["3.000000", "4.000000", "5.000000"])


def run_tests():
    """Run the test suite."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestDepthMap, TestDepthPng, TestValidityAndProjection):
        suite.addTests(loader.loadTestsFromTestCase(case))
    result = unittest.TextTestRunner(verbosity=2).run(suite)
    return 0 if result.wasSuccessful() else 1


if __name__ == '__main__':
    print("Running Depth Type Tests...")
    print("=" * 50)

    exit_code = run_tests()

    print("=" * 50)
    if exit_code == 0:
        print("✅ All tests passed!")
    else:
        print("❌ Some tests failed!")

    sys.exit(exit_code)

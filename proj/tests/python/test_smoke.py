"""Smoke tests over the python bindings."""

import math

import numpy as np
import pytest

import diffdet


def test_schedule_values():
    s = diffdet.make_schedule(2, 0.1, 0.3)
    assert s.steps == 2
    assert s.betas == pytest.approx([0.1, 0.3])
    assert s.alpha_bars == pytest.approx([0.9, 0.63])


def test_q_sample_known_value():
    s = diffdet.make_schedule(1, 0.5, 0.5)  # alpha_bar = 0.5
    x0 = np.full((1, 4, 4), 0.5, dtype=np.float32)
    eps = np.ones((1, 4, 4), dtype=np.float32)
    out = diffdet.q_sample(x0, 1, eps, s)
    expected = 0.5 * math.sqrt(0.5) + math.sqrt(0.5)
    assert out == pytest.approx(np.full((1, 4, 4), expected), abs=1e-6)


def test_q_step_matches_formula():
    s = diffdet.make_schedule(10, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8, 8)).astype(np.float32)
    eps = rng.normal(size=(1, 8, 8)).astype(np.float32)
    out = diffdet.q_step(x, 3, eps, s)
    b = s.betas[2]
    ref = math.sqrt(1 - b) * x + math.sqrt(b) * eps
    assert out == pytest.approx(ref, abs=1e-6)


def test_iou_fixture():
    assert diffdet.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    assert diffdet.iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0


def test_corrupt_none_is_identity():
    img = np.random.default_rng(1).random((1, 16, 16)).astype(np.float32)
    out = diffdet.corrupt(img, "none")
    assert np.array_equal(out, img)


def test_corrupt_seed_determinism():
    img = np.full((1, 32, 32), 0.5, dtype=np.float32)
    a = diffdet.corrupt(img, "gaussian", sigma=0.1, seed=7)
    b = diffdet.corrupt(img, "gaussian", sigma=0.1, seed=7)
    c = diffdet.corrupt(img, "gaussian", sigma=0.1, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_greedy_nms_suppresses_duplicates():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [20, 20, 30, 30]], dtype=float)
    scores = np.array([0.9, 0.8, 0.7])
    classes = np.array([0, 0, 0], dtype=np.int32)
    kept = diffdet.greedy_nms(boxes, scores, classes, iou_threshold=0.5)
    assert len(kept) == 2
    assert kept[0][5] == pytest.approx(0.9)


def test_average_precision_trivial():
    assert diffdet.average_precision([True], [1.0], 1) == pytest.approx(1.0)
    assert diffdet.average_precision([False, False], [0.9, 0.8], 3) == 0.0


def test_generate_synthetic_deterministic():
    a = diffdet.generate_synthetic(2, image_size=64, seed=5)
    b = diffdet.generate_synthetic(2, image_size=64, seed=5)
    assert len(a) == 2
    for (ida, imga, boxa), (idb, imgb, boxb) in zip(a, b):
        assert ida == idb
        assert np.array_equal(imga, imgb)
        assert np.array_equal(boxa, boxb)
        assert len(boxa) >= 1
        assert imga.min() >= 0.0 and imga.max() <= 1.0


def test_class_names():
    assert diffdet.class_names() == ["open", "short", "mouse bite", "spur", "copper", "pin-hole"]


def test_bilinear_resize_shape():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    y = diffdet.bilinear_resize(x, 8, 8)
    assert y.shape == (1, 8, 8)

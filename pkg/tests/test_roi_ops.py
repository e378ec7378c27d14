import math

import numpy as np
import pytest

from roictx.errors import DegenerateBoxError, ShapeError
from roictx.geometry import Box
from roictx.gradcheck import check
from roictx.roi_ops import EMPTY_BIN, RangeMaxTable, roi_align, \
    roi_align_backward, roi_pool, roi_pool_backward


def random_roi(rng, width, height, min_size=1.0, max_size=None):
    """Random box overhanging the map by up to 3 on each side, but always
    with positive area inside it."""
    x1 = rng.uniform(-3.0, width - min_size)
    y1 = rng.uniform(-3.0, height - min_size)
    hi_w = (width + 3.0 - x1) if max_size is None else max_size
    hi_h = (height + 3.0 - y1) if max_size is None else max_size
    w = rng.uniform(min_size, max(hi_w, min_size + 1e-6))
    h = rng.uniform(min_size, max(hi_h, min_size + 1e-6))
    x2 = max(x1 + w, 0.5)
    y2 = max(y1 + h, 0.5)
    return Box(x1, y1, x2, y2)


def pool_oracle(F, r, ph, pw):
    """Per-bin max re-derived point by point: clip the box, split each
    axis proportionally, floor/ceil to integers, scan every cell."""
    D, H, W = F.shape
    x1 = min(max(r.x1, 0.0), float(W))
    y1 = min(max(r.y1, 0.0), float(H))
    x2 = min(max(r.x2, 0.0), float(W))
    y2 = min(max(r.y2, 0.0), float(H))
    hh, ww = y2 - y1, x2 - x1
    out = np.zeros((D, ph, pw), dtype=np.float32)
    for d in range(D):
        for i in range(ph):
            ys = max(0, math.floor(y1 + (i * hh) / ph))
            ye = min(H, math.ceil(y1 + ((i + 1) * hh) / ph))
            for j in range(pw):
                xs = max(0, math.floor(x1 + (j * ww) / pw))
                xe = min(W, math.ceil(x1 + ((j + 1) * ww) / pw))
                best = None
                for y in range(ys, ye):
                    for x in range(xs, xe):
                        v = F[d, y, x]
                        if best is None or v > best:
                            best = v
                out[d, i, j] = 0.0 if best is None else best
    return out


class TestRoiPoolForward:
    def test_constant_map_pools_to_constant(self):
        F = np.full((2, 10, 10), 3.25, dtype=np.float32)
        m = roi_pool(F, Box(1.2, 2.3, 8.6, 9.1), 7, 7)
        assert np.all(m.data == 3.25)

    def test_single_peak_1x1_grid(self):
        F = np.zeros((1, 16, 16), dtype=np.float32)
        F[0, 9, 4] = 5.0
        m = roi_pool(F, Box(2.0, 6.0, 8.0, 12.0), 1, 1)
        assert m.data[0, 0, 0] == 5.0
        assert m.argmax[0, 0, 0] == 9 * 16 + 4

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(60):
            D = int(rng.integers(1, 4))
            H = int(rng.integers(6, 20))
            W = int(rng.integers(6, 20))
            F = rng.normal(0, 2, (D, H, W)).astype(np.float32)
            r = random_roi(rng, W, H)
            ph = int(rng.integers(1, 8))
            pw = int(rng.integers(1, 8))
            got = roi_pool(F, r, ph, pw).data
            want = pool_oracle(F, r, ph, pw)
            assert np.array_equal(got, want)

    def test_output_within_clipped_roi_range(self):
        rng = np.random.default_rng(19)
        F = rng.normal(0, 1, (1, 16, 16)).astype(np.float32)
        r = Box(3.4, 2.2, 12.8, 13.9)
        m = roi_pool(F, r, 7, 7)
        region = F[0, 2:14, 3:13]
        assert m.data.max() <= region.max()
        assert m.data.min() >= region.min()

    def test_far_away_content_irrelevant(self):
        rng = np.random.default_rng(21)
        F = rng.normal(0, 1, (2, 20, 20)).astype(np.float32)
        r = Box(4.0, 5.0, 11.0, 12.0)
        m1 = roi_pool(F, r, 5, 5)
        F2 = F.copy()
        F2[:, 15:, :] = rng.normal(0, 9, (2, 5, 20)).astype(np.float32)
        F2[:, :, 15:] = rng.normal(0, 9, (2, 20, 5)).astype(np.float32)
        m2 = roi_pool(F2, r, 5, 5)
        assert np.array_equal(m1.data, m2.data)

    def test_roi_outside_map_rejected(self):
        F = np.zeros((1, 8, 8), dtype=np.float32)
        with pytest.raises(DegenerateBoxError):
            roi_pool(F, Box(10.0, 10.0, 14.0, 14.0), 2, 2)

    def test_argmax_points_inside_clipped_roi(self):
        rng = np.random.default_rng(27)
        F = rng.normal(0, 1, (2, 16, 16)).astype(np.float32)
        r = Box(-2.0, 3.5, 9.2, 18.0)
        m = roi_pool(F, r, 7, 7)
        c = r.clip(16, 16)
        for a in m.argmax.reshape(-1):
            y, x = divmod(int(a), 16)
            assert math.floor(c.y1) <= y < math.ceil(c.y2)
            assert math.floor(c.x1) <= x < math.ceil(c.x2)


class TestRoiPoolBackward:
    def test_ones_route_to_argmaxes(self):
        # strictly increasing map => bins have distinct argmaxes
        F = np.arange(100, dtype=np.float32).reshape(1, 10, 10)
        m = roi_pool(F, Box(1.0, 1.0, 9.0, 9.0), 4, 4)
        g = roi_pool_backward(np.ones((1, 4, 4), dtype=np.float32), m,
                              (1, 10, 10))
        assert g.sum() == 16.0
        assert ((g == 0) | (g == 1)).all()

    def test_shape_mismatch_rejected(self):
        F = np.zeros((1, 8, 8), dtype=np.float32)
        m = roi_pool(F, Box(0, 0, 8, 8), 2, 2)
        with pytest.raises(ShapeError):
            roi_pool_backward(np.zeros((1, 3, 3), dtype=np.float32), m, (1, 8, 8))

    def test_repeated_argmax_accumulates(self):
        F = np.zeros((1, 8, 8), dtype=np.float32)
        F[0, 2, 2] = 9.0  # every bin containing (2,2) picks it
        m = roi_pool(F, Box(1.9, 1.9, 2.6, 2.6), 2, 2)
        g = roi_pool_backward(np.ones((1, 2, 2), dtype=np.float32), m, (1, 8, 8))
        assert g[0, 2, 2] == 4.0

    def test_gradcheck(self):
        rng = np.random.default_rng(33)
        F = rng.normal(0, 3, (2, 12, 12)).astype(np.float32)
        r = Box(1.3, 2.1, 9.6, 10.2)
        w = rng.normal(0, 1, (2, 5, 5)).astype(np.float32)
        analytic = roi_pool_backward(w, roi_pool(F, r, 5, 5), F.shape)

        def f(x):
            return float((w.astype(np.float64) * roi_pool(x, r, 5, 5).data).sum())

        def records(x):
            return roi_pool(x, r, 5, 5).argmax.tobytes()

        report = check(f, F, analytic, h=1e-2, probes=150, records_fn=records)
        assert report.max_rel_error <= 1e-3
        assert report.skipped <= report.probed * 0.05


def align_oracle(F, r, ph, pw, samples):
    """Bilinear sampling re-derived scalar by scalar."""
    D, H, W = F.shape
    out = np.zeros((D, ph, pw), dtype=np.float64)
    for i in range(ph):
        for j in range(pw):
            acc = np.zeros(D)
            for si in range(samples):
                for sj in range(samples):
                    y = r.y1 + (i + (si + 0.5) / samples) * r.h / ph
                    x = r.x1 + (j + (sj + 0.5) / samples) * r.w / pw
                    y = min(max(y, 0.0), H - 1.0)
                    x = min(max(x, 0.0), W - 1.0)
                    y0, x0 = int(math.floor(y)), int(math.floor(x))
                    y0, x0 = min(y0, H - 1), min(x0, W - 1)
                    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
                    ly, lx = y - y0, x - x0
                    for d in range(D):
                        acc[d] += ((1 - ly) * (1 - lx) * F[d, y0, x0]
                                   + (1 - ly) * lx * F[d, y0, x1]
                                   + ly * (1 - lx) * F[d, y1, x0]
                                   + ly * lx * F[d, y1, x1])
            out[:, i, j] = acc / (samples * samples)
    return out.astype(np.float32)


def smooth_map(rng, d, h, w, wavelength=96.0):
    """Low-frequency surface: bilinear sampling converges fast on it."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    F = np.zeros((d, h, w))
    for c in range(d):
        a, b = rng.uniform(-1, 1, 2)
        F[c] = (a * np.cos(2 * np.pi * xx / wavelength + b)
                + b * np.sin(2 * np.pi * yy / wavelength + a))
    return F.astype(np.float32)


class TestRoiAlignForward:
    def test_constant_map(self):
        F = np.full((3, 9, 9), -1.5, dtype=np.float32)
        m = roi_align(F, Box(0.7, 1.1, 7.9, 8.2), 7, 7, 2)
        assert np.allclose(m.data, -1.5, atol=1e-6)

    def test_linear_ramp_gives_bin_centroids(self):
        # F(d, y, x) = x; interpolation reproduces affine functions, so a
        # bin's value is the x of its sample centroid = the bin center.
        W = 16
        F = np.tile(np.arange(W, dtype=np.float32), (1, W, 1))
        r = Box(2.0, 2.0, 12.0, 12.0)
        m = roi_align(F, r, 5, 5, 2)
        bw = r.w / 5
        for j in range(5):
            center = r.x1 + (j + 0.5) * bw
            assert m.data[0, :, j] == pytest.approx(center, abs=1e-5)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(37)
        for _ in range(25):
            D = int(rng.integers(1, 3))
            H = int(rng.integers(8, 16))
            W = int(rng.integers(8, 16))
            F = rng.normal(0, 2, (D, H, W)).astype(np.float32)
            r = random_roi(rng, W, H)
            m = roi_align(F, r, 3, 4, 2)
            assert np.allclose(m.data, align_oracle(F, r, 3, 4, 2), atol=1e-5)

    def test_dense_oversampling_convergence(self):
        rng = np.random.default_rng(39)
        for _ in range(10):
            F = smooth_map(rng, 2, 24, 24)
            r = random_roi(rng, 24, 24, min_size=4.0, max_size=12.0)
            got = roi_align(F, r, 7, 7, 2).data
            ref = roi_align(F, r, 7, 7, 16).data
            assert np.abs(got - ref).max() <= 1e-3

    def test_error_decreases_with_samples(self):
        rng = np.random.default_rng(43)
        F = smooth_map(rng, 1, 24, 24)
        r = Box(3.3, 4.1, 18.7, 19.2)
        ref = roi_align(F, r, 7, 7, 32).data
        errs = [np.abs(roi_align(F, r, 7, 7, s).data - ref).max()
                for s in (1, 2, 4, 8)]
        assert errs == sorted(errs, reverse=True)

    def test_boundary_samples_clamped_no_nan(self):
        F = np.random.default_rng(47).normal(0, 1, (1, 8, 8)).astype(np.float32)
        m = roi_align(F, Box(-4.0, -4.0, 6.0, 6.0), 5, 5, 2)
        assert np.isfinite(m.data).all()

    def test_fully_outside_rejected(self):
        F = np.zeros((1, 8, 8), dtype=np.float32)
        with pytest.raises(DegenerateBoxError):
            roi_align(F, Box(20, 20, 30, 30), 2, 2, 2)


class TestRoiAlignBackward:
    def test_gradient_mass_preserved_for_interior_roi(self):
        F = np.zeros((2, 20, 20), dtype=np.float32)
        m = roi_align(F, Box(4.2, 5.1, 14.3, 15.2), 7, 7, 2)
        g = roi_align_backward(np.ones((2, 7, 7), dtype=np.float32), m,
                               (2, 20, 20))
        # weights sum to 1 per sample, averaged per bin => mass = ph*pw
        assert g[0].sum() == pytest.approx(49.0, rel=1e-5)
        assert g[1].sum() == pytest.approx(49.0, rel=1e-5)

    def test_gradcheck(self):
        rng = np.random.default_rng(51)
        F = rng.normal(0, 3, (2, 12, 12)).astype(np.float32)
        r = Box(1.7, 0.9, 10.4, 9.8)
        w = rng.normal(0, 1, (2, 5, 5)).astype(np.float32)
        analytic = roi_align_backward(w, roi_align(F, r, 5, 5, 2), F.shape)

        def f(x):
            return float((w.astype(np.float64)
                          * roi_align(x, r, 5, 5, 2).data).sum())

        report = check(f, F, analytic, h=1e-2, probes=150)
        assert report.max_rel_error <= 1e-3

    def test_shape_mismatch_rejected(self):
        F = np.zeros((1, 8, 8), dtype=np.float32)
        m = roi_align(F, Box(0, 0, 8, 8), 2, 2, 2)
        with pytest.raises(ShapeError):
            roi_align_backward(np.zeros((2, 2, 2), dtype=np.float32), m, (1, 8, 8))


class TestRangeMaxTable:
    def test_query_matches_direct_max(self):
        rng = np.random.default_rng(53)
        F = rng.normal(0, 1, (3, 17, 23)).astype(np.float32)
        table = RangeMaxTable(F)
        for _ in range(300):
            y0 = int(rng.integers(0, 16))
            y1 = int(rng.integers(y0 + 1, 18))
            x0 = int(rng.integers(0, 22))
            x1 = int(rng.integers(x0 + 1, 24))
            got = table.query(np.array([y0]), np.array([y1]),
                              np.array([x0]), np.array([x1]))[0]
            want = F[:, y0:y1, x0:x1].max(axis=(1, 2))
            assert np.array_equal(got, want)

    def test_pool_boxes_bit_equals_roi_pool(self):
        rng = np.random.default_rng(59)
        F = rng.normal(0, 1, (4, 32, 32)).astype(np.float32)
        table = RangeMaxTable(F)
        boxes = [random_roi(rng, 32, 32, min_size=2.0).clip(32, 32)
                 for _ in range(50)]
        batch = table.pool_boxes(boxes, 7, 7)
        for k, b in enumerate(boxes):
            assert np.array_equal(batch[k], roi_pool(F, b, 7, 7).data)

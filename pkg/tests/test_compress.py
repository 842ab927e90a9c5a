import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downscale import compress
from downscale.compress import (CannyParams, PatchSet, canny, compression_ratio, detokenize, identity_kernel,
                                quadtree_partition, tokenize, uniform_patchset)
from downscale.numerics import Tensor, patchify


def recursive_partition(mask, r, c, side, min_side, threshold):
    block = mask[r:r + side, c:c + side]
    if side > min_side and block.sum() / block.size > threshold:
        h = side // 2
        out = []
        for dr, dc in ((0, 0), (0, h), (h, 0), (h, h)):
            out += recursive_partition(mask, r + dr, c + dc, h, min_side, threshold)
        return out
    return [(r, c, side)]


def reference_partition(mask, min_side, max_side, threshold):
    out = []
    for r in range(0, mask.shape[0], max_side):
        for c in range(0, mask.shape[1], max_side):
            out += recursive_partition(mask, r, c, max_side, min_side, threshold)
    return sorted(out)


class TestCanny:
    def test_constant_image(self):
        assert not canny(np.full((16, 16), 3.0)).edges.any()

    def test_vertical_step(self):
        img = np.zeros((32, 32))
        img[:, 16:] = 1.0
        e = canny(img).edges
        cols = np.nonzero(e.any(axis=0))[0]
        assert e.any()
        assert np.all(np.abs(cols - 16) <= 1)
        assert len(cols) == 1
        assert e.sum(axis=0).max() == 32

    def test_horizontal_step_transposes(self):
        img = np.zeros((24, 24))
        img[10:, :] = 2.0
        e = canny(img).edges
        rows = np.nonzero(e.any(axis=1))[0]
        assert len(rows) == 1 and abs(rows[0] - 10) <= 1

    def test_deterministic(self):
        img = np.random.default_rng(0).normal(size=(20, 24))
        a, b = canny(img), canny(img)
        np.testing.assert_array_equal(a.edges, b.edges)
        assert (a.height, a.width) == (20, 24)

    def test_thresholds_order(self):
        img = np.random.default_rng(1).normal(size=(32, 32))
        loose = canny(img, CannyParams(1.0, 0.05, 0.1)).edges
        tight = canny(img, CannyParams(1.0, 0.2, 0.4)).edges
        assert np.all(loose[tight])

    def test_degenerate(self):
        with pytest.raises(ValueError):
            canny(np.zeros((2, 10)))


class TestQuadtree:
    def test_all_false(self):
        ps = quadtree_partition(np.zeros((16, 32), bool), 2, 8, 0.05)
        assert len(ps) == 8 and all(s == 8 for _, _, s in ps.patches)

    def test_all_true(self):
        ps = quadtree_partition(np.ones((16, 16), bool), 2, 8, 0.05)
        assert len(ps) == 64 and all(s == 2 for _, _, s in ps.patches)

    def test_corner_pixel_chain(self):
        mask = np.zeros((16, 16), bool)
        mask[0, 0] = True
        counts = [len(quadtree_partition(mask, m, 16, 0.0)) for m in (16, 8, 4, 2)]
        assert counts == [1, 4, 7, 10]
        assert quadtree_partition(mask, 2, 16, 0.0).patches == tuple(reference_partition(mask, 2, 16, 0.0))

    def test_exhaustive_random_maps(self):
        rng = np.random.default_rng(0)
        for i in range(1200):
            mask = rng.random((8, 8)) < rng.random()
            thr = float(rng.choice([0.0, 0.05, 0.1, 0.25, 0.5, rng.random()]))
            ps = quadtree_partition(mask, 2, 8, thr)
            assert list(ps.patches) == reference_partition(mask, 2, 8, thr), i

    def test_invariants(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            mask = rng.random((32, 48)) < 0.1
            ps = quadtree_partition(mask, 2, 16, 0.05)
            owner = ps.rasterize()
            assert owner.max() == len(ps) - 1
            assert sum(s * s for _, _, s in ps.patches) == 32 * 48
            for r, c, s in ps.patches:
                assert s in (2, 4, 8, 16)
                if s > 2:
                    assert mask[r:r + s, c:c + s].mean() <= 0.05

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), a=st.floats(0, 1), b=st.floats(0, 1))
    def test_monotone_in_threshold(self, seed, a, b):
        mask = np.random.default_rng(seed).random((16, 16)) < 0.15
        lo, hi = min(a, b), max(a, b)
        assert len(quadtree_partition(mask, 1, 16, lo)) >= len(quadtree_partition(mask, 1, 16, hi))

    def test_errors(self):
        with pytest.raises(ValueError):
            quadtree_partition(np.zeros((12, 12), bool), 2, 6, 0.1)
        with pytest.raises(ValueError):
            quadtree_partition(np.zeros((12, 12), bool), 2, 8, 0.1)

    def test_json_roundtrip(self):
        mask = np.random.default_rng(2).random((16, 16)) < 0.1
        ps = quadtree_partition(mask, 2, 8, 0.05)
        doc = json.loads(ps.to_json())
        assert {"min_side", "max_side", "threshold", "patches"} <= set(doc)
        assert PatchSet.from_json(ps.to_json()) == ps


class TestRatio:
    def test_full_refinement(self):
        ps = quadtree_partition(np.ones((16, 16), bool), 2, 8, 0.05)
        assert compression_ratio(ps, 2) == 1.0

    def test_all_coarse(self):
        ps = quadtree_partition(np.zeros((16, 16), bool), 2, 8, 0.05)
        assert compression_ratio(ps, 2) == 16.0

    def test_one_detailed_quadrant(self):
        # smooth image with texture confined to one quadrant
        img = np.zeros((64, 64))
        img[:32, :32] = np.random.default_rng(3).normal(size=(32, 32))
        edges = canny(img)
        ps = quadtree_partition(edges, 2, 16, 0.05)
        ref = reference_partition(edges.edges, 2, 16, 0.05)
        assert compression_ratio(ps) == pytest.approx(32 * 32 / len(ref))
        assert compression_ratio(ps) > 2.0


def _random_patchset(rng, h=16, w=16, min_side=2, max_side=8):
    mask = rng.random((h, w)) < 0.1
    return quadtree_partition(mask, min_side, max_side, 0.05)


class TestTokenize:
    def test_uniform_matches_vit_patching(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 8, 12))
        w = rng.normal(size=(3 * 4, 5))
        table = rng.normal(size=(2, 5))
        ps = uniform_patchset(8, 12, 2, 4)
        tokens, layout = tokenize(Tensor(x), ps, Tensor(w), Tensor(table))
        flat = np.transpose(patchify(Tensor(x), 2).data, (1, 0, 2)).reshape(-1, 12)
        np.testing.assert_allclose(tokens.data, flat @ w + table[0], atol=1e-12)
        assert layout is ps

    def test_constant_image_equal_tokens(self):
        rng = np.random.default_rng(1)
        ps = _random_patchset(rng)
        w, table = rng.normal(size=(2 * 4, 6)), rng.normal(size=(3, 6))
        tokens, _ = tokenize(Tensor(np.full((2, 16, 16), 1.5)), ps, Tensor(w), Tensor(table))
        sides = np.array([s for _, _, s in ps.patches])
        for s in np.unique(sides):
            rows = tokens.data[sides == s]
            assert np.ptp(rows, axis=0).max() < 1e-12

    def test_pooling_against_loops(self):
        rng = np.random.default_rng(2)
        ps = _random_patchset(rng)
        x = rng.normal(size=(2, 16, 16))
        w = np.eye(8)
        tokens, _ = tokenize(Tensor(x), ps, Tensor(w), Tensor(np.zeros((3, 8))))
        for i, (r, c, s) in enumerate(ps.patches):
            f = s // 2
            ref = [x[ch, r + a * f:r + (a + 1) * f, c + b * f:c + (b + 1) * f].mean()
                   for ch in range(2) for a in range(2) for b in range(2)]
            np.testing.assert_allclose(tokens.data[i], ref, atol=1e-12)

    def test_permutation_consistency(self):
        rng = np.random.default_rng(3)
        ps = _random_patchset(rng)
        x = Tensor(rng.normal(size=(1, 16, 16)))
        w, table = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 3)))
        perm = rng.permutation(len(ps))
        shuffled = PatchSet(tuple(ps.patches[i] for i in perm), 16, 16, 2, 8, 0.05)
        a, _ = tokenize(x, ps, w, table)
        b, _ = tokenize(x, shuffled, w, table)
        np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)

    def test_token_count_matches_partition(self):
        rng = np.random.default_rng(4)
        ps = _random_patchset(rng, 32, 32)
        tokens, _ = tokenize(Tensor(rng.normal(size=(1, 32, 32))), ps, Tensor(np.ones((4, 2))),
                             Tensor(np.zeros((3, 2))))
        assert tokens.shape[0] == len(ps)

    def test_mismatch(self):
        ps = uniform_patchset(8, 8, 2)
        with pytest.raises(ValueError):
            tokenize(Tensor(np.zeros((1, 8, 10))), ps, Tensor(np.ones((4, 2))), Tensor(np.zeros((1, 2))))


def smooth_oracle(img, kernel):
    c, h, w = img.shape
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(img)
    for o in range(kernel.shape[0]):
        for i in range(c):
            for r in range(h):
                for cc in range(w):
                    out[o, r, cc] += (kernel[o, i] * pad[i, r:r + 3, cc:cc + 3]).sum()
    return out


class TestDetokenize:
    def test_uniform_shape(self):
        ps = uniform_patchset(8, 12, 2)
        out = detokenize(Tensor(np.ones((24, 4))), ps, Tensor(np.ones((4, 3 * 4))), Tensor(identity_kernel(3)))
        assert out.shape == (3, 8, 12)

    def test_single_patch(self):
        ps = PatchSet(((0, 0, 8),), 8, 8, 8, 8, 0.0)
        w = np.zeros((2, 64))
        w[0, :] = 1.0
        out = detokenize(Tensor(np.array([[2.5, 7.0]])), ps, Tensor(w), Tensor(identity_kernel(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 8, 8), 2.5))

    def test_roundtrip_piecewise_constant(self):
        rng = np.random.default_rng(5)
        ps = _random_patchset(rng)
        owner = ps.rasterize()
        # constant over every min_side sub-cell of every patch
        cell = np.zeros((2, 16, 16))
        for r, c, s in ps.patches:
            f = s // 2
            for a in range(2):
                for b in range(2):
                    cell[:, r + a * f:r + (a + 1) * f, c + b * f:c + (b + 1) * f] = rng.normal(size=(2, 1, 1))
        assert owner.shape == (16, 16)
        eye = np.eye(8)
        tokens, _ = tokenize(Tensor(cell), ps, Tensor(eye), Tensor(np.zeros((3, 8))))
        back = detokenize(tokens, ps, Tensor(eye), Tensor(identity_kernel(2)))
        np.testing.assert_allclose(back.data, cell, atol=1e-12)
        kernel = rng.normal(size=(2, 2, 3, 3))
        smoothed = detokenize(tokens, ps, Tensor(eye), Tensor(kernel))
        np.testing.assert_allclose(smoothed.data, smooth_oracle(cell, kernel), atol=1e-10)

    def test_crop(self):
        ps = uniform_patchset(8, 8, 2)
        out = detokenize(Tensor(np.ones((16, 4))), ps, Tensor(np.eye(4)), Tensor(identity_kernel(1)), out_hw=(7, 5))
        assert out.shape == (1, 7, 5)

    def test_count_mismatch(self):
        ps = uniform_patchset(8, 8, 2)
        with pytest.raises(ValueError):
            detokenize(Tensor(np.ones((15, 4))), ps, Tensor(np.eye(4)), Tensor(identity_kernel(1)))


def test_gradients_flow_through_tokens():
    from downscale.numerics import backward, mean, square
    rng = np.random.default_rng(6)
    ps = _random_patchset(rng)
    x = Tensor(rng.normal(size=(1, 16, 16)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    table = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    wo = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    k = Tensor(identity_kernel(1), requires_grad=True)
    tokens, _ = tokenize(x, ps, w, table)
    loss = mean(square(detokenize(tokens, ps, wo, k)))
    backward(loss)
    from downscale.numerics.gradcheck import numerical_grad

    def f():
        t, _ = tokenize(Tensor(x.data), ps, Tensor(w.data), Tensor(table.data))
        return float(np.mean(detokenize(t, ps, Tensor(wo.data), Tensor(k.data)).data ** 2))

    for p in (x, w, table, wo, k):
        num = numerical_grad(f, p.data)
        np.testing.assert_allclose(p.grad, num, rtol=1e-6, atol=1e-8)

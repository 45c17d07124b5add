import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthgen import model
from synthgen.numerics import Rng, finite_difference_gradient, relative_error
from synthgen.plgcl import (
    GaussianStats,
    InsufficientClasses,
    PlgclConfig,
    attended_image,
    confidence_maps,
    embed_patches,
    entropy_fn,
    gaussian_stats,
    gaussian_stats_backward,
    infonce_loss,
    mc_upper_bound_check,
    patch_statistics,
    plgcl_batch_loss,
    plgcl_loss,
    plgcl_loss_full,
    sample_patches,
)


def unit(rng, n, d):
    v = rng.normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestConfidence:
    def test_zero_logits_uniform(self):
        np.testing.assert_allclose(confidence_maps(np.zeros((4, 3, 3))), 0.25)

    def test_dominant(self):
        logits = np.zeros((3, 2, 2))
        logits[1] = 20
        assert (confidence_maps(logits)[1] > 0.999).all()

    def test_normalised(self):
        c = confidence_maps(5 * Rng(0).normal((2, 6, 5, 5)))
        np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-9)
        assert c.min() >= 0 and c.max() <= 1


class TestAttended:
    def test_examples(self):
        img = Rng(1).uniform(size=(3, 4, 4))
        np.testing.assert_array_equal(attended_image(img, np.ones((4, 4))), img)
        assert not attended_image(img, np.zeros((4, 4))).any()
        c = np.ones((4, 4))
        c[2, 1] = 0.25
        np.testing.assert_array_equal(attended_image(np.ones((3, 4, 4)), c)[:, 2, 1], [0.25] * 3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            attended_image(np.ones((3, 4, 4)), np.ones((4, 5)))


class TestEntropy:
    def test_half(self):
        assert abs(entropy_fn(0.5) - math.log(2)) < 1e-12

    def test_clamped_limit(self):
        x = 1e-7
        expected = -x * math.log(x) - (1 - x) * math.log(1 - x)
        assert entropy_fn(0.0) == pytest.approx(expected, rel=1e-12)
        assert entropy_fn(0.0) == pytest.approx(1.712e-6, rel=1e-3)

    def test_symmetry(self):
        x = Rng(0).uniform(size=1000)
        np.testing.assert_allclose(entropy_fn(x), entropy_fn(1 - x), rtol=1e-12, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_range(self, x):
        assert 0.0 <= entropy_fn(x) <= math.log(2) + 1e-15

    def test_outside_domain(self):
        with pytest.raises(ValueError):
            entropy_fn(1.2)
        with pytest.raises(ValueError):
            entropy_fn(-0.1)


def brute_force_stats(conf_k, attended, p):
    h, w = conf_k.shape
    out = []
    for r in range(0, h, p):
        for c in range(0, w, p):
            avg = ent = 0.0
            for i in range(r, r + p):
                for j in range(c, c + p):
                    avg += conf_k[i, j]
                    g = 0.299 * attended[0, i, j] + 0.587 * attended[1, i, j] + 0.114 * attended[2, i, j]
                    g = min(max(g, 1e-7), 1 - 1e-7)
                    ent += -g * math.log(g) - (1 - g) * math.log(1 - g)
            out.append((r, c, avg / p / p, ent / p / p))
    return out


class TestPatchStatistics:
    def test_constant_confidence(self):
        recs = patch_statistics(np.full((8, 8), 0.8), np.ones((3, 8, 8)) * 0.8, 4)
        assert len(recs) == 4
        assert all(r.avg_confidence == pytest.approx(0.8) for r in recs)

    def test_half_luma(self):
        recs = patch_statistics(np.ones((8, 8)), np.full((3, 8, 8), 0.5), 4)
        assert all(abs(r.avg_entropy - math.log(2)) < 1e-12 for r in recs)

    def test_brute_force(self):
        rng = Rng(5)
        for _ in range(5):
            conf = rng.uniform(size=(16, 16))
            att = attended_image(rng.uniform(size=(3, 16, 16)), conf)
            recs = patch_statistics(conf, att, 4)
            for rec, (r, c, avg, ent) in zip(recs, brute_force_stats(conf, att, 4)):
                assert (rec.row, rec.col) == (r, c)
                assert rec.avg_confidence == pytest.approx(avg, abs=1e-14)
                assert rec.avg_entropy == pytest.approx(ent, abs=1e-14)
                assert 0 <= rec.avg_confidence <= 1 and 0 <= rec.avg_entropy <= math.log(2)
                np.testing.assert_array_equal(rec.payload, att[:, r:r + 4, c:c + 4])

    def test_misaligned(self):
        with pytest.raises(ValueError, match="misalignment"):
            patch_statistics(np.ones((8, 8)), np.ones((3, 8, 8)), 3)


def brute_force_sampling(images, conf, cfg):
    """Enumerate every patch and apply the selection rules directly."""
    n, k, h, w = conf.shape
    p = cfg.patch
    present = {}
    for c in range(k):
        recs = []
        for i in range(n):
            att = attended_image(images[i], conf[i, c])
            for (r, col, avg, ent) in brute_force_stats(conf[i, c], att, p):
                recs.append((avg, ent, i, r, col))
        best = max(recs, key=lambda t: (t[0], -t[2], -t[3], -t[4]))
        if best[0] < cfg.presence:
            continue
        rest = sorted([t for t in recs if t is not best], key=lambda t: (-t[0], t[2], t[3], t[4]))
        present[c] = (best, rest[:cfg.max_candidates])
    result = {}
    for c, (anchor, cands) in present.items():
        pos = sorted(range(len(cands)), key=lambda j: (abs(cands[j][1] - anchor[1]), j))[:cfg.n_positives]
        negs = []
        for o, (a2, c2) in present.items():
            if o != c:
                negs += [a2] + c2
        key = lambda t: (t[2], t[3], t[4])
        result[c] = (key(anchor), sorted(key(cands[j]) for j in pos), sorted(key(t) for t in negs))
    return result


class TestSamplePatches:
    def test_separable_halves(self):
        img = np.full((3, 16, 16), 0.5)
        conf = np.zeros((2, 16, 16))
        conf[0, :, :8] = 1
        conf[1, :, 8:] = 1
        # 8 patches per half: anchor plus 7 candidates fill the half exactly
        out = sample_patches(img, conf, PlgclConfig(patch=4, max_candidates=7))
        assert out[0].anchor.col < 8 and out[1].anchor.col >= 8
        assert all(r.col >= 8 for r in out[0].negatives)
        assert all(r.col < 8 for r in out[1].negatives)
        assert all(r.cls == 0 and r.col < 8 for r in out[0].positives)

    def test_single_class_signal(self):
        conf = np.zeros((2, 8, 8))
        conf[0] = 1
        with pytest.raises(InsufficientClasses):
            sample_patches(np.ones((3, 8, 8)), conf, PlgclConfig(patch=4))

    def test_anchor_tie_top_left(self):
        conf = np.zeros((2, 8, 8))
        conf[0, :4] = 1
        conf[1, 4:] = 1
        out = sample_patches(np.ones((3, 8, 8)) * 0.3, conf, PlgclConfig(patch=4))
        assert (out[0].anchor.row, out[0].anchor.col) == (0, 0)
        assert (out[1].anchor.row, out[1].anchor.col) == (4, 0)

    def test_three_class_brute_force(self):
        rng = Rng(17)
        cfg = PlgclConfig(patch=4, max_candidates=3, n_positives=2)
        for trial in range(10):
            images = rng.uniform(size=(2, 3, 12, 12))
            logits = np.zeros((2, 3, 12, 12))
            for i in range(2):
                for bi in range(3):
                    for bj in range(3):
                        logits[i, int(rng.integers(0, 3)), bi * 4:bi * 4 + 4, bj * 4:bj * 4 + 4] = 3.0
            conf = confidence_maps(logits + 0.3 * rng.normal(logits.shape))
            try:
                out = sample_patches(images, conf, cfg)
            except InsufficientClasses:
                continue
            expect = brute_force_sampling(images, conf, cfg)
            assert set(out) == set(expect)
            key = lambda r: (r.image_index, r.row, r.col)
            for c, g in out.items():
                a, pos, neg = expect[c]
                assert key(g.anchor) == a
                assert sorted(map(key, g.positives)) == pos
                assert sorted(map(key, g.negatives)) == neg
                assert g.anchor.avg_confidence >= max(r.avg_confidence for r in g.candidates)


class TestInfoNce:
    def test_equal_scores(self):
        f = np.array([1.0, 0.0])
        assert infonce_loss(f, [f], [f], 0.07) == pytest.approx(math.log(2))

    def test_limit(self):
        f = np.array([1.0, 0.0])
        assert infonce_loss(f, [f], [-f], 0.01) < 1e-50

    def test_transcription(self):
        rng = Rng(3)
        for _ in range(20):
            f = unit(rng, 1, 16)[0]
            pos, neg = unit(rng, 3, 16), unit(rng, 5, 16)
            direct = np.mean([
                -math.log(math.exp(f @ p / 0.07) / (math.exp(f @ p / 0.07) + sum(math.exp(f @ q / 0.07) for q in neg)))
                for p in pos
            ])
            assert infonce_loss(f, pos, neg, 0.07) == pytest.approx(direct, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            infonce_loss(np.ones(2), [], [np.ones(2)], 0.1)


class TestGaussianStats:
    def test_singleton(self):
        f = np.array([0.6, 0.8])
        s = gaussian_stats([f])
        np.testing.assert_array_equal(s.mean, f)
        np.testing.assert_array_equal(s.var, 0)

    def test_antipodal(self):
        v = np.array([0.6, -0.8])
        s = gaussian_stats([v, -v])
        np.testing.assert_array_equal(s.mean, 0)
        np.testing.assert_allclose(s.var, v * v)

    def test_brute_force(self):
        e = Rng(0).normal((10, 5))
        s = gaussian_stats(e)
        for d in range(5):
            col = [e[i, d] for i in range(10)]
            m = sum(col) / 10
            assert s.mean[d] == pytest.approx(m)
            assert s.var[d] == pytest.approx(sum((c - m) ** 2 for c in col) / 10)
        assert (s.var >= 0).all()

    def test_empty(self):
        with pytest.raises(ValueError):
            gaussian_stats([])

    def test_backward(self):
        rng = Rng(2)
        e = rng.normal((4, 3))
        dm, dv = rng.normal(3), rng.normal(3)

        def f(x):
            s = gaussian_stats(x)
            return float(dm @ s.mean + dv @ s.var)

        np.testing.assert_allclose(
            gaussian_stats_backward(e, gaussian_stats(e), dm, dv), finite_difference_gradient(f, e.copy()), atol=1e-9
        )


def random_config(rng, d=8, n_neg=3, scale=0.05):
    f = unit(rng, 1, d)[0]
    pos = GaussianStats(unit(rng, 1, d)[0], scale * rng.uniform(size=d))
    negs = [GaussianStats(m, scale * rng.uniform(size=d)) for m in unit(rng, n_neg, d)]
    return f, pos, negs


class TestPlgclLoss:
    def test_no_negatives(self):
        f = np.array([0.6, 0.8])
        loss, g = plgcl_loss(f, GaussianStats(f, np.zeros(2)), [], 0.07, 1.0, 1.0)
        assert loss == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_softplus_reduction(self):
        rng = Rng(8)
        for _ in range(20):
            f, p, n = unit(rng, 3, 6)
            z = np.zeros(6)
            loss, _ = plgcl_loss(f, GaussianStats(p, z), [GaussianStats(n, z)], 0.07, 1.0, 0.7)
            delta = (f @ n - f @ p) / 0.07
            assert loss == pytest.approx(np.logaddexp(0.0, delta), rel=1e-12, abs=1e-14)

    def test_gradient(self):
        rng = Rng(21)
        for _ in range(10):
            f, pos, negs = random_config(rng)
            _, g = plgcl_loss(f, pos, negs, 0.07, 1.0, 1.0)
            fd = finite_difference_gradient(lambda x: plgcl_loss(x, pos, negs, 0.07, 1.0, 1.0)[0], f.copy())
            assert relative_error(g, fd) < 1e-6

    def test_stat_gradients(self):
        rng = Rng(22)
        f, pos, negs = random_config(rng)
        _, g = plgcl_loss_full(f, pos, negs, 0.07, 1.0, 1.0)

        def loss_with(which, arr):
            def fn(x):
                p = GaussianStats(pos.mean.copy(), pos.var.copy())
                ns = [GaussianStats(s.mean.copy(), s.var.copy()) for s in negs]
                target = p if which[0] == "pos" else ns[which[2]]
                setattr(target, which[1], x)
                return plgcl_loss(f, p, ns, 0.07, 1.0, 1.0)[0]
            return finite_difference_gradient(fn, arr.copy())

        assert relative_error(g.pos_mean, loss_with(("pos", "mean"), pos.mean)) < 1e-6
        assert relative_error(g.pos_var, loss_with(("pos", "var"), pos.var)) < 1e-6
        assert relative_error(g.neg_mean[1], loss_with(("neg", "mean", 1), negs[1].mean)) < 1e-6
        assert relative_error(g.neg_var[2], loss_with(("neg", "var", 2), negs[2].var)) < 1e-6

    def test_order_invariant_and_monotone(self):
        rng = Rng(4)
        f, pos, negs = random_config(rng)
        base, _ = plgcl_loss(f, pos, negs, 0.07, 1.0, 1.0)
        assert plgcl_loss(f, pos, negs[::-1], 0.07, 1.0, 1.0)[0] == pytest.approx(base, rel=1e-14)
        moved = GaussianStats(negs[0].mean + 0.1 * f, negs[0].var)
        assert plgcl_loss(f, pos, [moved] + negs[1:], 0.07, 1.0, 1.0)[0] >= base

    def test_lambda_zero_is_point_contrast(self):
        rng = Rng(6)
        f, pos, negs = random_config(rng, scale=0.5)
        zero = [GaussianStats(s.mean, np.zeros_like(s.var)) for s in negs]
        a, _ = plgcl_loss(f, pos, negs, 0.07, 1.0, 0.0)
        b, _ = plgcl_loss(f, GaussianStats(pos.mean, 0 * pos.var), zero, 0.07, 1.0, 0.0)
        assert a == b

    def test_zeta_scales_negatives(self):
        rng = Rng(7)
        f, pos, negs = random_config(rng)
        z2, _ = plgcl_loss(f, pos, negs, 0.07, 2.0, 1.0)
        doubled, _ = plgcl_loss(f, pos, negs + negs, 0.07, 1.0, 1.0)
        assert z2 == pytest.approx(doubled, rel=1e-12)

    def test_non_negative(self):
        rng = Rng(9)
        for _ in range(50):
            f, pos, negs = random_config(rng, scale=rng.uniform())
            assert plgcl_loss(f, pos, negs, 0.07, 1.0, 1.0)[0] >= 0


class TestMcBound:
    def test_degenerate_exact(self):
        rng = Rng(0)
        f = unit(rng, 1, 8)[0]
        pos = np.repeat(unit(rng, 1, 8), 3, axis=0)
        negs = [np.repeat(unit(rng, 1, 8), 2, axis=0) for _ in range(3)]
        l_mc, l_closed, gap, _ = mc_upper_bound_check(f, pos, negs, 0.07, 100, rng)
        assert abs(gap) < 1e-9

    def test_bound_holds(self):
        rng = Rng(1)
        for _ in range(10):
            f = unit(rng, 1, 8)[0]
            pos = unit(rng, 4, 8)
            negs = [unit(rng, 3, 8) for _ in range(2)]
            _, _, gap, se = mc_upper_bound_check(f, pos, negs, 0.07, 20_000, rng)
            assert gap >= -3 * se

    def test_standard_error_scaling(self):
        rng = Rng(2)
        f = unit(rng, 1, 8)[0]
        pos = unit(rng, 4, 8)
        negs = [unit(rng, 3, 8)]
        _, _, _, se_small = mc_upper_bound_check(f, pos, negs, 0.5, 1_000, Rng(3))
        _, _, _, se_big = mc_upper_bound_check(f, pos, negs, 0.5, 100_000, Rng(4))
        assert se_small / se_big == pytest.approx(10.0, rel=0.15)


class TestEmbedding:
    def setup_method(self):
        self.params = model.init_params(Rng(0), 4, 8)

    def test_unit_norm(self):
        e = embed_patches(self.params, Rng(1).uniform(size=(5, 3, 8, 8)))
        np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9)

    def test_identical_patches(self):
        p = Rng(2).uniform(size=(3, 8, 8))
        e = embed_patches(self.params, np.stack([p, p]))
        np.testing.assert_array_equal(e[0], e[1])

    def test_zero_vector_raises(self):
        with pytest.raises(ValueError):
            embed_patches(model.zero_params(4, 8), np.zeros((3, 8, 8)))


class TestBatchLoss:
    def _inputs(self, seed=0):
        rng = Rng(seed)
        images = rng.uniform(size=(2, 3, 16, 16))
        logits = np.zeros((2, 3, 16, 16))
        logits[:, 0, :8] = 4
        logits[:, 1, 8:, :8] = 4
        logits[:, 2, 8:, 8:] = 4
        return images, confidence_maps(logits + 0.3 * rng.normal(logits.shape))

    def test_runs_and_finite(self):
        images, conf = self._inputs()
        params = model.init_params(Rng(0), 3, 8)
        step = plgcl_batch_loss(params, images, conf, PlgclConfig(patch=4, embed_dim=8), 0.5)
        assert math.isfinite(step.loss) and step.loss >= 0
        assert step.classes == [0, 1, 2]
        assert not np.any(step.grads["out.w"])
        assert np.any(step.grads["head.w"])

    def test_insufficient(self):
        images, _ = self._inputs()
        conf = np.zeros((2, 3, 16, 16))
        conf[:, 0] = 1
        with pytest.raises(InsufficientClasses):
            plgcl_batch_loss(model.init_params(Rng(0), 3, 8), images, conf, PlgclConfig(patch=4), 0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PlgclConfig(tau=0)
        with pytest.raises(ValueError):
            PlgclConfig(n_positives=0)
        assert PlgclConfig().lam(0.0) == 0.0 and PlgclConfig().lam(2.0) == 1.0

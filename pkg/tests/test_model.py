import math

import numpy as np
import pytest
import scipy.sparse as sp

import dignn.autodiff as ad
import dignn.model as M
from dignn.errors import DimensionError, GraphLoadError
from dignn.graphdata import BatchSubgraph
from dignn.model import DignnConfig, DignnParams


def small_cfg(**over):
    base = dict(embed_dim=3, hidden_dim=5)
    base.update(over)
    return DignnConfig(**base)


def make_batch(n_nodes=6, b=4, d_in=4, seed=0):
    rng = np.random.default_rng(seed)
    topo = sp.random(b, n_nodes, density=0.4, random_state=seed, format="csr")
    return BatchSubgraph(
        node_ids=np.arange(b),
        features=rng.standard_normal((b, d_in)),
        topo_rows=topo,
        labels=rng.integers(0, 2, b).astype(np.int8),
    )


class TestParams:
    def test_shapes_and_zero_biases(self):
        cfg = small_cfg()
        p = DignnParams.init(6, 4, cfg, seed=0)
        for name, shape in DignnParams.shape_spec(6, 4, cfg):
            assert p[name].value.shape == shape
            if DignnParams.is_bias(name):
                assert np.array_equal(p[name].value, np.zeros(shape))

    def test_init_deterministic(self):
        a = DignnParams.init(6, 4, small_cfg(), seed=3)
        b = DignnParams.init(6, 4, small_cfg(), seed=3)
        for name in a.tensors:
            assert np.array_equal(a[name].value, b[name].value)

    def test_separate_attention_adds_tensors(self):
        shared = DignnParams.init(6, 4, small_cfg(), seed=0)
        split = DignnParams.init(6, 4, small_cfg(shared_attention=False), seed=0)
        assert "att_w_x" not in shared.tensors
        assert {"att_w_x", "att_b_x", "att_q_x"} <= set(split.tensors)

    def test_save_load_roundtrip(self, tmp_path):
        p = DignnParams.init(6, 4, small_cfg(), seed=1)
        path = str(tmp_path / "m.bin")
        p.save(path)
        q = DignnParams.load(path)
        assert list(q.tensors) == list(p.tensors)
        for name in p.tensors:
            assert np.array_equal(q[name].value, p[name].value)
        assert (q.n_nodes, q.feat_dim) == (6, 4)
        assert q.cfg.shared_attention is True

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOTAMODEL")
        with pytest.raises(GraphLoadError, match="not a model file"):
            DignnParams.load(str(path))

    def test_load_rejects_truncation(self, tmp_path):
        p = DignnParams.init(6, 4, small_cfg(), seed=1)
        path = tmp_path / "m.bin"
        p.save(str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-17])
        with pytest.raises(GraphLoadError):
            DignnParams.load(str(path))

    def test_snapshot_restore(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=2)
        snap = p.snapshot()
        p["clf_w"].value[...] += 1.0
        p.restore(snap)
        assert np.array_equal(p["clf_w"].value, snap["clf_w"])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DignnConfig(embed_dim=0).validate()
        with pytest.raises(ValueError):
            DignnConfig(alpha=-0.1).validate()
        with pytest.raises(ValueError):
            DignnConfig(sigma_enc=0.0).validate()


class TestEncodeAndFuse:
    def test_dimension_mismatch_topology(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=0)
        batch = make_batch(n_nodes=7)
        with pytest.raises(DimensionError):
            M.encode_views(p, batch)

    def test_dimension_mismatch_features(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=0)
        batch = make_batch(d_in=9)
        with pytest.raises(DimensionError):
            M.encode_views(p, batch)

    def test_attention_weights_are_convex(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=4)
        batch = make_batch(seed=4)
        z_a, z_x = M.encode_views(p, batch)
        alpha_a, alpha_x, fused = M.attention_fuse(p, z_a, z_x)
        s = alpha_a.value + alpha_x.value
        assert np.allclose(s, 1.0, atol=1e-12)
        assert np.all(alpha_a.value > 0) and np.all(alpha_x.value > 0)

    def test_identical_views_split_evenly_under_shared_attention(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=5)
        z = ad.Var(np.random.default_rng(5).standard_normal((4, 3)))
        alpha_a, alpha_x, fused = M.attention_fuse(p, z, z)
        assert np.allclose(alpha_a.value, 0.5, atol=1e-12)
        assert np.allclose(fused.value, z.value, atol=1e-12)

    def test_fused_is_convex_combination(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=6)
        batch = make_batch(seed=6)
        z_a, z_x = M.encode_views(p, batch)
        alpha_a, alpha_x, fused = M.attention_fuse(p, z_a, z_x)
        manual = alpha_a.value * z_a.value + alpha_x.value * z_x.value
        assert np.allclose(fused.value, manual, atol=1e-12)


class TestForward:
    def test_zero_eps_equals_mean_path(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=7)
        batch = make_batch(seed=7)
        zero = np.zeros((4, 3))
        sampled = M.forward(p, batch, p.cfg, zero, zero)
        mean = M.forward(p, batch, p.cfg)
        assert np.allclose(sampled.logits.value, mean.logits.value, atol=1e-14)

    def test_reconstruction_shapes(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=8)
        batch = make_batch(seed=8)
        out = M.forward(p, batch, p.cfg, with_reconstruction=True)
        assert out.x_A_hat.value.shape == (4, 6)
        assert out.x_X_hat.value.shape == (4, 4)

    def test_predict_tie_goes_to_benign(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=9)
        for name, var in p.tensors.items():
            var.value[...] = 0.0
        batch = make_batch(seed=9)
        preds, scores = M.predict(p, batch, p.cfg)
        assert np.array_equal(preds, np.zeros(4, dtype=np.int64))
        assert np.allclose(scores, 0.5)

    def test_scores_are_class1_probabilities(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=10)
        batch = make_batch(seed=10)
        preds, scores = M.predict(p, batch, p.cfg)
        out = M.forward(p, batch, p.cfg)
        z = out.logits.value
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert np.allclose(scores, probs[:, 1], atol=1e-12)
        assert np.array_equal(preds, (probs[:, 1] > probs[:, 0]).astype(int))


class TestLosses:
    def test_rec_loss_matches_manual_mse(self):
        p = DignnParams.init(6, 4, small_cfg(), seed=11)
        batch = make_batch(seed=11)
        out = M.forward(p, batch, p.cfg, with_reconstruction=True)
        loss = M.rec_loss(batch, out.x_A_hat, out.x_X_hat)
        manual = (np.mean((out.x_A_hat.value - batch.topo_rows.toarray()) ** 2)
                  + np.mean((out.x_X_hat.value - batch.features) ** 2))
        assert loss.value[0, 0] == pytest.approx(manual, abs=1e-12)

    def test_exclusion_unit_value_example(self):
        # With zero noise, unit stds, mu_X = 0 and each ||mu_A_i||^2 = 4 the
        # symmetrized bound is exactly 1 per node.
        n, d = 5, 4
        cfg = small_cfg(embed_dim=d)
        mu_a = ad.Var(np.ones((n, d)))          # row norm^2 = 4
        mu_x = ad.Var(np.zeros((n, d)))
        loss = M.exc_loss(mu_a, mu_x, mu_a, mu_x, cfg)
        assert loss.value[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_exclusion_drop_conditional_changes_value_not_grad(self):
        n, d = 4, 3
        rng = np.random.default_rng(12)
        mu_a_val = rng.standard_normal((n, d))
        mu_x_val = rng.standard_normal((n, d))
        eps_a = rng.standard_normal((n, d))
        eps_x = rng.standard_normal((n, d))
        grads = {}
        for drop in (False, True):
            cfg = small_cfg(embed_dim=d, drop_conditional_terms=drop)
            mu_a, mu_x = ad.Var(mu_a_val), ad.Var(mu_x_val)
            z_a = M.reparameterize(mu_a, 1.0, eps_a)
            z_x = M.reparameterize(mu_x, 1.0, eps_x)
            ad.backward(M.exc_loss(mu_a, mu_x, z_a, z_x, cfg))
            grads[drop] = (mu_a.grad.copy(), mu_x.grad.copy())
        assert np.allclose(grads[False][0], grads[True][0], atol=1e-12)
        assert np.allclose(grads[False][1], grads[True][1], atol=1e-12)

    def test_exclusion_drop_conditional_value(self):
        n, d = 5, 4
        cfg = small_cfg(embed_dim=d, drop_conditional_terms=True)
        mu_a = ad.Var(np.ones((n, d)))
        mu_x = ad.Var(np.zeros((n, d)))
        loss = M.exc_loss(mu_a, mu_x, mu_a, mu_x, cfg)
        # -(prior_a + prior_x)/2 = (d log(2 pi) + 2) / 2
        expected = 0.5 * (d * math.log(2 * math.pi) + 2.0)
        assert loss.value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_total_loss_weighting(self):
        cfg = small_cfg(alpha=0.05, beta=0.8)
        ce = ad.Var([[1.0]])
        rec = ad.Var([[2.0]])
        exc = ad.Var([[3.0]])
        loss = M.total_loss(ce, rec, exc, cfg)
        assert loss.value[0, 0] == pytest.approx(1.0 + 0.05 * 2 + 0.8 * 3, abs=1e-14)

    def test_reparameterize_gradient_is_identity(self):
        mu = ad.Var(np.zeros((2, 3)))
        z = M.reparameterize(mu, 2.0, np.ones((2, 3)))
        assert np.allclose(z.value, 2.0)
        ad.backward(ad.sum_all(z))
        assert np.array_equal(mu.grad, np.ones((2, 3)))

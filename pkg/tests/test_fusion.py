import math
import struct
from dataclasses import replace

import numpy as np
import pytest

from fusionlab.dataio import Corpus
from fusionlab.exceptions import ConfigError, ContractError, FormatError, ModalityError, ShapeError
from fusionlab.fusion import (
    MAGIC,
    ArchConfig,
    backward,
    batch_loss,
    buffer_shapes,
    forward,
    gradient_check,
    init_model,
    load_model,
    model_from_bytes,
    model_to_bytes,
    n_parameters,
    parameter_shapes,
    predict,
    predict_arrays,
    relative_error,
    save_model,
)
from fusionlab.numcore import SeededRng, finite_diff_grad

from oracles import fusion_forward_eval

TINY = ArchConfig(d_T=3, d_I=2, d=8, n_layers=1, n_heads=2, dropout=0.0)


def randomised(cfg, seed=0):
    """Model with every tensor (including BN buffers) away from its init value."""
    m = init_model(cfg, SeededRng(seed))
    r = SeededRng(seed).spawn("jitter")
    for k, v in m.params.items():
        if v.ndim == 1:
            m.params[k] = (1.0 if k.endswith("gamma") else 0.0) + r.normal(v.shape, 0, 0.2)
    for k, v in m.buffers.items():
        m.buffers[k] = r.uniform(v.shape, 0.5, 1.5) if k.endswith("_var") else r.normal(v.shape, 0, 0.2)
    return m


def zero_model(cfg):
    m = init_model(cfg, SeededRng(0))
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


def batch(cfg, n, seed=1):
    r = SeededRng(seed)
    return r.normal((n, cfg.d_T)), r.normal((n, cfg.d_I))


class TestConfig:
    def test_defaults(self):
        c = ArchConfig()
        assert (c.d, c.n_layers, c.n_heads, c.ff_mult, c.dropout) == (1024, 4, 16, 4, 0.2)
        assert c.d_k == 64 and c.d_ff == 4096 and c.d_q == 256

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ArchConfig(d=10, n_heads=3)

    @pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(dropout=-0.1), dict(d=0), dict(n_classes=4)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ArchConfig(**kw)

    def test_desk(self):
        c = ArchConfig.desk(8, 8)
        assert (c.d, c.n_layers, c.n_heads) == (32, 2, 4)


class TestInit:
    def test_hand_count(self):
        # projections 5*8 + 2*(8+8+8) = 88; layer 4*64 + 8*32 + 32 + 32*8 + 8 + 4*8 = 840;
        # head 16*8 + 8 + 16 + 8*2 + 2 + 4 + 2*3 + 3 = 183
        assert n_parameters(TINY) == 1111
        assert init_model(TINY, SeededRng(0)).n_parameters() == 1111

    def test_closed_form_matches_shapes(self):
        for cfg in (ArchConfig.desk(8, 8), ArchConfig(d_T=5, d_I=7, d=12, n_layers=3, n_heads=3)):
            assert n_parameters(cfg) == sum(math.prod(s) for _, s in parameter_shapes(cfg))

    def test_deterministic(self):
        a, b = init_model(TINY, SeededRng(3)), init_model(TINY, SeededRng(3))
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        c = init_model(TINY, SeededRng(4))
        assert not np.array_equal(a.params["head.W1"], c.params["head.W1"])

    def test_init_values(self):
        m = init_model(TINY, SeededRng(0))
        assert np.all(m.params["text_proj.b"] == 0) and np.all(m.params["text_proj.bn_gamma"] == 1)
        assert np.all(m.params["layers.0.ln1_beta"] == 0)
        assert np.all(m.buffers["head.bn1_var"] == 1) and np.all(m.buffers["head.bn1_mean"] == 0)
        bound = math.sqrt(6 / (8 + 32))
        assert np.abs(m.params["layers.0.ff_W1"]).max() <= bound
        assert [n for n, _ in buffer_shapes(TINY)][:2] == ["text_proj.bn_mean", "text_proj.bn_var"]


class TestForward:
    def test_zero_network_uniform(self):
        m = zero_model(TINY).eval()
        probs, logits, _ = forward(m, *batch(TINY, 5))
        assert np.all(logits == 0.0)
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)

    def test_attention_rows(self):
        cfg = ArchConfig(d_T=3, d_I=2, d=8, n_layers=2, n_heads=2, dropout=0.2)
        m = init_model(cfg, SeededRng(1))
        _, _, cache = forward(m, *batch(cfg, 6), rng=SeededRng(2))
        for A in cache.attention:
            assert A.shape == (6, 2, 2, 2)
            np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-6)

    def test_independent_oracle(self):
        m = randomised(TINY, seed=5).eval()
        xt, xi = batch(TINY, 4, seed=6)
        probs, _, _ = forward(m, xt, xi)
        for j in range(4):
            ref = fusion_forward_eval(m.params, m.buffers, 1, 2, xt[j], xi[j])
            np.testing.assert_allclose(probs[j], ref, atol=1e-10)

    def test_independent_oracle_two_layers(self):
        cfg = ArchConfig(d_T=4, d_I=3, d=8, n_layers=2, n_heads=4, ff_mult=2, dropout=0.0)
        m = randomised(cfg, seed=7).eval()
        xt, xi = batch(cfg, 2, seed=8)
        probs, _, _ = forward(m, xt, xi)
        for j in range(2):
            np.testing.assert_allclose(probs[j], fusion_forward_eval(m.params, m.buffers, 2, 4, xt[j], xi[j]), atol=1e-10)

    def test_train_mode_needs_two(self):
        m = init_model(TINY, SeededRng(0))
        with pytest.raises(ShapeError):
            forward(m, *batch(TINY, 1))
        forward(m.eval(), *batch(TINY, 1))

    def test_shape_errors(self):
        m = init_model(TINY, SeededRng(0)).eval()
        with pytest.raises(ShapeError):
            forward(m, np.ones((2, 4)), np.ones((2, 2)))
        with pytest.raises(ShapeError):
            forward(m, np.ones((2, 3)), np.ones((3, 2)))
        with pytest.raises(ShapeError):
            forward(m, np.ones((0, 3)), np.ones((0, 2)))

    def test_simplex_and_eval_determinism(self):
        m = randomised(ArchConfig.desk(4, 4), 2).eval()
        xt, xi = SeededRng(3).normal((50, 4)) * 5, SeededRng(4).normal((50, 4)) * 5
        p1, _, _ = forward(m, xt, xi)
        p2, _, _ = forward(m, xt, xi)
        assert np.array_equal(p1, p2)
        assert np.all(p1 >= 0)
        np.testing.assert_allclose(p1.sum(axis=1), 1.0, atol=1e-9)

    def test_batch_permutation_equivariance(self):
        cfg = replace(ArchConfig.desk(4, 4), dropout=0.0)
        m = randomised(cfg, 2)
        xt, xi = batch(cfg, 7, seed=9)
        perm = SeededRng(1).permutation(7)
        for mode in ("train", "eval"):
            getattr(m, mode)()
            a, _, _ = forward(m, xt, xi, update_stats=False)
            b, _, _ = forward(m, xt[perm], xi[perm], update_stats=False)
            np.testing.assert_allclose(a[perm], b, atol=1e-12)

    def test_not_symmetric_in_modalities(self):
        cfg = ArchConfig.desk(4, 4)
        m = randomised(cfg, 1).eval()
        xt, xi = batch(cfg, 5)
        a, _, _ = forward(m, xt, xi)
        b, _, _ = forward(m, xi, xt)
        assert np.abs(a - b).max() > 1e-6

    def test_running_stats_update(self):
        m = init_model(TINY, SeededRng(0))
        xt, xi = batch(TINY, 8)
        forward(m, xt, xi)
        z = xt @ m.params["text_proj.W"]
        np.testing.assert_allclose(m.buffers["text_proj.bn_mean"], 0.1 * z.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(m.buffers["text_proj.bn_var"], 0.9 + 0.1 * z.var(axis=0, ddof=1), atol=1e-12)

    def test_dropout_only_in_train(self):
        cfg = replace(TINY, dropout=0.5)
        m = init_model(cfg, SeededRng(0))
        xt, xi = batch(cfg, 4)
        a, _, _ = forward(m, xt, xi, rng=SeededRng(1), update_stats=False)
        b, _, _ = forward(m, xt, xi, rng=SeededRng(2), update_stats=False)
        assert not np.allclose(a, b)
        m.eval()
        assert np.array_equal(forward(m, xt, xi)[0], forward(m, xt, xi)[0])


class TestBackward:
    def test_zero_network_dlogits(self):
        m = zero_model(TINY)
        xt, xi = batch(TINY, 4)
        _, _, cache = forward(m, xt, xi, update_stats=False)
        for k in (1, 2, 3):
            _, _, cache = forward(m, xt, xi, update_stats=False)
            g = backward(m, cache, [k] * 4)
            expected = np.full(3, 1 / 3)
            expected[k - 1] -= 1.0
            np.testing.assert_allclose(g["head.b3"], expected, atol=1e-15)

    def test_gradient_keys_in_parameter_order(self):
        m = init_model(TINY, SeededRng(0))
        _, _, cache = forward(m, *batch(TINY, 3))
        g = backward(m, cache, [1, 2, 3])
        assert list(g) == [n for n, _ in parameter_shapes(TINY)]
        assert all(g[k].shape == m.params[k].shape for k in g)

    def test_duplicated_batch_same_gradient(self):
        cfg = ArchConfig(d_T=3, d_I=2, d=8, n_layers=2, n_heads=2, dropout=0.0)
        m = randomised(cfg, 3)
        xt, xi = batch(cfg, 4)
        y = [1, 2, 3, 2]
        _, _, c1 = forward(m, xt, xi, update_stats=False)
        g1 = backward(m, c1, y)
        _, _, c2 = forward(m, np.vstack([xt, xt]), np.vstack([xi, xi]), update_stats=False)
        g2 = backward(m, c2, y + y)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-10)

    def test_cache_contract(self):
        m = init_model(TINY, SeededRng(0))
        _, _, cache = forward(m, *batch(TINY, 3))
        with pytest.raises(ContractError):
            backward(m, cache, [1, 2])
        backward(m, cache, [1, 2, 3])
        with pytest.raises(ContractError):
            backward(m, cache, [1, 2, 3])
        m.eval()
        _, _, cache = forward(m, *batch(TINY, 3))
        with pytest.raises(ContractError):
            backward(m, cache, [1, 2, 3])

    def test_bad_labels(self):
        m = init_model(TINY, SeededRng(0))
        _, _, cache = forward(m, *batch(TINY, 2))
        with pytest.raises(ValueError):
            backward(m, cache, [0, 4])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck_d16(self, seed):
        cfg = ArchConfig(d_T=5, d_I=4, d=16, n_layers=2, n_heads=4, dropout=0.0)
        errors = gradient_check(cfg, batch_size=4, seed=seed, frozen_bn=True)
        assert len(errors) == len(parameter_shapes(cfg))
        assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])

    def test_gradcheck_batch_statistics(self):
        cfg = ArchConfig(d_T=3, d_I=3, d=8, n_layers=1, n_heads=2, dropout=0.0)
        errors = gradient_check(cfg, batch_size=5, seed=4, frozen_bn=False)
        assert max(errors.values()) < 1e-4

    def test_gradcheck_detects_tampering(self):
        errors = gradient_check(TINY, batch_size=3, seed=0, perturb="layers.0.Wq")
        assert errors["layers.0.Wq"] > 1e-4
        assert max(v for k, v in errors.items() if k != "layers.0.Wq") < 1e-4

    def test_weighted_gradient_matches_weighted_loss(self):
        cfg = replace(TINY, dropout=0.0)
        m = randomised(cfg, 1)
        xt, xi = batch(cfg, 4)
        y = np.array([1, 3, 2, 3])
        w = np.array([0.1, 0.4, 0.2, 0.3])
        _, _, cache = forward(m, xt, xi, frozen_bn=True)
        g = backward(m, cache, y, sample_weight=w)

        def loss(theta):
            m.params["head.W2"] = theta.reshape(m.params["head.W2"].shape)
            _, logits, _ = forward(m, xt, xi, frozen_bn=True)
            z = logits - logits.max(axis=1, keepdims=True)
            ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(4), y - 1]
            return float(w @ ce)

        orig = m.params["head.W2"].copy()
        num = finite_diff_grad(loss, orig)
        m.params["head.W2"] = orig
        assert relative_error(g["head.W2"].ravel(), num).max() < 1e-5

    def test_batch_loss_uniform(self):
        m = zero_model(TINY)
        assert abs(batch_loss(m, *batch(TINY, 3), [1, 2, 3], frozen_bn=True) - math.log(3)) < 1e-12


class TestPredict:
    def corpus(self, n=6, image=True):
        r = SeededRng(0)
        img = r.normal((n, 2)) if image else np.full((n, 2), np.nan)
        return Corpus(tuple(f"x{k}" for k in range(n)), [1] * n, r.normal((n, 3)), img)

    def test_zero_model_ties_to_class_one(self):
        labels, probs = predict(zero_model(TINY).eval(), self.corpus())
        assert labels.tolist() == [1] * 6
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_composition_oracle(self):
        m = randomised(TINY, 4).eval()
        c = self.corpus(9)
        labels, probs = predict(m, c)
        p, _, _ = forward(m, c.text, c.image)
        assert np.array_equal(probs, p)
        assert np.array_equal(labels, np.argmax(p, axis=1) + 1)

    def test_chunking_consistent(self):
        m = randomised(TINY, 4).eval()
        c = self.corpus(9)
        np.testing.assert_allclose(predict_arrays(m, c.text, c.image, chunk=2), predict_arrays(m, c.text, c.image), atol=1e-15)

    def test_missing_image(self):
        with pytest.raises(ModalityError):
            predict(init_model(TINY, SeededRng(0)).eval(), self.corpus(image=False))

    def test_requires_eval(self):
        with pytest.raises(ContractError):
            predict(init_model(TINY, SeededRng(0)), self.corpus())


class TestModelFile:
    def test_round_trip_bitwise(self, tmp_path):
        m = randomised(ArchConfig.desk(4, 3), 2)
        p = tmp_path / "m.bin"
        save_model(m, p)
        back = load_model(p)
        assert back.cfg == m.cfg and back.mode == "eval"
        for k in m.params:
            assert m.params[k].tobytes() == back.params[k].tobytes()
        for k in m.buffers:
            assert m.buffers[k].tobytes() == back.buffers[k].tobytes()
        assert model_to_bytes(back) == p.read_bytes()

    def test_header_layout(self):
        data = model_to_bytes(init_model(TINY, SeededRng(0)))
        assert data[:8] == MAGIC
        assert struct.unpack("<I", data[8:12])[0] == 1
        assert struct.unpack("<7Id", data[12:48]) == (3, 2, 8, 1, 2, 4, 3, 0.0)
        # payload: every parameter and buffer as f64
        n_values = n_parameters(TINY) + sum(math.prod(s) for _, s in buffer_shapes(TINY))
        assert len(data) > 8 * n_values

    def test_truncated(self):
        data = model_to_bytes(init_model(TINY, SeededRng(0)))
        for cut in (4, 30, len(data) - 1):
            with pytest.raises(FormatError):
                model_from_bytes(data[:cut])

    def test_bad_magic_version_trailing(self):
        data = bytearray(model_to_bytes(init_model(TINY, SeededRng(0))))
        with pytest.raises(FormatError):
            model_from_bytes(b"X" + bytes(data[1:]))
        bad = bytearray(data)
        bad[8:12] = struct.pack("<I", 9)
        with pytest.raises(FormatError):
            model_from_bytes(bytes(bad))
        with pytest.raises(FormatError):
            model_from_bytes(bytes(data) + b"\x00")

    def test_cfg_mismatch(self):
        data = model_to_bytes(init_model(TINY, SeededRng(0)))
        with pytest.raises(FormatError):
            model_from_bytes(data, expected_cfg=replace(TINY, d_T=4))
        # corrupt header: claims d=12 while tensors are sized for d=8
        bad = bytearray(data)
        bad[12:48] = struct.pack("<7Id", 3, 2, 12, 1, 2, 4, 3, 0.0)
        with pytest.raises(FormatError):
            model_from_bytes(bytes(bad))

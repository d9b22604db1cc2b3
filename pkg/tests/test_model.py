import math

import numpy as np
import pytest

from conftest import toy_config
from unitext import numeric as nm
from unitext.errors import ConfigError, ContractError
from unitext.masking import MaskPlan
from unitext.model import (JointModel, ModelConfig, embed, encode, load_checkpoint, masked_loss,
                           no_decay, parameter_shapes, save_checkpoint, tmlm_logits, tmlm_loss)
from unitext.numeric import GradTape, Tensor
from unitext.sequence import SPEECH, TEXT, TokenSequence


# ---------------------------------------------------------------------------
# loop-based reference encoder, written from the block definition
# ---------------------------------------------------------------------------


def ref_layer_norm(v, gain, bias, eps):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + eps) * g + b for a, g, b in zip(v, gain, bias)]


def ref_linear(v, w, b):
    return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]


def ref_gelu(a):
    return 0.5 * a * (1 + math.erf(a / math.sqrt(2)))


def ref_encode(x, p, cfg):
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    z = [list(row) for row in x]
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        normed = [ref_layer_norm(v, p[pre + "ln1.gain"], p[pre + "ln1.bias"], cfg.ln_eps) for v in z]
        q = [ref_linear(v, p[pre + "attn.q.w"], p[pre + "attn.q.b"]) for v in normed]
        k = [ref_linear(v, p[pre + "attn.k.w"], p[pre + "attn.k.b"]) for v in normed]
        val = [ref_linear(v, p[pre + "attn.v.w"], p[pre + "attn.v.b"]) for v in normed]
        mixed = []
        for t in range(len(z)):
            out = [0.0] * d
            for head in range(h):
                sl = slice(head * dh, (head + 1) * dh)
                scores = [sum(a * b for a, b in zip(q[t][sl], k[s][sl])) / math.sqrt(dh) for s in range(len(z))]
                top = max(scores)
                w = [math.exp(s - top) for s in scores]
                total = sum(w)
                for s in range(len(z)):
                    for i, vv in enumerate(val[s][sl]):
                        out[head * dh + i] += w[s] / total * vv
            mixed.append(out)
        attn = [ref_linear(v, p[pre + "attn.o.w"], p[pre + "attn.o.b"]) for v in mixed]
        zhat = [[a + b for a, b in zip(u, v)] for u, v in zip(attn, z)]
        new = []
        for v in zhat:
            n2 = ref_layer_norm(v, p[pre + "ln2.gain"], p[pre + "ln2.bias"], cfg.ln_eps)
            if cfg.strict_equation:
                n2 = [a + b for a, b in zip(n2, v)]
            hidden = [ref_gelu(a) for a in ref_linear(n2, p[pre + "mlp.fc1.w"], p[pre + "mlp.fc1.b"])]
            y = ref_linear(hidden, p[pre + "mlp.fc2.w"], p[pre + "mlp.fc2.b"])
            new.append(y if cfg.strict_equation else [a + b for a, b in zip(y, v)])
        z = new
    if cfg.final_ln and cfg.n_layers:
        z = [ref_layer_norm(v, p["final_ln.gain"], p["final_ln.bias"], cfg.ln_eps) for v in z]
    return np.array(z)


def randomized(cfg, seed=0):
    """Model with non-trivial LN params and biases so the reference test sees them."""
    r = np.random.default_rng(seed)
    params = {k: r.normal(0, 0.3, size=s) + (1.0 if k.endswith(".gain") else 0.0)
              for k, s in parameter_shapes(cfg).items()}
    return JointModel(cfg, params)


def as_lists(model):
    return {k: v.data.tolist() for k, v in model.params.items()}


class TestEncoderReference:
    @pytest.mark.parametrize("strict", [False, True])
    def test_matches_loop_reference(self, strict):
        cfg = toy_config(strict_equation=strict)
        model = randomized(cfg, 1)
        x = np.random.default_rng(2).normal(size=(6, cfg.d_model))
        got = encode(Tensor(x), model).hidden.data
        np.testing.assert_allclose(got, ref_encode(x, as_lists(model), cfg), atol=1e-6)

    def test_without_final_ln(self):
        cfg = toy_config(final_ln=False)
        model = randomized(cfg, 4)
        x = np.random.default_rng(5).normal(size=(4, cfg.d_model))
        np.testing.assert_allclose(encode(Tensor(x), model).hidden.data,
                                   ref_encode(x, as_lists(model), cfg), atol=1e-6)

    def test_zero_layers_is_identity(self, rng):
        model = JointModel.initialize(toy_config(n_layers=0))
        x = rng.normal(size=(5, 16))
        np.testing.assert_array_equal(encode(Tensor(x), model).hidden.data, x)

    def test_single_token_attention_is_value_projection(self, rng):
        from unitext.model import attention
        model = randomized(toy_config(), 3)
        x = rng.normal(size=(1, 1, 16))
        out = attention(Tensor(x), model, "blocks.0.attn", None).data[0, 0]
        v = x[0, 0] @ model["blocks.0.attn.v.w"].data + model["blocks.0.attn.v.b"].data
        expect = v @ model["blocks.0.attn.o.w"].data + model["blocks.0.attn.o.b"].data
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_shape_preserved_and_layers_kept(self, rng, toy_model):
        out = encode(Tensor(rng.normal(size=(7, 16))), toy_model, keep_layers=True)
        assert out.hidden.shape == (7, 16)
        assert [z.shape for z in out.layers] == [(7, 16)] * 2

    def test_padding_does_not_leak(self, rng, toy_model):
        x = rng.normal(size=(5, 16))
        alone = encode(Tensor(x), toy_model).hidden.data
        padded = np.concatenate([x, rng.normal(size=(3, 16))])[None]
        key_mask = np.array([[True] * 5 + [False] * 3])
        batched = encode(Tensor(padded), toy_model, key_mask).hidden.data[0, :5]
        np.testing.assert_allclose(batched, alone, atol=1e-12)

    def test_permutation_covariance_without_positions(self, rng, toy_model):
        x = rng.normal(size=(6, 16))
        perm = rng.permutation(6)
        a = encode(Tensor(x), toy_model).hidden.data
        b = encode(Tensor(x[perm]), toy_model).hidden.data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_encoder_has_no_modality_branch(self, toy_model):
        # copy the speech rows into the text tables: same inputs, same outputs
        toy_model["V"].data[:] = toy_model["U"].data[:21]
        toy_model["V_pos"].data[:] = toy_model["U_pos"].data
        ids = [3, 1, 4, 1, 5]
        s = encode(embed(ids, toy_model, SPEECH), toy_model).hidden.data
        t = encode(embed(ids, toy_model, TEXT), toy_model).hidden.data
        np.testing.assert_array_equal(s, t)


class TestEmbed:
    def test_single_token(self, toy_model):
        got = embed(TokenSequence("u", SPEECH, [3]), toy_model).data
        np.testing.assert_array_equal(got[0], toy_model["U"].data[3] + toy_model["U_pos"].data[0])

    def test_empty(self, toy_model):
        assert embed(TokenSequence("u", TEXT, []), toy_model).shape == (0, 16)

    def test_modalities_differ(self, toy_model):
        a = embed([1, 2, 3], toy_model, SPEECH).data
        b = embed([1, 2, 3], toy_model, TEXT).data
        assert not np.allclose(a, b)

    def test_mask_id_is_valid_input(self, toy_model):
        assert embed([toy_model.mask_id(SPEECH)], toy_model, SPEECH).shape == (1, 16)

    def test_too_long(self, toy_model):
        with pytest.raises(ContractError):
            embed(np.zeros(13, int), toy_model, SPEECH)


class TestHead:
    def test_logits_bounded_and_rows_normalise(self, rng, toy_model):
        logits = tmlm_logits(Tensor(rng.normal(size=(9, 16)) * 30), toy_model, TEXT)
        assert logits.shape == (9, 20)
        assert np.abs(logits.data).max() <= 10 + 1e-12
        p = nm.softmax_rows(logits).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_scale_invariance(self, rng, toy_model):
        h = rng.normal(size=(4, 16))
        a = tmlm_logits(Tensor(h), toy_model, SPEECH).data
        b = tmlm_logits(Tensor(h * 37.5), toy_model, SPEECH).data
        assert np.abs(a - b).max() <= 1e-9

    def test_constructed_argmax(self, toy_model):
        w = toy_model["head.W"].data
        target = toy_model["U"].data[5]
        h = np.linalg.solve(w.T, target)
        logits = tmlm_logits(Tensor(h[None]), toy_model, SPEECH).data
        assert logits.argmax() == 5 and abs(logits[0, 5] - 10.0) < 1e-9

    def test_mask_row_not_a_candidate(self, toy_model):
        w = toy_model["head.W"].data
        h = np.linalg.solve(w.T, toy_model["U"].data[20])
        assert tmlm_logits(Tensor(h[None]), toy_model, SPEECH).shape == (1, 20)


class TestLoss:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((4, 500)))
        plan = MaskPlan(4, np.array([0, 2]), np.array([7, 9]))
        assert abs(float(tmlm_loss(logits, plan).value.data) - math.log(500)) < 1e-12

    def test_confident_logits(self):
        logits = np.full((3, 10), -50.0)
        logits[np.arange(3), [1, 2, 3]] = 50.0
        plan = MaskPlan(3, np.arange(3), np.array([1, 2, 3]))
        assert float(tmlm_loss(Tensor(logits), plan).value.data) < 1e-30

    def test_empty_plan_flagged(self):
        loss = tmlm_loss(Tensor(np.zeros((3, 4))), MaskPlan(3, np.zeros(0, int), np.zeros(0, int)))
        assert loss.empty and float(loss.value.data) == 0.0

    def test_missing_targets(self):
        with pytest.raises(ContractError):
            tmlm_loss(Tensor(np.zeros((3, 4))), MaskPlan(3, np.array([1])))

    def test_unmasked_rows_do_not_matter(self, rng):
        logits = rng.normal(size=(6, 5))
        plan = MaskPlan(6, np.array([1, 4]), np.array([0, 3]))
        base = float(tmlm_loss(Tensor(logits), plan).value.data)
        logits[[0, 2, 3, 5]] += rng.normal(size=(4, 5)) * 100
        assert float(tmlm_loss(Tensor(logits), plan).value.data) == base

    def test_masked_loss_gradients_match_finite_differences(self):
        model = JointModel.initialize(toy_config(), 11)
        ids = np.random.default_rng(0).integers(0, 20, size=(1, 12))
        positions, targets = np.array([1, 5, 6, 7]), ids[0, [1, 5, 6, 7]]
        ids[0, positions] = model.mask_id(TEXT)

        def loss_value():
            h = encode(embed(ids, model, TEXT), model).hidden
            return float(masked_loss(h, positions, targets, model, TEXT)[0].value.data)

        with GradTape() as tape:
            h = encode(embed(ids, model, TEXT), model).hidden
            loss = masked_loss(h, positions, targets, model, TEXT)[0].value
        grads = tape.backward(loss, model.parameters())
        for name in ("V", "head.W", "blocks.1.mlp.fc1.w", "blocks.0.ln1.gain"):
            p = model[name]
            num = nm.numerical_gradient(loss_value, p.data, 1e-6)
            err = np.linalg.norm(grads[p] - num) / max(np.linalg.norm(num), np.linalg.norm(grads[p]), 1e-7)
            assert err < 1e-5, name


class TestModelPlumbing:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_tau_positive(self):
        with pytest.raises(ConfigError):
            ModelConfig(tau=0.0)

    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_layers, cfg.tau) == (256, 4, 1024, 6, 0.1)
        shapes = parameter_shapes(cfg)
        assert shapes["U"] == (501, 256) and shapes["V"] == (348, 256)

    def test_no_decay_set(self):
        assert no_decay("U") and no_decay("V_pos") and no_decay("blocks.0.ln1.gain")
        assert no_decay("blocks.3.attn.q.b") and no_decay("final_ln.bias")
        assert not no_decay("blocks.0.attn.q.w") and not no_decay("head.W")

    def test_init_deterministic(self):
        a = JointModel.initialize(toy_config(), 5)
        b = JointModel.initialize(toy_config(), 5)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)

    def test_checkpoint_round_trip_bytes(self, tmp_path, toy_model):
        save_checkpoint(tmp_path / "a.tv2m", toy_model, 42)
        model, step = load_checkpoint(tmp_path / "a.tv2m")
        assert step == 42 and model.config == toy_model.config
        assert all(np.array_equal(model[k].data, toy_model[k].data) for k in model.params)
        save_checkpoint(tmp_path / "b.tv2m", model, 42)
        assert (tmp_path / "a.tv2m").read_bytes() == (tmp_path / "b.tv2m").read_bytes()

    def test_checkpoint_float32(self, tmp_path):
        model = JointModel.initialize(toy_config(dtype="float32"), 1)
        save_checkpoint(tmp_path / "a.tv2m", model)
        back, _ = load_checkpoint(tmp_path / "a.tv2m")
        assert back["U"].dtype == np.float32

    def test_truncated_checkpoint(self, tmp_path, toy_model):
        from unitext.errors import FormatError
        save_checkpoint(tmp_path / "a.tv2m", toy_model)
        raw = (tmp_path / "a.tv2m").read_bytes()
        (tmp_path / "a.tv2m").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.tv2m")

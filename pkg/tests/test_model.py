"""GRU cells, pooling, the convolution bank, the full network, checkpoints."""

import json
import math

import numpy as np
import numpy.testing as npt
import pytest

import iben.autodiff as ad
from iben.autodiff import Tensor
from iben.errors import DataFormatError
from iben.model import (
    BiGru,
    ConvBank,
    GruCell,
    IbenModel,
    ModelConfig,
    bi_gru,
    checkpoint_manifest,
    conv_features,
    gru_forward,
    load_checkpoint,
    pool_states,
    save_checkpoint,
)


def zero_params(obj):
    for p in obj.parameters():
        p.values[...] = 0.0


def brute_cell_step(x, h_prev, cell):
    """Scalar-loop recomputation of the four gate formulas."""
    Wz, Wr, Wh = cell.W_z.values, cell.W_r.values, cell.W_h.values
    Uz, Ur, Uh = cell.U_z.values, cell.U_r.values, cell.U_h.values
    bz = cell.b_z.values if cell.use_bias else np.zeros(cell.hidden_size)
    br = cell.b_r.values if cell.use_bias else np.zeros(cell.hidden_size)
    bh = cell.b_h.values if cell.use_bias else np.zeros(cell.hidden_size)
    H, I = cell.hidden_size, cell.input_size
    out = []
    for i in range(H):
        zi = bz[i] + sum(Wz[i][j] * x[j] for j in range(I)) \
            + sum(Uz[i][j] * h_prev[j] for j in range(H))
        ri = br[i] + sum(Wr[i][j] * x[j] for j in range(I)) \
            + sum(Ur[i][j] * h_prev[j] for j in range(H))
        z = 1.0 / (1.0 + math.exp(-zi))
        r = 1.0 / (1.0 + math.exp(-ri))
        hp = bh[i] + sum(Wh[i][j] * x[j] for j in range(I)) \
            + r * sum(Uh[i][j] * h_prev[j] for j in range(H))
        h_tilde = math.tanh(hp)
        out.append(z * h_prev[i] + (1.0 - z) * h_tilde)
    return np.array(out)


def small_config(**overrides):
    base = dict(fused_width=6, n_pairs=3, emb_dim=5, hidden_size=4,
                dense_size=3, kernel_sizes=(1, 2), filters_per_kernel=2,
                seed=1)
    base.update(overrides)
    return ModelConfig(**base)


class TestGruCellStep:
    def test_zero_params_zero_state(self):
        cell = GruCell(3, 2, "c", np.random.default_rng(0))
        zero_params(cell)
        h = cell.step(Tensor(np.zeros(3)), Tensor(np.zeros(2)))
        npt.assert_array_equal(h.values, np.zeros(2))

    def test_zero_params_halve_the_state(self):
        """z = r = 0.5 and a zero candidate leave h = h_prev / 2."""
        cell = GruCell(3, 4, "c", np.random.default_rng(0))
        zero_params(cell)
        h_prev = np.array([0.8, -0.4, 0.0, 1.0])
        h = cell.step(Tensor(np.zeros(3)), Tensor(h_prev))
        npt.assert_allclose(h.values, 0.5 * h_prev, atol=1e-15)

    def test_matches_scalar_loop_on_random_cells(self):
        rng = np.random.default_rng(42)
        for _ in range(120):
            cell = GruCell(3, 2, "c", rng)
            cell.b_z.values[...] = rng.normal(size=2)
            cell.b_r.values[...] = rng.normal(size=2)
            cell.b_h.values[...] = rng.normal(size=2)
            x = rng.normal(size=3)
            h_prev = rng.normal(size=2)
            got = cell.step(Tensor(x), Tensor(h_prev)).values
            want = brute_cell_step(x, h_prev, cell)
            npt.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_shape_mismatch_raises(self):
        cell = GruCell(3, 2, "c", np.random.default_rng(0))
        with pytest.raises(ad.ShapeError):
            cell.step(Tensor(np.zeros(5)), Tensor(np.zeros(2)))

    def test_no_bias_variant_has_six_parameters(self):
        cell = GruCell(3, 2, "c", np.random.default_rng(0), use_bias=False)
        assert len(cell.parameters()) == 6
        h = cell.step(Tensor(np.ones(3)), Tensor(np.zeros(2)))
        npt.assert_allclose(h.values, brute_cell_step(np.ones(3), np.zeros(2), cell),
                            atol=1e-12)


class TestGruForward:
    def test_single_step_sequence(self):
        rng = np.random.default_rng(1)
        cell = GruCell(3, 2, "c", rng)
        x = rng.normal(size=(1, 3))
        states = gru_forward(Tensor(x), cell)
        one = cell.step(Tensor(x[0]), Tensor(np.zeros(2)))
        npt.assert_array_equal(states.values[0], one.values)

    def test_zero_params_decay_h0_geometrically(self):
        cell = GruCell(2, 3, "c", np.random.default_rng(0))
        zero_params(cell)
        h0 = np.array([1.0, -0.5, 0.25])
        states = gru_forward(Tensor(np.zeros((4, 2))), cell, h0=Tensor(h0))
        for t in range(4):
            npt.assert_allclose(states.values[t], 0.5 ** (t + 1) * h0, atol=1e-15)

    def test_matches_unrolled_three_steps(self):
        rng = np.random.default_rng(2)
        cell = GruCell(3, 2, "c", rng)
        seq = rng.normal(size=(3, 3))
        states = gru_forward(Tensor(seq), cell).values
        h = np.zeros(2)
        for t in range(3):
            h = brute_cell_step(seq[t], h, cell)
            npt.assert_allclose(states[t], h, atol=1e-12)

    def test_boundedness(self):
        """Each step is a convex mix of h_prev and a tanh value."""
        rng = np.random.default_rng(3)
        for _ in range(10):
            cell = GruCell(4, 3, "c", rng)
            for p in cell.parameters():
                p.values[...] = rng.normal(scale=2.0, size=p.shape)
            h0 = rng.uniform(-1, 1, 3)
            seq = rng.normal(scale=3.0, size=(6, 4))
            states = gru_forward(Tensor(seq), cell, h0=Tensor(h0)).values
            bound = max(np.abs(h0).max(), 1.0)
            assert np.all(np.abs(states) <= bound + 1e-12)


class TestBiGru:
    def test_backward_half_is_a_reversed_forward_run(self):
        rng = np.random.default_rng(4)
        bg = BiGru(3, 2, "bg", rng)
        seq = rng.normal(size=(5, 3))
        out = bi_gru(Tensor(seq), bg).values
        rev_run = gru_forward(Tensor(seq[::-1].copy()), bg.bwd).values
        npt.assert_array_equal(out[:, 2:], rev_run[::-1])

    def test_palindrome_with_tied_cells_is_symmetric(self):
        rng = np.random.default_rng(5)
        bg = BiGru(3, 2, "bg", rng)
        for src, dst in zip(bg.fwd.parameters(), bg.bwd.parameters()):
            dst.values[...] = src.values
        row = rng.normal(size=3)
        mid = rng.normal(size=3)
        seq = np.stack([row, mid, row])
        out = bi_gru(Tensor(seq), bg).values
        for t in range(3):
            npt.assert_array_equal(out[t, :2], out[2 - t, 2:])

    def test_zero_params_zero_output(self):
        bg = BiGru(3, 2, "bg", np.random.default_rng(6))
        zero_params(bg)
        out = bi_gru(Tensor(np.random.default_rng(7).normal(size=(4, 3))), bg)
        npt.assert_array_equal(out.values, np.zeros((4, 4)))

    def test_output_width_doubles_hidden(self):
        bg = BiGru(3, 5, "bg", np.random.default_rng(8))
        out = bi_gru(Tensor(np.zeros((2, 3))), bg)
        assert out.shape == (2, 10)


class TestPoolStates:
    def test_single_row_duplicates(self):
        row = np.array([[1.0, -2.0, 0.5, 3.0]])
        pooled = pool_states(Tensor(row)).values
        npt.assert_array_equal(pooled, np.concatenate([row[0], row[0]]))

    def test_constant_rows(self):
        states = np.tile([2.0, -1.0], (5, 1))
        pooled = pool_states(Tensor(states)).values
        npt.assert_array_equal(pooled[:2], pooled[2:])

    def test_random_3x4_against_numpy(self):
        rng = np.random.default_rng(9)
        states = rng.normal(size=(3, 4))
        pooled = pool_states(Tensor(states)).values
        npt.assert_allclose(pooled, np.concatenate([states.max(axis=0),
                                                    states.mean(axis=0)]),
                            atol=1e-15)


class TestConvFeatures:
    def make_bank(self, rng, emb_dim=3, sizes=(1, 2, 3, 4), filters=9,
                  random_bias=False):
        bank = ConvBank(emb_dim, sizes, filters, "bank", rng)
        if random_bias:
            for k in sizes:
                bank.biases[k].values[...] = rng.normal(size=filters)
        return bank

    def test_zero_input_zero_bias(self):
        bank = self.make_bank(np.random.default_rng(10))
        out = conv_features(Tensor(np.zeros((6, 3))), bank)
        npt.assert_array_equal(out.values, np.zeros(36))

    def test_single_filter_per_size(self):
        bank = self.make_bank(np.random.default_rng(11), filters=1)
        out = conv_features(Tensor(np.random.default_rng(12).normal(size=(6, 3))), bank)
        assert out.shape == (4,)

    def test_default_bank_yields_36_features(self):
        bank = self.make_bank(np.random.default_rng(13))
        assert bank.total_filters == 36
        out = conv_features(Tensor(np.zeros((5, 3))), bank)
        assert out.shape == (36,)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(14)
        for _ in range(110):
            D = int(rng.integers(1, 4))
            L = int(rng.integers(4, 8))
            filters = int(rng.integers(1, 4))
            bank = self.make_bank(rng, emb_dim=D, filters=filters, random_bias=True)
            x = rng.normal(size=(L, D))
            got = conv_features(Tensor(x), bank).values
            want = []
            for k in bank.kernel_sizes:
                K = bank.kernels[k].values
                b = bank.biases[k].values
                for f in range(filters):
                    best = -math.inf
                    for t in range(L - k + 1):
                        s = b[f] + sum(x[t + j, d] * K[f, j, d]
                                       for j in range(k) for d in range(D))
                        best = max(best, max(s, 0.0))
                    want.append(best)
            npt.assert_allclose(got, np.array(want), atol=1e-12, rtol=0)

    def test_input_shorter_than_largest_kernel(self):
        bank = self.make_bank(np.random.default_rng(15))
        with pytest.raises(ad.ShapeError):
            conv_features(Tensor(np.zeros((3, 3))), bank)


class TestModelConfig:
    def test_requires_a_branch(self):
        with pytest.raises(ValueError, match="branch"):
            small_config(use_bert_branch=False, use_emb_branch=False)

    def test_rejects_unknown_submodel(self):
        with pytest.raises(ValueError, match="emb_submodel"):
            small_config(emb_submodel="lstm")

    def test_rejects_non_positive_widths(self):
        with pytest.raises(ValueError, match="hidden_size"):
            small_config(hidden_size=0)

    def test_rejects_empty_kernel_sizes(self):
        with pytest.raises(ValueError, match="kernel"):
            small_config(kernel_sizes=())


class TestForward:
    def inputs(self, config, seed=20):
        rng = np.random.default_rng(seed)
        fused = rng.normal(size=(config.n_pairs, config.fused_width))
        emb = rng.normal(size=(max(config.kernel_sizes) + 2, config.emb_dim))
        return fused, emb

    def test_all_zero_weights_predict_zero(self):
        config = small_config()
        model = IbenModel(config)
        zero_params(model)
        fused, emb = self.inputs(config)
        assert model.forward(fused=fused, emb=emb).item() == 0.0

    def test_rnn_only_variant_head_width(self):
        config = small_config(use_bert_branch=False, emb_submodel="bigru")
        model = IbenModel(config)
        assert model.branch_b_conv is None
        assert model.head.W.shape == (1, config.dense_size)
        assert model.dense_b.W.shape == (config.dense_size, 4 * config.hidden_size)
        _, emb = self.inputs(config)
        assert isinstance(model.forward(emb=emb).item(), float)

    def test_cnn_only_variant_dense_width(self):
        config = small_config(use_bert_branch=False, emb_submodel="cnn")
        model = IbenModel(config)
        assert model.branch_b_rnn is None
        n_filters = len(config.kernel_sizes) * config.filters_per_kernel
        assert model.dense_b.W.shape == (config.dense_size, n_filters)

    def test_disabled_branch_input_is_ignored(self):
        config = small_config(use_bert_branch=False)
        model = IbenModel(config)
        fused, emb = self.inputs(config)
        a = model.forward(fused=fused, emb=emb).values
        b = model.forward(fused=fused * 100.0, emb=emb).values
        c = model.forward(emb=emb).values
        npt.assert_array_equal(a, b)
        npt.assert_array_equal(a, c)

    def test_missing_input_for_enabled_branch(self):
        model = IbenModel(small_config())
        fused, emb = self.inputs(small_config())
        with pytest.raises(ValueError, match="fused"):
            model.forward(emb=emb)
        with pytest.raises(ValueError, match="matrix"):
            model.forward(fused=fused)

    def test_wrong_widths_raise(self):
        config = small_config()
        model = IbenModel(config)
        fused, emb = self.inputs(config)
        with pytest.raises(ad.ShapeError):
            model.forward(fused=fused[:, :-1], emb=emb)
        with pytest.raises(ad.ShapeError):
            model.forward(fused=fused, emb=emb[:, :-1])

    def test_learnable_pair_weights_scale_rows(self):
        config = small_config(learn_layer_weights=True)
        model = IbenModel(config)
        names = [p.name for p in model.parameters()]
        assert "layer_weights.alpha_1" in names
        fused, emb = self.inputs(config)
        base = model.forward(fused=fused, emb=emb).item()
        for w in model.layer_weights:
            w.values[...] = 0.0
        zeroed = model.forward(fused=fused, emb=emb).item()
        zero_rows = model.forward(fused=np.zeros_like(fused), emb=emb).item()
        assert zeroed == zero_rows
        assert base != zeroed

    def test_prediction_is_deterministic_across_instances(self):
        config = small_config()
        fused, emb = self.inputs(config)
        a = IbenModel(config).forward(fused=fused, emb=emb).item()
        b = IbenModel(config).forward(fused=fused, emb=emb).item()
        assert a == b

    def test_full_model_gradient_check(self):
        config = small_config(hidden_size=3, emb_dim=4, fused_width=5,
                              n_pairs=3, seed=7)
        model = IbenModel(config)
        rng = np.random.default_rng(23)
        fused = rng.normal(size=(3, 5))
        emb = rng.normal(size=(5, 4))
        err = ad.grad_check(lambda: model.forward(fused=fused, emb=emb),
                            model.parameters())
        assert err <= 1e-4


class TestPredict:
    def test_clamp_bounds_the_output(self):
        config = small_config(use_bert_branch=False, emb_submodel="cnn")
        model = IbenModel(config)
        zero_params(model)
        model.head.b.values[...] = 5.0
        _, emb = TestForward().inputs(config)
        assert model.predict(emb=emb) == 5.0
        assert model.predict(emb=emb, clamp=True) == 3.0
        model.head.b.values[...] = -1.0
        assert model.predict(emb=emb, clamp=True) == 0.0
        model.head.b.values[...] = 1.5
        assert model.predict(emb=emb, clamp=True) == 1.5


class TestCheckpoints:
    def make_model(self, **overrides):
        return IbenModel(small_config(**overrides))

    def test_round_trip_restores_everything(self, tmp_path):
        model = self.make_model()
        rng = np.random.default_rng(30)
        for p in model.parameters():
            p.values[...] = rng.normal(size=p.shape)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.config == model.config
        for orig, rt in zip(model.parameters(), back.parameters()):
            assert rt.name == orig.name
            npt.assert_array_equal(rt.values, orig.values)

    def test_round_trip_preserves_predictions(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        config = model.config
        fused, emb = TestForward().inputs(config)
        assert back.predict(fused=fused, emb=emb) == model.predict(fused=fused, emb=emb)

    def test_same_config_and_seed_write_identical_bytes(self, tmp_path):
        paths = []
        for i in range(2):
            path = tmp_path / f"m{i}.ckpt"
            save_checkpoint(self.make_model(seed=9), path)
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_manifest_round_trip(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        manifest = {"variant": "edited", "max_len": 40}
        save_checkpoint(model, path, manifest=manifest)
        assert checkpoint_manifest(path) == manifest
        load_checkpoint(path)  # manifest does not disturb loading

    def test_manifest_absent_is_none(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.make_model(), path)
        assert checkpoint_manifest(path) is None

    def test_unreadable_header(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"\xff\xfe garbage\n more")
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def tamper(self, tmp_path, mutate):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        header_line, _, blob = path.read_bytes().partition(b"\n")
        header = json.loads(header_line)
        mutate(header)
        path.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)
        return path

    def test_shape_mismatch_detected(self, tmp_path):
        path = self.tamper(tmp_path, lambda h: h["params"][0].__setitem__("shape", [1, 1]))
        with pytest.raises(DataFormatError, match="shape"):
            load_checkpoint(path)

    def test_renamed_parameter_detected(self, tmp_path):
        path = self.tamper(tmp_path, lambda h: h["params"][0].__setitem__("name", "nope"))
        with pytest.raises(DataFormatError, match="does not match"):
            load_checkpoint(path)

    def test_bad_offset_detected(self, tmp_path):
        path = self.tamper(tmp_path, lambda h: h["params"][-1].__setitem__("offset", 10 ** 9))
        with pytest.raises(DataFormatError, match="offset"):
            load_checkpoint(path)

    def test_blob_length_mismatch_detected(self, tmp_path):
        path = self.tamper(tmp_path, lambda h: h.__setitem__("blob_bytes", 3))
        with pytest.raises(DataFormatError, match="blob"):
            load_checkpoint(path)

    def test_unsupported_schema_detected(self, tmp_path):
        path = self.tamper(tmp_path, lambda h: h.__setitem__("schema", 99))
        with pytest.raises(DataFormatError, match="schema"):
            load_checkpoint(path)

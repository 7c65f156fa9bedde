"""Model-level tests: embedding, rotary encoding, biased attention, blocks,
and the composed forward pass."""

import math

import numpy as np
import pytest

from geoagg import autodiff as ad
from geoagg.autodiff import ContractError, Tape, grad_check
from geoagg.model import (
    ModelConfig,
    bind_params,
    biased_attention,
    embed,
    forward,
    forward_batch,
    forward_on_tape,
    induced_block,
    init_params,
    load_params,
    rope2d,
    save_params,
)
from geoagg.spatial import PointRecord


def toy_config(**overrides):
    base = dict(d_model=8, n_heads=2, n_inducing=2, l_max=16, n_layers=1)
    base.update(overrides)
    return ModelConfig(**base)


def toy_params(config, p=2, seed=0, randomize_all=True):
    rng = np.random.default_rng(seed)
    params = init_params(config, p, rng)
    if randomize_all:
        for name, arr in params.arrays.items():
            if not arr.any():
                params.arrays[name] = rng.normal(0.0, 0.3, size=arr.shape)
    return params


def toy_sequence(n, p=2, seed=0, start_id=0):
    rng = np.random.default_rng(seed)
    return [
        PointRecord(start_id + i, float(rng.random()), float(rng.random()),
                    rng.normal(size=p), float(rng.normal()))
        for i in range(n)
    ]


def reference_mha(q, k, v, n_heads):
    """Plain multi-head attention written independently with einsum."""
    nq, d = q.shape
    hd = d // n_heads
    qh = q.reshape(nq, n_heads, hd)
    kh = k.reshape(-1, n_heads, hd)
    vh = v.reshape(-1, n_heads, hd)
    logits = np.einsum("qhd,khd->hqk", qh, kh) / math.sqrt(hd)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    alpha = e / e.sum(axis=-1, keepdims=True)
    return np.einsum("hqk,khd->qhd", alpha, vh).reshape(nq, d)


class TestEmbed:
    def test_zero_weights_give_bias_row(self):
        config = toy_config()
        params = toy_params(config, randomize_all=False)
        params.arrays["embed_w"][:] = 0.0
        params.arrays["embed_b"][:] = np.arange(8.0)
        tape = Tape()
        out = embed(tape, bind_params(tape, params), toy_sequence(5))
        np.testing.assert_allclose(out.value, np.tile(np.arange(8.0), (5, 1)), atol=1e-15)

    def test_permuting_context_permutes_rows(self):
        config = toy_config()
        params = toy_params(config)
        seq = toy_sequence(6)
        tape = Tape()
        base = embed(tape, bind_params(tape, params), seq).value
        perm = [seq[0], seq[3], seq[1], seq[5], seq[2], seq[4]]
        shuffled = embed(tape, bind_params(tape, params), perm).value
        np.testing.assert_array_equal(shuffled[1], base[3])
        np.testing.assert_array_equal(shuffled[4], base[2])

    def test_target_y_is_masked_out(self):
        config = toy_config()
        params = toy_params(config)
        seq = toy_sequence(5)
        changed = [PointRecord(seq[0].id, seq[0].u, seq[0].v, seq[0].x, 999.0)] + seq[1:]
        tape = Tape()
        a = embed(tape, bind_params(tape, params), seq).value
        b = embed(tape, bind_params(tape, params), changed).value
        np.testing.assert_array_equal(a, b)

    def test_covariate_count_mismatch_rejected(self):
        config = toy_config()
        params = toy_params(config, p=2)
        bad = [PointRecord(0, 0.1, 0.2, np.zeros(3), 1.0)]
        tape = Tape()
        with pytest.raises(ContractError, match="covariates"):
            embed(tape, bind_params(tape, params), bad)


class TestRope2d:
    def test_origin_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 8))
        tape = Tape()
        out = rope2d(tape.slot(x), np.zeros((3, 2)), 100.0)
        np.testing.assert_array_equal(out.value, x)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 8))
        coords = rng.random((5, 2)) * 3
        tape = Tape()
        out = rope2d(tape.slot(x), coords, 100.0)
        np.testing.assert_allclose(
            np.linalg.norm(out.value, axis=1), np.linalg.norm(x, axis=1), atol=1e-12
        )

    def test_translation_leaves_logits_unchanged(self):
        """q . k after rotation depends only on coordinate differences."""
        rng = np.random.default_rng(2)
        q = rng.normal(size=(1, 8))
        k = rng.normal(size=(6, 8))
        coords = rng.random((7, 2))
        shift = np.array([0.37, -1.21])

        def logits(cs):
            tape = Tape()
            qr = rope2d(tape.slot(q), cs[0:1], 100.0).value
            kr = rope2d(tape.slot(k), cs[1:], 100.0).value
            return qr @ kr.T

        np.testing.assert_allclose(logits(coords), logits(coords + shift), atol=1e-9)

    def test_odd_pairing_rejected(self):
        tape = Tape()
        with pytest.raises(ContractError, match="divisible by 4"):
            rope2d(tape.slot(np.zeros((2, 6))), np.zeros((2, 2)), 100.0)

    def test_per_head_blocks_match_per_head_application(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 16))
        coords = rng.random((4, 2))
        tape = Tape()
        whole = rope2d(tape.slot(x), coords, 100.0, block=8).value
        left = rope2d(tape.slot(x[:, :8].copy()), coords, 100.0).value
        right = rope2d(tape.slot(x[:, 8:].copy()), coords, 100.0).value
        np.testing.assert_allclose(whole, np.hstack([left, right]), atol=1e-15)


class TestBiasedAttention:
    def _qkv(self, seed=0, nq=3, L=6, d=8):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(nq, d)), rng.normal(size=(L, d)), rng.normal(size=(L, d))

    def test_zero_bias_equals_standard_attention(self):
        q, k, v = self._qkv()
        d2 = np.abs(np.random.default_rng(1).normal(size=(3, 6)))
        tape = Tape()
        out, _ = biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                                  d2, tape.slot(np.zeros((2, 1))), 2)
        np.testing.assert_allclose(out.value, reference_mha(q, k, v, 2), atol=1e-12)

    def test_single_context_token_gets_full_weight(self):
        q, k, v = self._qkv(nq=1, L=1)
        for lam in (0.0, 1.0, 5.0):
            tape = Tape()
            _, trace = biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                                        np.array([[2.0]]),
                                        tape.slot(np.full((2, 1), lam)), 2,
                                        want_trace=True)
            np.testing.assert_array_equal(trace.alpha, np.ones((2, 1, 1)))

    def test_two_tokens_closed_form(self):
        """Equal logits, d2 = (0, 1), lam = 1 gives weights (0.7311, 0.2689)."""
        q = np.zeros((1, 8))
        _, k, v = self._qkv(L=2)
        tape = Tape()
        _, trace = biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                                    np.array([[0.0, 1.0]]),
                                    tape.slot(np.ones((2, 1))), 2, want_trace=True)
        np.testing.assert_allclose(trace.alpha[:, 0, :],
                                   [[0.7311, 0.2689]] * 2, atol=1e-4)

    def test_weight_on_far_point_decreases_with_lambda(self):
        q, k, v = self._qkv(nq=1, L=2, seed=4)
        far_weights = []
        for lam in (0.0, 0.5, 1.0, 2.0):
            tape = Tape()
            _, trace = biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                                        np.array([[0.0, 1.0]]),
                                        tape.slot(np.full((2, 1), lam)), 2,
                                        want_trace=True)
            far_weights.append(trace.alpha[:, 0, 1].copy())
        for prev, nxt in zip(far_weights, far_weights[1:]):
            assert (nxt < prev).all()

    def test_negative_distance_rejected(self):
        q, k, v = self._qkv()
        tape = Tape()
        with pytest.raises(ContractError, match="nonnegative"):
            biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                             np.full((3, 6), -0.5), tape.slot(np.ones((2, 1))), 2)

    def test_rows_sum_to_one(self):
        q, k, v = self._qkv(seed=5)
        d2 = np.abs(np.random.default_rng(6).normal(size=(3, 6)))
        tape = Tape()
        _, trace = biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                                    d2, tape.slot(np.array([[0.3], [2.0]])), 2,
                                    want_trace=True)
        np.testing.assert_allclose(trace.alpha.sum(axis=-1), 1.0, atol=1e-9, rtol=0)

    def test_perturbing_one_lambda_touches_only_that_head(self):
        q, k, v = self._qkv(seed=7)
        d2 = np.abs(np.random.default_rng(8).normal(size=(3, 6)))

        def alphas(lams):
            tape = Tape()
            _, trace = biased_attention(tape.slot(q), tape.slot(k), tape.slot(v),
                                        d2, tape.slot(lams), 2, want_trace=True)
            return trace.alpha

        base = alphas(np.array([[1.0], [1.0]]))
        bumped = alphas(np.array([[1.0], [3.5]]))
        np.testing.assert_array_equal(base[0], bumped[0])
        assert np.abs(base[1] - bumped[1]).max() > 1e-6


class TestInducedBlock:
    def _block(self, config, params, tokens_value, layer=0):
        tape = Tape()
        bound = bind_params(tape, params)
        tokens = tape.slot(tokens_value)
        pref = f"l{layer}."
        return induced_block(
            tokens, bound[pref + "ind"],
            bound[pref + "a.wq"], bound[pref + "a.wk"], bound[pref + "a.wv"],
            bound[pref + "a.wo"],
            bound[pref + "b.wq"], bound[pref + "b.wk"], bound[pref + "b.wv"],
            bound[pref + "b.wo"],
            config.n_heads,
        )

    def test_summary_is_permutation_invariant(self):
        config = toy_config()
        params = toy_params(config)
        rng = np.random.default_rng(9)
        tokens = rng.normal(size=(10, 8))
        s1, _ = self._block(config, params, tokens)
        s2, _ = self._block(config, params, tokens[rng.permutation(10)])
        np.testing.assert_allclose(s1.value, s2.value, atol=1e-9)

    def test_single_inducing_point_is_weighted_mean(self):
        """With m=1 the summary update is one softmax-weighted mean of values."""
        config = toy_config(n_inducing=1)
        params = toy_params(config)
        rng = np.random.default_rng(10)
        tokens = rng.normal(size=(7, 8))
        summary, _ = self._block(config, params, tokens)

        ind = params.arrays["l0.ind"]
        qa = ind @ params.arrays["l0.a.wq"]
        ka = tokens @ params.arrays["l0.a.wk"]
        va = tokens @ params.arrays["l0.a.wv"]
        pooled = reference_mha(qa, ka, va, config.n_heads)
        want = ind + pooled @ params.arrays["l0.a.wo"]
        np.testing.assert_allclose(summary.value, want, atol=1e-12)

    def test_refreshed_context_follows_permutation(self):
        config = toy_config()
        params = toy_params(config)
        rng = np.random.default_rng(11)
        tokens = rng.normal(size=(9, 8))
        perm = rng.permutation(9)
        _, r1 = self._block(config, params, tokens)
        _, r2 = self._block(config, params, tokens[perm])
        np.testing.assert_allclose(r2.value, r1.value[perm], atol=1e-9)

    def test_linear_time_scaling_in_sequence_length(self):
        """Wall time against L fits a line well (the block is O(L m) per call).

        Timed at a width where the length-proportional work dominates call
        overhead; minimum over repetitions filters scheduler noise.
        """
        import time

        config = toy_config(d_model=64, n_heads=4, n_inducing=8, l_max=128)
        params = toy_params(config, seed=1)
        rng = np.random.default_rng(12)
        for _ in range(60):
            self._block(config, params, rng.normal(size=(128, 64)))

        lengths = [16, 32, 64, 128]
        times = []
        for length in lengths:
            tokens = rng.normal(size=(length, 64))
            reps = []
            for _ in range(11):
                t0 = time.perf_counter()
                for _ in range(20):
                    self._block(config, params, tokens)
                reps.append(time.perf_counter() - t0)
            times.append(min(reps))
        slope, intercept = np.polyfit(lengths, times, 1)
        fitted = slope * np.asarray(lengths) + intercept
        ss_res = ((np.asarray(times) - fitted) ** 2).sum()
        ss_tot = ((np.asarray(times) - np.mean(times)) ** 2).sum()
        assert 1 - ss_res / ss_tot >= 0.95


class TestForward:
    def test_target_alone_is_finite(self):
        config = toy_config()
        params = toy_params(config)
        yhat, _ = forward(toy_sequence(1), params, config)
        assert np.isfinite(yhat)

    def test_duplicated_context_shifts_softmax_shares(self):
        """Documented behaviour: duplicating the context is NOT a no-op.

        The target keeps a single sequence slot while every context point
        doubles its softmax share (in the induced summary and in the target
        aggregation), so the prediction moves.  It stays finite and fully
        deterministic; the movement itself is pinned here so a change in this
        behaviour is caught.
        """
        config = toy_config(l_max=32)
        params = toy_params(config)
        seq = toy_sequence(7)
        doubled = seq + seq[1:]
        a, _ = forward(seq, params, config)
        b, _ = forward(doubled, params, config)
        b2, _ = forward(doubled, params, config)
        assert np.isfinite(a) and np.isfinite(b)
        assert b == b2
        assert a != b

    def test_no_target_leakage(self):
        config = toy_config()
        params = toy_params(config)
        seq = toy_sequence(6)
        spoofed = [PointRecord(seq[0].id, seq[0].u, seq[0].v, seq[0].x, -1e6)] + seq[1:]
        a, _ = forward(seq, params, config)
        b, _ = forward(spoofed, params, config)
        assert a == b

    def test_trace_rows_sum_to_one(self):
        config = toy_config()
        params = toy_params(config)
        _, trace = forward(toy_sequence(8), params, config, want_trace=True)
        assert trace.alpha.shape == (2, 1, 8)
        np.testing.assert_allclose(trace.alpha.sum(axis=-1), 1.0, atol=1e-9, rtol=0)

    def test_legacy_single_abf_matches_equal_per_head(self):
        """Shared-factor mode equals per-head mode with all factors equal."""
        per_head = toy_config()
        legacy = toy_config(legacy_single_abf=True)
        params = toy_params(per_head, seed=3)
        params.arrays["agg.lam_raw"] = np.full((2, 1), 0.437)
        params_legacy = params.copy()
        params_legacy.arrays["agg.lam_raw"] = np.full((1, 1), 0.437)
        seq = toy_sequence(9, seed=4)
        a, _ = forward(seq, params, per_head)
        b, _ = forward(seq, params_legacy, legacy)
        assert abs(a - b) < 1e-12

    def test_gradient_matches_finite_differences(self):
        config = toy_config()
        params = toy_params(config, seed=5)
        seq = toy_sequence(8, seed=6)
        y = np.array([[0.321]])
        for name in ("agg.wq", "embed_w", "agg.lam_raw", "l0.ind", "head.w2"):
            saved = params.arrays[name]

            def f(v):
                tape = v.tape
                bound = bind_params(tape, params)
                bound.vars[name] = v
                out, _ = forward_on_tape(tape, bound, seq, config)
                r = ad.sub(out, y)
                return ad.mul(r, r)

            err = grad_check(f, saved)
            assert err < 1e-4, f"{name}: {err:.3e}"

    def test_sequence_longer_than_l_max_rejected(self):
        config = toy_config(l_max=4)
        params = toy_params(config)
        with pytest.raises(ContractError, match="l_max"):
            forward(toy_sequence(6), params, config)

    def test_tape_path_matches_inference_path(self):
        """The recording and plain-numpy forwards compute the same number."""
        for trial, (length, legacy, m, layers) in enumerate(
            [(1, False, 2, 1), (5, False, 1, 1), (9, True, 3, 2), (16, False, 8, 2)]
        ):
            config = ModelConfig(d_model=16, n_heads=4, n_inducing=m, l_max=32,
                                 n_layers=layers, legacy_single_abf=legacy)
            params = toy_params(config, seed=trial)
            seq = toy_sequence(length, seed=trial + 50)
            fast, ft = forward(seq, params, config, want_trace=True)
            tape = Tape()
            out, tt = forward_on_tape(tape, bind_params(tape, params), seq, config,
                                      want_trace=True)
            assert abs(fast - float(out.value[0, 0])) < 1e-12
            np.testing.assert_allclose(ft.alpha, tt.alpha, atol=1e-12, rtol=0)


class TestForwardBatch:
    def _arrays(self, sequences, p):
        n = len(sequences)
        length = len(sequences[0])
        feats = np.zeros((n, length, p + 1))
        coords = np.zeros((n, length, 2))
        for b, seq in enumerate(sequences):
            for i, rec in enumerate(seq):
                feats[b, i, :p] = rec.x
                feats[b, i, p] = rec.y if i > 0 else 0.0
                coords[b, i] = (rec.u, rec.v)
        return feats, coords

    def test_matches_sequential_forward(self):
        for legacy in (False, True):
            config = toy_config(d_model=16, n_heads=4, l_max=16,
                                n_layers=2, legacy_single_abf=legacy)
            params = toy_params(config, seed=9)
            params.norm["x_mean"] = np.array([[0.3, -0.1]])
            params.norm["x_std"] = np.array([[1.4, 0.6]])
            params.norm["y_mean"] = np.array([[0.7]])
            params.norm["y_std"] = np.array([[2.2]])
            sequences = [toy_sequence(10, seed=s) for s in range(7)]
            feats, coords = self._arrays(sequences, 2)
            batched = forward_batch(feats, coords, params, config)
            single = np.array([forward(s, params, config)[0] for s in sequences])
            np.testing.assert_allclose(batched, single, atol=1e-12, rtol=0)

    def test_shape_validation(self):
        config = toy_config()
        params = toy_params(config)
        with pytest.raises(ContractError, match="forward_batch"):
            forward_batch(np.zeros((2, 4, 3)), np.zeros((2, 3, 2)), params, config)
        with pytest.raises(ContractError, match="covariate"):
            forward_batch(np.zeros((2, 4, 5)), np.zeros((2, 4, 2)), params, config)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ContractError, match="divisible"):
            ModelConfig(d_model=30, n_heads=4)

    def test_head_dim_must_be_even(self):
        with pytest.raises(ContractError, match="even"):
            ModelConfig(d_model=12, n_heads=4)

    def test_lambda_init_positive(self):
        with pytest.raises(ContractError):
            ModelConfig(lambda_init=0.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        config = toy_config()
        params = toy_params(config, seed=8)
        path = tmp_path / "model.json"
        save_params(path, params, config, {"epochs": 3})
        back, cfg2, tc = load_params(path)
        assert cfg2 == config
        assert tc == {"epochs": 3}
        for name, arr in params.arrays.items():
            np.testing.assert_array_equal(back.arrays[name], arr)
        for name, arr in params.norm.items():
            np.testing.assert_array_equal(back.norm[name], arr)

    def test_byte_stable(self, tmp_path):
        config = toy_config()
        params = toy_params(config, seed=8)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_params(a, params, config)
        save_params(b, params, config)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "arrays": {}}')
        with pytest.raises(ContractError, match="format"):
            load_params(path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convemo import tensor as T
from convemo.data import Dialog, UtteranceRecord
from convemo.fusion import FusionMode, FusionParams, fuse, fuse_dialog, fuse_sequence, fusion_param_shapes
from convemo.tensor import ShapeError, Var

from conftest import check_all

DIMS = (5, 4, 3)


def make_params(rng, mode, d=6, dims=DIMS, scale=0.5):
    shapes = fusion_param_shapes(FusionMode(mode), d, *dims)
    return FusionParams(FusionMode(mode), **{k: rng.normal(scale=scale, size=s) for k, s in shapes.items()})


def oracle(params, a, t, s):
    """Per-utterance loop straight from the column formulation."""
    cols = [params.W_a @ a, params.W_t @ t]
    if params.mode.uses_speaker:
        cols.append(params.W_s @ s)
    u = np.stack(cols, axis=1)  # d x M
    if not params.mode.uses_attention:
        return u.sum(axis=1), None
    scores = params.w_F[:, 0] @ np.tanh(params.W_F @ u)
    e = np.exp(scores - scores.max())
    alpha = e / e.sum()
    return u @ alpha, alpha


class TestFuse:
    @pytest.mark.parametrize("mode", ["ATS", "AT", "ADD"])
    def test_matches_loop_oracle(self, rng, mode):
        params = make_params(rng, mode)
        for _ in range(5):
            a, t, s = (rng.normal(size=k) for k in DIMS)
            out = fuse(params, a, t, s)
            f, alpha = oracle(params, a, t, s)
            np.testing.assert_allclose(out.fused[:, 0], f, rtol=1e-12, atol=1e-14)
            if alpha is None:
                assert out.attn_weights is None
            else:
                np.testing.assert_allclose(out.attn_weights[0], alpha, rtol=1e-12)

    def test_zero_score_matrix_gives_uniform_weights(self, rng):
        params = make_params(rng, "ATS")
        params.W_F = np.zeros_like(params.W_F)
        a, t, s = (rng.normal(size=k) for k in DIMS)
        out = fuse(params, a, t, s)
        np.testing.assert_allclose(out.attn_weights, [[1 / 3] * 3], atol=1e-15)
        total = params.W_a @ a + params.W_t @ t + params.W_s @ s
        np.testing.assert_allclose(out.fused[:, 0], total / 3, rtol=1e-12)

    def test_uniform_ats_equals_add_over_three(self, rng):
        ats = make_params(rng, "ATS")
        ats.w_F = np.zeros_like(ats.w_F)
        add = FusionParams(FusionMode.ADD, ats.W_a, ats.W_t, ats.W_s)
        a, t, s = (rng.normal(size=k) for k in DIMS)
        np.testing.assert_allclose(fuse(ats, a, t, s).fused, fuse(add, a, t, s).fused / 3, rtol=1e-12)

    def test_single_utterance_dialog(self, rng):
        params = make_params(rng, "ATS")
        dialog = Dialog("one", [UtteranceRecord(*(rng.normal(size=k) for k in DIMS), 0)])
        f, alpha = fuse_dialog(params, dialog)
        assert f.shape == (1, 6) and alpha.shape == (1, 3)

    def test_full_feature_dims(self, rng):
        dims = (6373, 1024, 512)
        params = make_params(rng, "ATS", d=100, dims=dims, scale=0.01)
        out = fuse(params, *(rng.normal(size=k) for k in dims))
        assert out.fused.shape == (100, 1)
        assert out.attn_weights.shape == (1, 3)

    def test_missing_speaker_rejected(self, rng):
        with pytest.raises(ValueError, match="speaker"):
            fuse(make_params(rng, "ATS"), rng.normal(size=5), rng.normal(size=4))

    def test_at_ignores_speaker(self, rng):
        params = make_params(rng, "AT")
        a, t = rng.normal(size=5), rng.normal(size=4)
        out = fuse(params, a, t, None)
        assert out.attn_weights.shape == (1, 2)

    def test_wrong_feature_width(self, rng):
        params = make_params(rng, "ATS")
        with pytest.raises(ShapeError, match="W_a"):
            fuse(params, rng.normal(size=7), rng.normal(size=4), rng.normal(size=3))

    def test_params_validated(self, rng):
        with pytest.raises(ShapeError):
            FusionParams(FusionMode.AT, np.zeros((4, 2)), np.zeros((4, 2)), W_s=np.zeros((4, 2)))
        with pytest.raises(ShapeError, match="W_F"):
            FusionParams(FusionMode.ATS, np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)),
                         np.zeros((3, 4)), np.zeros((4, 1)))


class TestFusionGradients:
    @pytest.mark.parametrize("mode", ["ATS", "AT", "ADD"])
    def test_all_params(self, rng, mode):
        params = make_params(rng, mode)
        names = list(params.as_dict())
        length = 3
        a, t, s = (rng.normal(size=(length, k)) for k in DIMS)
        w = rng.normal(size=(length, 6))

        def build(v):
            p = dict(zip(names, v))
            fused, _ = fuse_sequence(p, FusionMode(mode), Var(a), Var(t), Var(s))
            return T.sum_all(T.hadamard(T.tanh_ew(fused), Var(w)))

        check_all(build, [params.as_dict()[k] for k in names], 1e-5)

    def test_input_features(self, rng):
        params = make_params(rng, "ATS")
        p = {k: Var(v) for k, v in params.as_dict().items()}
        w = rng.normal(size=(2, 6))

        def build(v):
            fused, _ = fuse_sequence(p, FusionMode.ATS, v[0], v[1], v[2])
            return T.sum_all(T.hadamard(fused, Var(w)))

        check_all(build, [rng.normal(size=(2, k)) for k in DIMS], 1e-5)


class TestFusionProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_weights_on_simplex(self, seed, length):
        rng = np.random.default_rng(seed)
        params = make_params(rng, "ATS", scale=3.0)
        p = {k: Var(v) for k, v in params.as_dict().items()}
        feats = [Var(rng.normal(scale=5.0, size=(length, k))) for k in DIMS]
        _, alpha = fuse_sequence(p, FusionMode.ATS, *feats)
        assert np.all(alpha.value >= 0)
        np.testing.assert_allclose(alpha.value.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_is_pointwise(self, rng):
        params = make_params(rng, "ATS")
        length = 6
        dialog = Dialog("d", [UtteranceRecord(*(rng.normal(size=k) for k in DIMS), 0) for _ in range(length)])
        order = rng.permutation(length)
        f, alpha = fuse_dialog(params, dialog)
        f_p, alpha_p = fuse_dialog(params, dialog.permuted(order))
        np.testing.assert_allclose(f_p, f[order], rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(alpha_p, alpha[order], rtol=1e-13)

    def test_row_depends_only_on_its_utterance(self, rng):
        params = make_params(rng, "ATS")
        utts = [UtteranceRecord(*(rng.normal(size=k) for k in DIMS), 0) for _ in range(4)]
        f, _ = fuse_dialog(params, Dialog("d", utts))
        changed = list(utts)
        changed[2] = UtteranceRecord(*(rng.normal(size=k) for k in DIMS), 0)
        f2, _ = fuse_dialog(params, Dialog("d", changed))
        np.testing.assert_array_equal(np.delete(f, 2, axis=0), np.delete(f2, 2, axis=0))
        assert not np.allclose(f[2], f2[2])

    def test_raising_a_score_raises_its_weight(self, rng):
        # with W_F = I and w_F = 1 the acoustic score is sum(tanh(W_a a))
        d = 6
        params = make_params(rng, "ATS", d=d)
        params.W_F = np.eye(d)
        params.w_F = np.ones((d, 1))
        params.W_a = np.vstack([np.eye(5), np.zeros((1, 5))])
        a, t, s = rng.normal(size=5), rng.normal(size=4), rng.normal(size=3)
        weights = [fuse(params, a + step, t, s).attn_weights[0, 0] for step in (0.0, 0.5, 1.0, 2.0)]
        assert all(x < y for x, y in zip(weights, weights[1:]))

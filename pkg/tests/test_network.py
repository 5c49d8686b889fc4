import numpy as np
import pytest

from far import autodiff as ad
from far import network as N
from far.autodiff import Tensor


@pytest.fixture
def model():
    return N.FarModel(N.ModelConfig(), seed=3)


def zero_gate_params(prefix, c=32, r=8):
    h = c // r
    return {
        f"{prefix}.ch.w1": Tensor(np.zeros((c, h))), f"{prefix}.ch.b1": Tensor(np.zeros(h)),
        f"{prefix}.ch.w2": Tensor(np.zeros((h, c))), f"{prefix}.ch.b2": Tensor(np.zeros(c)),
        f"{prefix}.sp.k1": Tensor(np.zeros((2, 2, 3, 3))), f"{prefix}.sp.b1": Tensor(np.zeros(2)),
        f"{prefix}.sp.k2": Tensor(np.zeros((1, 2, 3, 3))), f"{prefix}.sp.b2": Tensor(np.zeros(1)),
    }


def random_gate_params(prefix, rng, c=32, r=8, scale=1.0):
    return {k: Tensor((scale * rng.normal(size=v.shape)).astype(np.float32))
            for k, v in zero_gate_params(prefix, c, r).items()}


class TestExtract:
    def test_shape(self, model):
        F = N.extract(np.zeros((3, 16, 16), np.float32), model.constants(), model.cfg)
        assert F.shape == (32, 2, 2)

    def test_zero_input_zero_bias(self, model):
        F = N.extract(np.zeros((2, 3, 16, 16), np.float32), model.constants(), model.cfg)
        assert not F.data.any()

    def test_bitwise_stable(self):
        x = np.random.default_rng(0).normal(size=(4, 3, 16, 16)).astype(np.float32)
        a = N.extract(x, N.FarModel(N.ModelConfig(), seed=11).constants(), N.ModelConfig())
        b = N.extract(x, N.FarModel(N.ModelConfig(), seed=11).constants(), N.ModelConfig())
        assert np.array_equal(a.data, b.data)

    def test_wrong_input_shape(self, model):
        with pytest.raises(ad.DimensionError):
            N.extract(np.zeros((3, 8, 8), np.float32), model.constants(), model.cfg)


class TestAttention:
    def test_zero_weights_quarter(self):
        F = Tensor(np.random.default_rng(1).normal(size=(2, 32, 2, 2)).astype(np.float32))
        A = N.attend_parallel(F, zero_gate_params("fa"))
        np.testing.assert_allclose(A.data, 0.25 * F.data, rtol=1e-6)

    def test_zero_feature(self):
        rng = np.random.default_rng(2)
        A = N.attend_parallel(Tensor(np.zeros((32, 2, 2), np.float32)), random_gate_params("fa", rng))
        assert not A.data.any()

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = random_gate_params("fa", rng)
        F = rng.normal(size=(32, 3, 3)).astype(np.float32)
        A = N.attend_parallel(Tensor(F), p).data
        a, S = N.gate_responses(Tensor(F[None]), p, "fa")
        a, S = a.data[0], S.data[0]
        for i in range(3):
            for j in range(3):
                for k in range(32):
                    assert A[k, i, j] == pytest.approx(S[i, j] * a[k] * F[k, i, j], abs=1e-6)

    def test_branches_read_the_same_input(self):
        # parallel: the spatial branch sees F, not the channel-gated F
        rng = np.random.default_rng(4)
        p = random_gate_params("fa", rng)
        F = Tensor(rng.normal(size=(1, 32, 2, 2)).astype(np.float32))
        _, S = N.gate_responses(F, p, "fa")
        S_direct = N.spatial_gate(F, p, "fa")
        assert np.array_equal(S.data, S_direct.data)

    def test_gate_range(self):
        # init-scale weights; unit-normal ones saturate float32 sigmoids to exactly 1
        rng = np.random.default_rng(5)
        p = random_gate_params("fa", rng, scale=0.3)
        F = Tensor(rng.normal(size=(6, 32, 2, 2)).astype(np.float32))
        a, S = N.gate_responses(F, p, "fa")
        for g in (a.data, S.data):
            assert np.all((g > 0) & (g < 1))

    def test_homogeneous_with_frozen_gates(self):
        rng = np.random.default_rng(6)
        p = random_gate_params("fa", rng)
        F = Tensor(rng.normal(size=(2, 32, 2, 2)).astype(np.float64))
        a, S = N.gate_responses(F, p, "fa")
        a, S = ad.detach(a), ad.detach(S)
        A1 = N.apply_gate(F, a, S).data
        A3 = N.apply_gate(ad.scale(F, 3.0), a, S).data
        np.testing.assert_allclose(A3, 3.0 * A1, rtol=1e-12)


class TestRestoreSplit:
    def test_zero_weights(self):
        R = Tensor(np.random.default_rng(7).normal(size=(32, 2, 2)).astype(np.float32))
        plus, minus = N.restore_split(R, zero_gate_params("fr"))
        np.testing.assert_allclose(plus.data, 0.25 * R.data, rtol=1e-6)
        np.testing.assert_allclose(minus.data, 0.75 * R.data, rtol=1e-6)

    def test_zero_residual(self):
        plus, minus = N.restore_split(Tensor(np.zeros((32, 2, 2))), random_gate_params("fr", np.random.default_rng(8)))
        assert not plus.data.any() and not minus.data.any()

    def test_reconstruction(self):
        rng = np.random.default_rng(9)
        p = random_gate_params("fr", rng)
        R = Tensor((rng.normal(size=(20, 32, 2, 2)) * 10).astype(np.float32))
        plus, minus = N.restore_split(R, p)
        np.testing.assert_allclose(plus.data + minus.data, R.data, atol=1e-5)


class TestForward:
    def test_shapes(self, model):
        fb = model.forward(np.random.default_rng(0).normal(size=(5, 3, 16, 16)).astype(np.float32))
        assert fb.F.shape == (5, 32, 2, 2)
        assert fb.f_plus.shape == (5, 32)
        assert fb.logits_plus.shape == (5, 4)
        assert len(fb.expert_logits) == 3 and fb.expert_logits[0].shape == (5, 4)

    def test_identity_forcing_gates(self, model):
        for prefix in ("fa",):
            model.params[f"{prefix}.ch.b2"][:] = 60.0
            model.params[f"{prefix}.sp.b2"][:] = 60.0
        fb = model.forward(np.random.default_rng(1).normal(size=(3, 3, 16, 16)).astype(np.float32))
        np.testing.assert_allclose(fb.A.data, fb.F.data, atol=1e-6)
        assert np.abs(fb.R.data).max() < 1e-6
        np.testing.assert_allclose(fb.f_plus.data, fb.f.data, atol=1e-6)

    def test_bundle_invariants(self, model):
        x = np.random.default_rng(2).normal(size=(8, 3, 16, 16)).astype(np.float32)
        fb = model.forward(x)
        assert np.array_equal(fb.R.data, fb.F.data - fb.A.data)
        np.testing.assert_allclose(fb.R_plus.data + fb.R_minus.data, fb.R.data, atol=1e-5)
        np.testing.assert_allclose(fb.f.data, fb.A.data.mean(axis=(2, 3)), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(fb.f_plus.data, (fb.A.data + fb.R_plus.data).mean(axis=(2, 3)), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(fb.f_minus.data, (fb.A.data + fb.R_minus.data).mean(axis=(2, 3)), rtol=1e-5, atol=1e-7)
        for g in fb.gate_fa + fb.gate_fr:
            assert np.all((g.data > 0) & (g.data < 1))


class TestPredict:
    def test_argmax(self):
        assert N.argmax_lowest(np.array([2.0, 1.0, 0.5])) == 0

    def test_tie_lowest(self):
        assert N.argmax_lowest(np.array([0.5, 2.0, 2.0])) == 1

    def test_monotone_invariance(self):
        z = np.random.default_rng(3).normal(size=(10, 4))
        assert np.array_equal(N.argmax_lowest(z), N.argmax_lowest(np.exp(3.7 * z)))

    def test_ignores_experts(self, model):
        x = np.random.default_rng(4).normal(size=(16, 3, 16, 16)).astype(np.float32)
        before = model.predict(x)
        logits_before = N.inference_logits(x, model).data.copy()
        for n in model.names("expert"):
            model.params[n] += 100.0
        assert np.array_equal(model.predict(x), before)
        assert np.array_equal(N.inference_logits(x, model).data, logits_before)

    def test_matches_forward_logits(self, model):
        x = np.random.default_rng(5).normal(size=(6, 3, 16, 16)).astype(np.float32)
        np.testing.assert_allclose(N.inference_logits(x, model).data, model.forward(x).logits_plus.data, rtol=1e-6)


class TestParameterGroups:
    @pytest.mark.parametrize("attention", [N.PARALLEL, N.CHANNEL_ONLY, N.SPATIAL_ONLY, N.CONV1X1])
    def test_partition(self, attention):
        m = N.FarModel(N.ModelConfig(attention=attention))
        total = sum(v.size for v in m.params.values())
        assert sum(m.n_params(g) for g in N.GROUPS) == total
        names = [n for g in N.GROUPS for n in m.names(g)]
        assert len(names) == len(set(names)) == len(m.params)

    def test_expert_count(self):
        m = N.FarModel(N.ModelConfig(n_experts=5))
        assert len({n.split(".")[0] for n in m.names("expert")}) == 5

    def test_reduction_must_divide(self):
        with pytest.raises(ValueError):
            N.FarModel(N.ModelConfig(widths=(8, 8, 12)))

    def test_init_gates_near_half(self, model):
        fb = model.forward(np.random.default_rng(6).normal(size=(4, 3, 16, 16)).astype(np.float32))
        assert 0.2 < float(fb.gate_fa[0].data.mean()) < 0.8

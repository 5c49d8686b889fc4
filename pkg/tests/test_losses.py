import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from far import autodiff as ad
from far import losses as L
from far.autodiff import Tensor

mpmath.mp.dps = 30


def md_oracle(sources, target=None):
    """Direct evaluation with plain Python lists."""

    def moments(block):
        block = [list(map(float, r)) for r in block]
        m, c = len(block), len(block[0])
        mu = [sum(r[k] for r in block) / m for k in range(c)]
        var = [sum((r[k] - mu[k]) ** 2 for r in block) / m for k in range(c)]
        return mu, var

    def dist(u, v):
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))

    ms = [moments(s) for s in sources]
    n = len(ms)
    total = 0.0
    for k in (0, 1):
        if target is not None:
            t = moments(target)
            total += sum(dist(m[k], t[k]) for m in ms) / n
        pairs = list(itertools.combinations(range(n), 2))
        if pairs:
            total += sum(dist(ms[i][k], ms[j][k]) for i, j in pairs) / len(pairs)
    return total


def blocks(arrs):
    return [Tensor(np.asarray(a, dtype=np.float64)) for a in arrs]


class TestMomentDistance:
    def test_identical_domains(self):
        s = np.random.default_rng(0).normal(size=(4, 3))
        assert float(L.moment_distance(blocks([s, s, s]), Tensor(s)).data) == 0.0

    def test_hand_example(self):
        srcs = [[[0.0]], [[1.0]], [[2.0]]]
        assert md_oracle(srcs, [[1.0]]) == pytest.approx(2.0)
        val = float(L.moment_distance(blocks(srcs), Tensor(np.array([[1.0]]))).data)
        assert val == pytest.approx(2.0, abs=1e-6)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(1)
        srcs = [rng.normal(size=(5, 4)) for _ in range(3)]
        tgt = rng.normal(size=(5, 4))
        assert float(L.moment_distance(blocks(srcs), Tensor(tgt)).data) == pytest.approx(md_oracle(srcs, tgt))
        assert float(L.moment_distance(blocks(srcs)).data) == pytest.approx(md_oracle(srcs))

    def test_single_source_no_target(self):
        assert float(L.moment_distance(blocks([np.ones((3, 2))])).data) == 0.0

    def test_errors(self):
        with pytest.raises(ad.ContractError):
            L.moment_distance([])
        with pytest.raises(ad.ContractError):
            L.moment_distance([Tensor(np.zeros((0, 3)))])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
    def test_permutation_invariances(self, seed, n):
        rng = np.random.default_rng(seed)
        srcs = [rng.normal(size=(3, 5)) for _ in range(n)]
        tgt = rng.normal(size=(3, 5))
        base = float(L.moment_distance(blocks(srcs), Tensor(tgt)).data)
        assert base >= 0
        order = rng.permutation(n)
        perm = float(L.moment_distance(blocks([srcs[i] for i in order]), Tensor(tgt)).data)
        assert perm == pytest.approx(base, abs=1e-6)
        dims = rng.permutation(5)
        dperm = float(L.moment_distance(blocks([s[:, dims] for s in srcs]), Tensor(tgt[:, dims])).data)
        assert dperm == pytest.approx(base, abs=1e-6)

    def test_zero_iff_moments_coincide(self):
        # different samples, same mean and variance -> 0
        a = np.array([[-1.0], [1.0]])
        b = np.array([[1.0], [-1.0]])
        assert float(L.moment_distance(blocks([a, b])).data) == 0.0
        # same mean, different variance -> positive
        c = np.array([[-2.0], [2.0]])
        assert float(L.moment_distance(blocks([a, c])).data) > 0


class TestEntropy:
    def test_uniform(self):
        assert float(L.entropy(Tensor(np.full(4, 0.25))).data) == pytest.approx(math.log(4), abs=1e-6)

    def test_one_hot(self):
        assert float(L.entropy(Tensor([0.0, 1.0, 0.0])).data) == 0.0

    def test_two_point(self):
        oracle = float(-(mpmath.mpf("0.9") * mpmath.log("0.9") + mpmath.mpf("0.1") * mpmath.log("0.1")))
        assert oracle == pytest.approx(0.325083, abs=1e-6)
        assert float(L.entropy(Tensor(np.array([0.9, 0.1]))).data) == pytest.approx(oracle, rel=1e-12)

    def test_rejects_unnormalised(self):
        with pytest.raises(ad.ContractError):
            L.entropy(Tensor([0.5, 0.6]))

    @given(arrays(np.float64, 6, elements=st.floats(-20, 20)))
    def test_range(self, logits):
        e = float(L.prediction_entropy(Tensor(logits)).data[0])
        assert -1e-9 <= e <= math.log(6) + 1e-9


class TestDRE:
    def test_equal_logits(self):
        z = Tensor(np.array([[0.3, -1.0, 2.0]]))
        lp, lm = L.dre_loss(z, z, z)
        assert float(lp.data) == pytest.approx(math.log(2), abs=1e-6)
        assert float(lm.data) == pytest.approx(math.log(2), abs=1e-6)

    def test_scalar_arithmetic(self):
        plus = Tensor(np.log(np.array([0.9, 0.1])))
        ref = Tensor(np.zeros(2))
        lp, _ = L.dre_loss(plus, ref, ref)
        h_plus = -(mpmath.mpf("0.9") * mpmath.log("0.9") + mpmath.mpf("0.1") * mpmath.log("0.1"))
        oracle = float(mpmath.log(1 + mpmath.exp(h_plus - mpmath.log(2))))
        assert oracle == pytest.approx(0.526, abs=1e-3)
        assert float(lp.data) == pytest.approx(oracle, rel=1e-9)

    def test_monotone_in_enhanced_entropy(self):
        ref = Tensor(np.zeros(3))
        vals = [float(L.dre_loss(Tensor(np.array([t, 0.0, 0.0])), ref, ref)[0].data) for t in np.linspace(0, 6, 13)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert all(v < math.log(2) for v in vals[1:])

    def test_per_sample_ranking(self):
        # one sample much sharper, one slightly blurrier: per-sample averaging is not the
        # softplus of the batch-mean difference
        plus = Tensor(np.array([[5.0, 0.0], [0.0, 0.0]]))
        ref = Tensor(np.array([[0.0, 0.0], [0.5, 0.0]]))
        lp, _ = L.dre_loss(plus, ref, ref)
        e = lambda z: float(L.prediction_entropy(Tensor(z)).data[0])
        d = [e(np.array([5.0, 0.0])) - e(np.array([0.0, 0.0])), e(np.array([0.0, 0.0])) - e(np.array([0.5, 0.0]))]
        sp = lambda x: math.log1p(math.exp(x))
        assert float(lp.data) == pytest.approx((sp(d[0]) + sp(d[1])) / 2)


class TestCrossEntropy:
    def test_limit(self):
        assert float(L.cross_entropy(Tensor([50.0, 0.0, 0.0]), 0).data) < 1e-12

    def test_uniform(self):
        assert float(L.cross_entropy(Tensor(np.zeros(4)), 2).data) == pytest.approx(math.log(4), abs=1e-6)

    def test_high_precision(self):
        oracle = float(-mpmath.log(mpmath.exp(1) / (mpmath.exp(1) + mpmath.exp(2) + mpmath.exp(3))))
        assert oracle == pytest.approx(2.40761, abs=1e-5)
        assert float(L.cross_entropy(Tensor(np.array([1.0, 2.0, 3.0])), 0).data) == pytest.approx(oracle, rel=1e-12)

    def test_label_range(self):
        with pytest.raises(ad.ContractError):
            L.cross_entropy(Tensor(np.zeros(3)), 3)


class TestConsist:
    def test_identical(self):
        p = Tensor([0.2, 0.8])
        assert float(L.consist_l1(p, p).data) == 0.0

    def test_maximal(self):
        assert float(L.consist_l1(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data) == 2.0

    def test_arithmetic(self):
        v = float(L.consist_l1(Tensor(np.array([0.7, 0.3])), Tensor(np.array([0.5, 0.5]))).data)
        assert v == pytest.approx(0.4, abs=1e-12)

    def test_rejects_non_probability(self):
        with pytest.raises(ad.ContractError):
            L.consist_l1(Tensor([0.7, 0.7]), Tensor([0.5, 0.5]))

    def test_teacher_gets_no_gradient(self):
        tape = ad.Tape()
        zt = tape.watch(np.array([[1.0, 0.0]]))
        zs = tape.watch(np.array([[0.0, 1.0]]))
        loss = L.consist_l1(ad.softmax(zt), ad.softmax(zs))
        g = ad.backward(tape, loss)
        assert not g[zt].any() and g[zs].any()

    @given(arrays(np.float64, (2, 4), elements=st.floats(-10, 10)),
           arrays(np.float64, (2, 4), elements=st.floats(-10, 10)))
    def test_range(self, a, b):
        v = float(L.consist_l1(ad.softmax(Tensor(a)), ad.softmax(Tensor(b))).data)
        assert -1e-12 <= v <= 2 + 1e-9


class TestCompose:
    def test_zero(self):
        assert L.compose_total().total == 0.0

    def test_align_only(self):
        assert L.compose_total(l_align=2.0).total == pytest.approx(1.0)

    def test_weighted_sum(self):
        b = L.compose_total(l_align=1.0, l_dre_plus=0.4, l_dre_minus=0.6, l_cls=1.0, l_consist=0.01)
        oracle = 0.5 * 1 + 0.1 * (0.4 + 0.6) + 1.0 * 1 + 100 * 0.01
        assert oracle == pytest.approx(2.6)
        assert b.total == pytest.approx(oracle)

    def test_defaults(self):
        w = L.LossWeights()
        assert (w.align, w.dre, w.cls, w.consist) == (0.5, 0.1, 1.0, 100.0)

    def test_negative_weight(self):
        with pytest.raises(L.ConfigError):
            L.LossWeights(align=-1)

    @given(st.floats(0, 10), st.floats(0, 10))
    def test_linear_in_component(self, a, b):
        w = L.LossWeights(cls=0.7)
        t1 = L.compose_total(l_cls=a, weights=w).total
        t2 = L.compose_total(l_cls=a + b, weights=w).total
        assert t2 - t1 == pytest.approx(0.7 * b, abs=1e-9)

    def test_tensor_components(self):
        tot = L.compose_total(l_align=Tensor(np.array(2.0)), l_cls=Tensor(np.array(1.0)))
        assert float(tot.data) == pytest.approx(2.0)


LOSS_FNS = {
    "moment_distance": lambda t: L.moment_distance([t["a"], t["b"]], t["c"]),
    "dre_plus": lambda t: L.dre_loss(t["a"], t["b"], t["c"])[0],
    "dre_minus": lambda t: L.dre_loss(t["a"], t["b"], t["c"])[1],
    "cross_entropy": lambda t: L.cross_entropy(t["a"], [0, 2, 1]),
    "consist": lambda t: L.consist_l1(Tensor(np.full((3, 3), 1 / 3)), ad.softmax(t["a"])),
    "entropy": lambda t: ad.mean(L.prediction_entropy(t["b"])),
}


@pytest.mark.parametrize("name", sorted(LOSS_FNS))
def test_loss_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    params = {k: rng.uniform(-1, 1, (3, 3)) for k in "abc"}
    report = ad.finite_diff_check(LOSS_FNS[name], params, step=1e-4, tol=1e-3)
    assert report.passed, report.per_parameter()

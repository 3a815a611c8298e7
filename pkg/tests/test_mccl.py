import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from carl import tensor as tn
from carl.encoder import EncoderConfig, init_params, target_copy
from carl.errors import ContractError, ParameterError
from carl.mccl import (MCCLConfig, MomentumState, ema_update, embedding_similarity, label_similarity,
                       mccl_loss, mccl_objective, momentum_schedule, to_distribution)
from carl.tensor import Tensor


def rows_entropy(p):
    return -(p * np.log(p)).sum(axis=1)


def random_distribution(rng, n, k):
    return tn.softmax_rows(Tensor(rng.normal(scale=2.0, size=(n, k)))).data


def brute_cosine(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            num = sum(a[i, k] * b[j, k] for k in range(a.shape[1]))
            na = math.sqrt(sum(x * x for x in a[i]))
            nb = math.sqrt(sum(x * x for x in b[j]))
            out[i, j] = num / (na * nb)
    return out


def brute_softmax(s, tau):
    out = np.zeros_like(s)
    for i in range(s.shape[0]):
        m = max(s[i])
        e = [math.exp((x - m) / tau) for x in s[i]]
        out[i] = [x / sum(e) for x in e]
    return out


class TestEMA:
    def params(self):
        cfg = EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, max_len=6, d_proj=4)
        online = init_params(cfg, 0)
        return online, target_copy(online)

    def test_fixed_point_and_copy(self):
        online, target = self.params()
        for t in online.tensors.values():
            t.data += 1.0
        before = {k: v.data.copy() for k, v in target.items()}
        ema_update(target, online, 1.0)
        for k, v in target.items():
            assert (v.data == before[k]).all()
        ema_update(target, online, 0.0)
        for k, v in target.items():
            assert (v.data == online[k].data).all()

    def test_geometric_decay(self):
        online, target = self.params()
        for t in target.tensors.values():
            t.data[...] = 1.0
        for t in online.tensors.values():
            t.data[...] = 0.0
        for n in range(1, 21):
            ema_update(target, online, 0.9)
            assert_allclose(target["tok_emb"].data, 0.9 ** n, rtol=1e-14)

    def test_target_lacks_prediction_head(self):
        online, target = self.params()
        assert "pred.w1" in online and "pred.w1" not in target
        assert "proj.w1" in target and "detect.w" not in target

    def test_bad_momentum(self):
        online, target = self.params()
        with pytest.raises(ParameterError):
            ema_update(target, online, 1.5)


class TestMomentumSchedule:
    def test_endpoints(self):
        assert momentum_schedule(0, 100, 0.9996) == 0.9996
        assert momentum_schedule(100, 100, 0.9996) == 1.0
        assert abs(momentum_schedule(50, 100, 0.9996) - 0.9998) < 1e-15

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            momentum_schedule(101, 100, 0.99)
        with pytest.raises(ContractError):
            momentum_schedule(0, 0, 0.99)

    @given(st.integers(1, 500), st.floats(0.0, 1.0))
    def test_monotone(self, K, m0):
        vals = [momentum_schedule(k, K, m0) for k in range(K + 1)]
        assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))

    def test_state_tracks_schedule(self):
        st_ = MomentumState(0.99, 0, 10, 0.99)
        assert st_.advance(10) == 1.0 and st_.k == 10


class TestSimilarity:
    def test_embedding_examples(self):
        q = Tensor([[1.0, 2.0], [1.0, 0.0]])
        z = Tensor([[2.0, 4.0], [0.0, 3.0]])
        s = embedding_similarity(q, z).data
        assert abs(s[0, 0] - 1.0) < 1e-15
        assert abs(s[1, 1]) < 1e-15

    def test_label_examples(self):
        s = label_similarity(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])).data
        assert_allclose(s, [[1, 0, -1], [0, 1, 0], [-1, 0, 1]], atol=1e-15)

    def test_label_matrix_symmetric_unit_diagonal(self):
        labels = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
        s = label_similarity(labels).data
        assert (s == s.T).all()
        assert_allclose(np.diag(s), 1.0, atol=1e-15)

    def test_degenerate_label_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            s = label_similarity(np.array([[0.0, 0.0], [1.0, 0.0]])).data
        assert "ill-defined" in caplog.text
        assert np.isfinite(s).all()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
            assert_allclose(embedding_similarity(Tensor(a), Tensor(b)).data, brute_cosine(a, b),
                            atol=1e-10, rtol=0)
            labels = rng.uniform(-1, 1, size=(8, 2))
            assert_allclose(label_similarity(labels).data, brute_cosine(labels, labels), atol=1e-10, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.01, 100.0))
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        q, z = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        q2 = q.copy()
        q2[1] *= c
        a = embedding_similarity(Tensor(q), Tensor(z)).data
        b = embedding_similarity(Tensor(q2), Tensor(z)).data
        assert_allclose(a, b, atol=1e-12)

    def test_target_side_gets_no_gradient(self):
        q = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
        z = Tensor(np.random.default_rng(3).normal(size=(3, 4)), requires_grad=True)
        tn.backward(tn.sum(embedding_similarity(q, z)))
        assert np.abs(q.grad).sum() > 0
        assert z._grad is None


class TestDistribution:
    def test_examples(self):
        assert_allclose(to_distribution(Tensor(np.full((3, 3), 0.4))).data, 1 / 3)
        p = to_distribution(Tensor([[1.0, -1.0]]), 1.0).data
        e = math.e
        assert_allclose(p, [[e / (e + 1 / e), (1 / e) / (e + 1 / e)]], atol=1e-12)
        assert to_distribution(Tensor([[1.0, 0.9]]), 0.05).data[0, 0] > 0.85

    def test_brute_force(self):
        rng = np.random.default_rng(4)
        s = rng.uniform(-1, 1, size=(8, 8))
        assert_allclose(to_distribution(Tensor(s), 0.05).data, brute_softmax(s, 0.05), atol=1e-10, rtol=0)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            to_distribution(Tensor(np.zeros((2, 2))), -1.0)


class TestLoss:
    def test_uniform_cases(self):
        u2 = Tensor(np.full((2, 2), 0.5))
        assert abs(mccl_loss(u2, u2).item() - 2 * math.log(2)) < 1e-12
        u4 = Tensor(np.full((4, 4), 0.25))
        assert abs(mccl_loss(u4, u4).item() - 2 * math.log(4)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            mccl_loss(Tensor(np.full((2, 2), 0.5)), Tensor(np.full((3, 3), 1 / 3)))

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(5)
        p, q = random_distribution(rng, 4, 4), random_distribution(rng, 4, 4)
        assert abs(mccl_loss(Tensor(p), Tensor(q)).item() - mccl_loss(Tensor(q), Tensor(p)).item()) < 1e-12

    def test_entropy_plus_kl_decomposition(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            p, q = random_distribution(rng, 4, 4), random_distribution(rng, 4, 4)
            loss = mccl_loss(Tensor(p), Tensor(q)).item()
            ent = (rows_entropy(p) + rows_entropy(q)).mean()
            kl = ((p * np.log(p / q)).sum(axis=1) + (q * np.log(q / p)).sum(axis=1)).mean()
            assert abs(loss - ent - kl) < 1e-10
            assert loss - ent >= -1e-12
            same = mccl_loss(Tensor(p), Tensor(p)).item()
            assert abs(same - 2 * rows_entropy(p).mean()) < 1e-10

    def test_gradient_only_through_similarity(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        tn.backward(mccl_loss(tn.softmax_rows(a), tn.softmax_rows(b)))
        assert np.abs(a.grad).sum() > 0
        assert b._grad is None

    def test_objective_gradient(self):
        rng = np.random.default_rng(8)
        q = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        z = rng.normal(size=(4, 5))
        labels = rng.uniform(-1, 1, size=(4, 2))
        cfg = MCCLConfig(temperature_sim=0.5)
        err = tn.grad_check(lambda: mccl_objective(q, z, labels, cfg), [q])
        assert err < 1e-6

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            MCCLConfig(temperature_sim=0.0)
        with pytest.raises(ParameterError):
            MCCLConfig(m_initial=1.2)

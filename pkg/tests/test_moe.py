"""Tests for mixture-of-experts routing and the two-term reconstruction loss."""

from __future__ import annotations

import numpy as np
import pytest

from masktab import autodiff as ad
from masktab import moe
from masktab.errors import ProtocolError
from masktab.model import ModelVariant
from masktab.objectives import mlm_loss, moe_mlm_loss

from conftest import toy_dataset, toy_model


class TestRoute:
    def test_singleton_gate_is_one(self):
        g = moe.route(np.ones(4), np.ones((1, 4)), 1)
        assert g.shape == (1,) and g[0] == 1.0

    def test_full_selection_is_the_softmax(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(6)
        c = rng.standard_normal((3, 6))
        g = moe.route(z, c, 3)
        assert g.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(g > 0)

    def test_top_one_keeps_winner_unrenormalized(self):
        # centroid scores 0, 0, ln 2 -> softmax [0.25, 0.25, 0.5]
        c = np.zeros((3, 2))
        c[2, 0] = np.log(2.0)
        g = moe.route(np.array([1.0, 0.0]), c, 1)
        np.testing.assert_allclose(g, [0.0, 0.0, 0.5], atol=1e-9)

    def test_boundary_ties_go_to_lower_index(self):
        g = moe.route(np.zeros(3), np.zeros((4, 3)), 2)  # all scores equal
        assert np.nonzero(g)[0].tolist() == [0, 1]

    def test_invalid_active_count_rejected(self):
        with pytest.raises(ProtocolError):
            moe.route(np.zeros(2), np.zeros((2, 2)), 3)

    def test_gate_contract_on_random_draws(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            k_r = int(rng.integers(1, 6))
            k_a = int(rng.integers(1, k_r + 1))
            g = moe.route(rng.standard_normal(4), rng.standard_normal((k_r, 4)), k_a)
            nz = g[g > 0]
            assert len(nz) == k_a
            assert np.all((nz > 0) & (nz < 1.0 + 1e-15))
            total = g.sum()
            if k_a == k_r:
                assert total == pytest.approx(1.0, abs=1e-12)
            else:
                assert total < 1.0


class TestConfig:
    def test_active_bounds(self):
        with pytest.raises(ProtocolError):
            moe.MoEConfig(n_experts=2, n_active=3)
        with pytest.raises(ProtocolError):
            moe.MoEConfig(n_experts=2, n_active=0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ProtocolError):
            moe.MoEConfig(alpha=-0.1)

    def test_json_round_trip(self):
        cfg = moe.MoEConfig(3, 2, 0.3, 0.7)
        assert moe.MoEConfig.from_json(cfg.to_json()) == cfg


class TestMixture:
    def test_dense_equivalence_when_all_active(self):
        cfg = moe.MoEConfig(n_experts=3, n_active=3)
        rng = np.random.default_rng(1)
        params = moe.init_moe_params(5, cfg, rng)
        tokens = rng.standard_normal((2, 4, 5))
        _, routed = moe.expert_outputs(ad.Tensor(tokens), params, cfg)

        # oracle: full softmax mixture, computed densely with plain numpy
        scores = tokens @ params["moe.centroids"].data.T
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        expected = np.zeros_like(tokens)
        for i in range(cfg.n_experts):
            out_i = tokens @ params[f"moe.expert.{i:02d}.weight"].data + params[f"moe.expert.{i:02d}.bias"].data
            expected += s[..., i:i + 1] * out_i
        np.testing.assert_allclose(routed.data, expected, atol=1e-12)

    def test_identical_experts_collapse_to_unit_mixture(self):
        cfg = moe.MoEConfig(n_experts=2, n_active=2)
        rng = np.random.default_rng(2)
        params = moe.init_moe_params(4, cfg, rng)
        params["moe.expert.01.weight"].data = params["moe.expert.00.weight"].data.copy()
        params["moe.expert.01.bias"].data = params["moe.expert.00.bias"].data.copy()
        tokens = rng.standard_normal((1, 3, 4))
        _, routed = moe.expert_outputs(ad.Tensor(tokens), params, cfg)
        single = tokens @ params["moe.expert.00.weight"].data + params["moe.expert.00.bias"].data
        np.testing.assert_allclose(routed.data, single, atol=1e-12)  # gates sum to 1

    def test_centroids_unit_norm_at_init(self):
        params = moe.init_moe_params(8, moe.MoEConfig(), np.random.default_rng(0))
        norms = np.linalg.norm(params["moe.centroids"].data, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_utilization_roughly_balanced(self):
        cfg = moe.MoEConfig(n_experts=4, n_active=2)
        rng = np.random.default_rng(3)
        c = rng.standard_normal((4, 8))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        tokens = rng.standard_normal((10_000, 8))
        mask = moe.top_k_mask(
            _softmax_rows(tokens @ c.T), cfg.n_active
        )
        counts = mask.sum(axis=0)
        share = 10_000 * cfg.n_active / cfg.n_experts
        assert np.all(counts >= 0.5 * share) and np.all(counts <= 2.0 * share)


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestMoELoss:
    def _setup(self, seed=11, moe_cfg=None):
        ds = toy_dataset(n=12, seed=seed)
        cfg = moe_cfg or moe.MoEConfig(n_experts=3, n_active=1)
        m = toy_model(ds, variant=ModelVariant(moe=True), moe=cfg)
        batch = m.prepare(ds, np.arange(8))
        rng = np.random.default_rng(seed)
        masked = batch.observed & (rng.uniform(size=batch.observed.shape) < 0.5)
        return m, batch, masked

    def test_beta_zero_reduces_to_shared_term(self):
        m, batch, masked = self._setup(moe_cfg=moe.MoEConfig(n_experts=3, n_active=1, beta=0.0))
        Z = m.encode(batch, masked)
        total, l_shared, _ = moe_mlm_loss(m, Z, batch, masked)
        assert total.item() == pytest.approx(0.5 * l_shared.item(), abs=1e-12)

    def test_identical_experts_at_full_activation_match_plain_head(self):
        # all experts cloned from the shared expert, every gate active: both
        # terms equal the plain loss through the same type-aware decoders
        m, batch, masked = self._setup(moe_cfg=moe.MoEConfig(n_experts=2, n_active=2))
        for i in range(2):
            m.params[f"moe.expert.{i:02d}.weight"].data = m.params["moe.shared.weight"].data.copy()
            m.params[f"moe.expert.{i:02d}.bias"].data = m.params["moe.shared.bias"].data.copy()
        Z = m.encode(batch, masked)
        total, l_shared, l_routed = moe_mlm_loss(m, Z, batch, masked)
        from masktab.objectives import reconstruction_loss

        shared_out, _ = moe.expert_outputs(Z, m.params, m.config.moe)
        plain = reconstruction_loss(m, shared_out, batch, masked)
        assert l_routed.item() == pytest.approx(l_shared.item(), abs=1e-12)
        assert total.item() == pytest.approx(plain.item(), abs=1e-12)

    def test_empty_mask_is_zero(self):
        m, batch, _ = self._setup()
        masked = np.zeros(batch.observed.shape, dtype=bool)
        total, l_shared, l_routed = moe_mlm_loss(m, m.encode(batch), batch, masked)
        assert total.item() == 0.0 == l_shared.item() == l_routed.item()

    def test_unselected_expert_has_exactly_zero_influence(self):
        m, batch, masked = self._setup()

        def loss_value():
            Z = m.encode(batch, masked)
            return moe_mlm_loss(m, Z, batch, masked)[0].item()

        gates = moe.gate_tensor(
            m.encode(batch, masked), m.params["moe.centroids"], m.config.moe.n_active
        ).data
        idle = [i for i in range(m.config.moe.n_experts) if not gates[..., i].any()]
        assert idle, "seed must leave at least one expert unselected everywhere"
        before = loss_value()
        w = m.params[f"moe.expert.{idle[0]:02d}.weight"]
        w.data = w.data + 123.0  # any perturbation, however large
        assert loss_value() == before  # bitwise: the gate multiplies by exact 0

    def test_selected_expert_does_influence(self):
        m, batch, masked = self._setup()

        def loss_value():
            return moe_mlm_loss(m, m.encode(batch, masked), batch, masked)[0].item()

        gates = moe.gate_tensor(
            m.encode(batch, masked), m.params["moe.centroids"], m.config.moe.n_active
        ).data
        busy = [i for i in range(m.config.moe.n_experts) if gates[..., i].any()]
        before = loss_value()
        w = m.params[f"moe.expert.{busy[0]:02d}.weight"]
        w.data = w.data + 0.05
        assert loss_value() != before

    def test_grad_check_with_margin(self):
        # keep clear of top-k decision boundaries so central differences
        # cannot flip expert selection
        for seed in range(20):
            m, batch, masked = self._setup(seed=seed)
            scores = m.encode(batch, masked).data @ m.params["moe.centroids"].data.T
            part = np.sort(scores, axis=-1)
            gap = part[..., -m.config.moe.n_active] - part[..., -m.config.moe.n_active - 1] \
                if m.config.moe.n_experts > m.config.moe.n_active else np.inf
            if np.min(gap) <= 1e-3:
                continue
            def f():
                Z = m.encode(batch, masked)
                return moe_mlm_loss(m, Z, batch, masked)[0]
            assert ad.grad_check(f, m.params) < 1e-4
            return
        pytest.fail("no margin-safe draw found in 20 seeds")

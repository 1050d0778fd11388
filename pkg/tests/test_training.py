import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lhvnet import NonFiniteError, ValidationError
from lhvnet import training
from lhvnet.model import LayerConfig, Sharing, init_model, model_distribution_batched
from lhvnet.quantum import CLASSICAL_CORRELATED, NetworkConfig, measurement_basis, target_distribution
from lhvnet.training import (
    ModelSpec,
    TrainConfig,
    TrainResult,
    euclidean_distance,
    extract_response_functions,
    kl_divergence,
    reconstruct_from_tables,
    restart_seed,
    train,
)

simplex = arrays(float, 8, elements=st.floats(0.01, 1.0)).map(lambda x: x / x.sum())
vectors = arrays(float, 6, elements=st.floats(-1, 1))


class TestMetrics:
    def test_kl_example(self):
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, rel=1e-14)

    def test_kl_zero_target_entries_ignored(self):
        assert kl_divergence([1.0, 0.0], [1.0, 0.0]) == 0.0

    def test_kl_floor(self):
        assert kl_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))

    @given(p=simplex, q=simplex)
    def test_kl_non_negative(self, p, q):
        assert kl_divergence(p, q) >= 0

    @given(p=simplex)
    def test_kl_identity(self, p):
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)

    def test_euclidean_example(self):
        assert euclidean_distance([0, 0], [3, 4]) == 5.0

    @given(x=vectors, y=vectors, z=vectors)
    def test_euclidean_metric_axioms(self, x, y, z):
        dxy = euclidean_distance(x, y)
        assert dxy >= 0
        assert euclidean_distance(x, x) == 0
        assert dxy == euclidean_distance(y, x)
        assert dxy <= euclidean_distance(x, z) + euclidean_distance(z, y) + 1e-12


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_batch=10), dict(restarts=0), dict(delta_local=0), dict(loss="l1"),
         dict(steps=-1), dict(n_batch=1000, n_eval=5000)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)

    def test_eval_samples(self):
        assert TrainConfig(n_batch=8192).eval_samples == 2**20
        assert TrainConfig(n_batch=200_000).eval_samples == 2_000_000
        assert TrainConfig(n_batch=100, n_eval=5000).eval_samples == 5000

    def test_learning_rate_schedule(self):
        cfg = TrainConfig(steps=101, lr=1e-2, lr_final=1e-4)
        assert cfg.learning_rate(0) == pytest.approx(1e-2)
        assert cfg.learning_rate(100) == pytest.approx(1e-4)
        assert cfg.learning_rate(50) == pytest.approx((1e-2 + 1e-4) / 2)
        rates = [cfg.learning_rate(s) for s in range(101)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_restart_seeds_distinct(self):
        seeds = {restart_seed(0, i) for i in range(50)}
        assert len(seeds) == 50
        assert restart_seed(3, 1) == restart_seed(3, 1)


FAST = dict(n_batch=256, lr=1e-2, lr_final=1e-4, restarts=1, n_eval=2**16, log_every=50)


class TestTrain:
    def test_uniform_target(self):
        r = train(np.full(64, 1 / 64), ModelSpec(widths=(8,)), TrainConfig(steps=200, **FAST))
        assert r.verdict == "local"
        assert r.best_distance < 0.015
        assert r.best_distribution.shape == (64,)

    def test_product_target(self):
        rng = np.random.default_rng(0)
        pa, pb, pc = (rng.dirichlet(np.ones(4)) for _ in range(3))
        target = np.einsum("a,b,c->abc", pa, pb, pc).ravel()
        r = train(target, ModelSpec(widths=(8,)), TrainConfig(steps=400, **FAST))
        assert r.best_distance < 0.01

    def test_classical_correlated_target(self):
        cfg = NetworkConfig.symmetric(CLASSICAL_CORRELATED, measurement_basis(1.0, 1.0))
        r = train(target_distribution(cfg), ModelSpec(widths=(16, 16)),
                  TrainConfig(steps=1500, **{**FAST, "n_batch": 512}))
        assert r.best_distance < 0.03
        rec = r.restarts[0]
        assert rec.final_distance < rec.initial_distance
        assert rec.curve[0][1] > rec.curve[-1][1]

    def test_reproducible(self):
        spec = ModelSpec(LayerConfig(1, 2, 1), widths=(6,))
        cfg = TrainConfig(steps=30, seed=5, **{**FAST, "restarts": 2})
        target = np.random.default_rng(1).dirichlet(np.ones(64))
        r1, r2 = train(target, spec, cfg), train(target, spec, cfg)
        assert r1.best_distance == r2.best_distance
        assert [x.final_kl for x in r1.restarts] == [x.final_kl for x in r2.restarts]
        for k in r1.best_model.params:
            assert np.array_equal(r1.best_model.params[k], r2.best_model.params[k])

    def test_best_is_minimum(self):
        target = np.random.default_rng(2).dirichlet(np.ones(64))
        r = train(target, ModelSpec(widths=(6,)), TrainConfig(steps=20, **{**FAST, "restarts": 3}))
        assert r.best_distance == min(x.final_distance for x in r.restarts)
        assert r.restarts[r.best_index].final_distance == r.best_distance
        assert r.verdict == "not_learned"

    def test_frozen_mixture(self):
        spec = ModelSpec(LayerConfig(2, 1, 1), widths=(6,), train_mixture=False)
        r = train(np.full(64, 1 / 64), spec, TrainConfig(steps=10, **FAST))
        np.testing.assert_array_equal(r.best_model.params["mix.q"], 0.0)

    def test_non_finite_restart_aborts(self, monkeypatch):
        def boom(*args, **kwargs):
            raise NonFiniteError("gradient is not finite", path="alice.W0")

        monkeypatch.setattr(training, "gradients", boom)
        r = train(np.full(64, 1 / 64), ModelSpec(widths=(4,)), TrainConfig(steps=5, **{**FAST, "restarts": 2}))
        assert r.verdict == "not_learned"
        assert math.isinf(r.best_distance)
        assert all(x.status.startswith("aborted") and "alice.W0" in x.status for x in r.restarts)

    def test_rejects_invalid_target(self):
        with pytest.raises(ValidationError):
            train(np.full(64, 1 / 60), ModelSpec(widths=(4,)), TrainConfig(steps=1, **FAST))

    def test_result_json_round_trip(self):
        r = train(np.full(64, 1 / 64), ModelSpec(widths=(4,)), TrainConfig(steps=5, **FAST))
        back = TrainResult.from_dict(json.loads(json.dumps(r.to_dict())))
        assert back.best_distance == r.best_distance
        assert back.verdict == r.verdict
        assert back.restarts == r.restarts
        np.testing.assert_array_equal(back.best_distribution, r.best_distribution)


class TestResponseTables:
    def test_resolution_validated(self):
        with pytest.raises(ValidationError):
            extract_response_functions(init_model(LayerConfig(), (4,), seed=0), 1)

    def test_shapes(self):
        m = init_model(LayerConfig(2, 3, 1), (4,), seed=0, sharing=Sharing.shared_all(2))
        t = extract_response_functions(m, 5)
        assert t.tables["alice"].shape == (2, 3, 1, 5, 5, 4)
        assert t.tables["bob"].shape == (2, 2, 1, 5, 5, 4)
        assert t.tables["charlie"].shape == (2, 2, 3, 5, 5, 4)
        np.testing.assert_allclose(t.points, [0.1, 0.3, 0.5, 0.7, 0.9])
        np.testing.assert_allclose(t.tables["bob"].sum(axis=-1), 1)

    def test_table_entries_match_network(self):
        m = init_model(LayerConfig(), (4,), seed=1)
        t = extract_response_functions(m, 4)
        net = m.network("charlie", (0, 0))
        np.testing.assert_allclose(t.tables["charlie"][0, 0, 0, 1, 3], net(0.375, 0.875))

    def test_reconstruction_constant_responses(self):
        m = init_model(LayerConfig(), (4,), seed=0)
        for k in m.params:
            m.params[k] = np.zeros_like(m.params[k])
        p = reconstruct_from_tables(extract_response_functions(m, 3))
        np.testing.assert_allclose(p, 1 / 64, atol=1e-15)

    def test_reconstruction_matches_sampling(self):
        m = init_model(LayerConfig(2, 2, 2), (16, 16), seed=2024)
        p_table = reconstruct_from_tables(extract_response_functions(m, 256))
        p_mc = model_distribution_batched(m, 10**6, 99)
        assert euclidean_distance(p_table, p_mc) < 2e-3

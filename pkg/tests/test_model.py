import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lhvnet import NonFiniteError, ValidationError
from lhvnet.model import (
    LayerConfig,
    Sharing,
    flatten,
    gradients,
    init_model,
    model_distribution,
    model_distribution_batched,
    party_response,
    sample_hidden,
    unflatten_into,
)


def zero_model(cfg=(1, 1, 1), widths=(8,)):
    m = init_model(LayerConfig(*cfg), widths, seed=0)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


def single_layer_estimator(model, samples):
    """Direct sample loop for a (1,1,1) model: mean over samples of A x B x C."""
    A = model.network("alice", (0, 0))
    B = model.network("bob", (0, 0))
    C = model.network("charlie", (0, 0))
    P = np.zeros((4, 4, 4))
    for al, be, ga in samples:
        P += np.einsum("a,b,c->abc", A(be, ga), B(ga, al), C(al, be))
    return P.ravel() / len(samples)


class TestInit:
    def test_deterministic(self):
        m1 = init_model(LayerConfig(2, 1, 2), (16, 16), seed=7)
        m2 = init_model(LayerConfig(2, 1, 2), (16, 16), seed=7)
        assert m1.params.keys() == m2.params.keys()
        for k in m1.params:
            assert np.array_equal(m1.params[k], m2.params[k])

    def test_different_seeds_differ(self):
        m1 = init_model(LayerConfig(), (8,), seed=1)
        m2 = init_model(LayerConfig(), (8,), seed=2)
        assert not np.array_equal(m1.params["alice.W0"], m2.params["alice.W0"])

    @pytest.mark.parametrize("cfg,count", [((1, 1, 1), 3), ((2, 2, 2), 12), ((1, 2, 3), 6 + 3 + 2)])
    def test_network_count(self, cfg, count):
        m = init_model(LayerConfig(*cfg), (8,), seed=0)
        assert m.n_networks() == count
        assert len(list(m.networks())) == count

    def test_bank_shapes(self):
        m = init_model(LayerConfig(2, 3, 4), (8,), seed=0)
        assert m.params["alice.W0"].shape[:2] == (1, 12)
        assert m.params["bob.W0"].shape[:2] == (1, 8)
        assert m.params["charlie.W0"].shape[:2] == (1, 6)

    def test_mixture_starts_uniform(self):
        q, r, s = init_model(LayerConfig(2, 3, 1), (8,), seed=0).mixture()
        np.testing.assert_allclose(q, 0.5)
        np.testing.assert_allclose(r, 1 / 3)
        np.testing.assert_allclose(s, 1.0)

    @pytest.mark.parametrize("widths", [(), (0,), (8, -1)])
    def test_bad_widths(self, widths):
        with pytest.raises(ValidationError):
            init_model(LayerConfig(), widths, seed=0)

    def test_layer_config_limits(self):
        with pytest.raises(ValidationError):
            LayerConfig(0, 1, 1)
        with pytest.raises(ValidationError):
            LayerConfig(8, 8, 2)

    def test_copy_zero_matches_independent(self):
        single = init_model(LayerConfig(), (8,), seed=3)
        multi = init_model(LayerConfig(), (8,), seed=3, sharing=Sharing.shared_all(3))
        for k in single.params:
            assert np.array_equal(multi.params[k][0], single.params[k][0])


class TestPartyResponse:
    def test_zero_weights_uniform(self):
        net = zero_model().network("alice", (0, 0))
        np.testing.assert_allclose(party_response(net, 0.3, 0.9), 0.25)

    def test_bias_saturation(self):
        net = zero_model().network("bob", (0, 0))
        net.biases[-1] = np.array([50.0, 0, 0, 0])
        out = party_response(net, 0.1, 0.2)
        assert out[0] == pytest.approx(1.0, abs=1e-20)
        assert np.all(out[1:] < 1e-21)

    @given(x=st.floats(0, 1), y=st.floats(0, 1), seed=st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_normalized(self, x, y, seed):
        net = init_model(LayerConfig(), (8, 8), seed=seed).network("charlie", (0, 0))
        out = party_response(net, x, y)
        assert out.min() >= 0
        assert abs(out.sum() - 1) < 1e-9

    def test_fourier_features(self):
        m = init_model(LayerConfig(), (8,), seed=0, fourier=3)
        assert m.params["alice.W0"].shape[2] == 2 * 7
        out = party_response(m.network("alice", (0, 0)), np.linspace(0, 1, 5), 0.5)
        np.testing.assert_allclose(out.sum(axis=-1), 1, atol=1e-12)

    def test_vectorized(self):
        net = init_model(LayerConfig(), (8,), seed=0).network("alice", (0, 0))
        xs = np.linspace(0, 1, 7)
        batch = party_response(net, xs, 0.25)
        for x, row in zip(xs, batch):
            np.testing.assert_allclose(party_response(net, x, 0.25), row, atol=1e-15)


class TestModelDistribution:
    def test_uniform_responses(self, rng):
        m = zero_model((2, 2, 2))
        m.params["mix.q"] = rng.normal(size=(1, 2))
        p = model_distribution(m, sample_hidden(50, 0))
        np.testing.assert_allclose(p, 1 / 64, atol=1e-15)

    def test_single_layer_matches_direct_loop(self):
        m = init_model(LayerConfig(), (8, 8), seed=4)
        s = sample_hidden(40, 9)
        np.testing.assert_allclose(model_distribution(m, s), single_layer_estimator(m, s[0]), atol=1e-14)

    def test_zero_weight_layers_drop_out(self):
        big = init_model(LayerConfig(2, 1, 1), (8,), seed=5)
        big.params["mix.q"] = np.array([[60.0, -60.0]])  # q = (1, ~0)
        small = init_model(LayerConfig(1, 1, 1), (8,), seed=0)
        # keep layer i = 0 of the (2,1,1) model: Bob's (i,l) and Charlie's (i,j) banks
        for k in small.params:
            if k.startswith("alice"):
                small.params[k] = big.params[k].copy()
            elif k.startswith(("bob", "charlie")):
                small.params[k] = big.params[k][:, :1].copy()
        s = sample_hidden(64, 1)
        np.testing.assert_allclose(model_distribution(big, s), model_distribution(small, s), atol=1e-14)

    def test_empty_samples(self):
        with pytest.raises(ValidationError):
            model_distribution(zero_model(), np.zeros((0, 3)))

    def test_shared_all_one_copy_is_independent(self):
        a = init_model(LayerConfig(), (8,), seed=11)
        b = init_model(LayerConfig(), (8,), seed=11, sharing=Sharing.shared_all(1))
        s = sample_hidden(256, 2)
        assert np.array_equal(model_distribution(a, s), model_distribution(b, s))

    def test_shared_all_is_uniform_mixture_of_copies(self):
        m = init_model(LayerConfig(), (8,), seed=2, sharing=Sharing.shared_all(3))
        s = sample_hidden(100, 3)
        parts = []
        for c in range(3):
            sub = init_model(LayerConfig(), (8,), seed=0)
            sub.params = {k: v[c:c + 1].copy() for k, v in m.params.items()}
            parts.append(model_distribution(sub, s))
        np.testing.assert_allclose(model_distribution(m, s), np.mean(parts, axis=0), atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.tuples(*[st.integers(1, 2)] * 3), copies=st.integers(1, 3))
    def test_valid_distribution(self, seed, k, copies):
        sharing = Sharing.shared_all(copies) if copies > 1 else Sharing()
        m = init_model(LayerConfig(*k), (6,), seed=seed, sharing=sharing)
        r = np.random.default_rng(seed)
        for key in m.params:
            m.params[key] = m.params[key] + r.normal(scale=2.0, size=m.params[key].shape)
        p = model_distribution(m, sample_hidden(64, seed, sharing))
        assert p.shape == (64,)
        assert p.min() >= 0
        assert abs(p.sum() - 1) < 1e-9

    def test_causal_constraint(self, rng):
        m = init_model(LayerConfig(2, 2, 2), (8,), seed=1)
        s = sample_hidden(32, 4)[0]
        for party, excluded in (("alice", 0), ("bob", 1), ("charlie", 2)):
            moved = s.copy()
            moved[:, excluded] = rng.random(len(s))
            cols = {"alice": (1, 2), "bob": (2, 0), "charlie": (0, 1)}[party]
            for _, p, layer, net in m.networks():
                if p != party:
                    continue
                before = net(s[:, cols[0]], s[:, cols[1]])
                after = net(moved[:, cols[0]], moved[:, cols[1]])
                assert np.array_equal(before, after)

    def test_estimator_error_scales_as_inverse_sqrt(self):
        m = init_model(LayerConfig(2, 2, 2), (16,), seed=8)
        ref = model_distribution_batched(m, 2**22, 12345)
        ratios = []
        for seed in range(10):
            errs = [np.linalg.norm(model_distribution(m, sample_hidden(n, [seed, n])) - ref)
                    for n in (1000, 4000, 16000)]
            ratios += [errs[0] / errs[1], errs[1] / errs[2]]
        assert 1.6 <= np.median(ratios) <= 2.6


class TestSampling:
    def test_deterministic(self):
        a, b = sample_hidden(3, 42), sample_hidden(3, 42)
        assert np.array_equal(a, b)
        assert a.shape == (1, 3, 3)
        assert a.min() >= 0 and a.max() < 1

    def test_shared_pair_reuses_free_stream(self):
        s = sample_hidden(100, 1, Sharing.shared_pair(2, (0, 1)))
        assert s.shape == (2, 100, 3)
        assert np.array_equal(s[0, :, 2], s[1, :, 2])
        assert not np.array_equal(s[0, :, 0], s[1, :, 0])
        s = sample_hidden(10, 1, Sharing.shared_pair(3, (1, 2)))
        assert np.array_equal(s[0, :, 0], s[2, :, 0])

    def test_mean(self):
        assert abs(sample_hidden(10**6, 0)[0, :, 0].mean() - 0.5) < 0.002

    def test_non_positive(self):
        with pytest.raises(ValidationError):
            sample_hidden(0, 1)


class TestGradients:
    def _fd(self, m, s, t, loss, h=1e-6):
        keys = list(m.params)
        x = flatten(m.params, keys)
        fd = np.zeros_like(x)
        probe = m.copy()
        for i in range(len(x)):
            for sign in (1, -1):
                xp = x.copy()
                xp[i] += sign * h
                unflatten_into(probe.params, keys, xp)
                fd[i] += sign * gradients(probe, s, t, loss)[0]
        return fd / (2 * h), keys

    @pytest.mark.parametrize("loss", ["kl", "euclidean"])
    def test_finite_differences(self, rng, loss):
        m = init_model(LayerConfig(), (8,), seed=3)
        s = sample_hidden(16, 5)
        t = rng.dirichlet(np.ones(64))
        fd, keys = self._fd(m, s, t, loss)
        _, _, g = gradients(m, s, t, loss)
        ga = flatten(g, keys)
        assert np.linalg.norm(ga - fd) / np.linalg.norm(fd) < 1e-5

    def test_finite_differences_layered_shared(self, rng):
        m = init_model(LayerConfig(2, 1, 2), (4,), seed=1, sharing=Sharing.shared_pair(2, (0, 2)))
        m.params["mix.q"] = rng.normal(size=(2, 2))
        s = sample_hidden(8, 6, m.sharing)
        t = rng.dirichlet(np.ones(64))
        fd, keys = self._fd(m, s, t, "kl")
        ga = flatten(gradients(m, s, t, "kl")[2], keys)
        assert np.linalg.norm(ga - fd) / np.linalg.norm(fd) < 1e-5

    def test_stationary_at_target(self):
        m = init_model(LayerConfig(2, 2, 2), (8,), seed=2)
        s = sample_hidden(64, 1)
        target = model_distribution(m, s)
        _, _, g = gradients(m, s, target, "kl")
        assert np.sqrt(sum(np.sum(v**2) for v in g.values())) < 1e-8

    def test_duplicated_samples_same_gradient(self, rng):
        m = init_model(LayerConfig(), (8,), seed=2)
        s = sample_hidden(32, 1)
        t = rng.dirichlet(np.ones(64))
        _, _, g1 = gradients(m, s, t)
        _, _, g2 = gradients(m, np.concatenate([s, s], axis=1), t)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-14)

    def test_non_finite_parameter_path(self):
        m = init_model(LayerConfig(), (8,), seed=2)
        m.params["bob.W1"][0, 0, 3, 1] = np.nan
        with pytest.raises(NonFiniteError) as info:
            gradients(m, sample_hidden(8, 0), np.full(64, 1 / 64))
        assert info.value.path == "bob.W1"

from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from foldrare import vae
from foldrare.vae import ModelConfig

SMALL = ModelConfig(input_dims=(16, 16, 16), channels=(4, 8, 8), latent_dim=4, epochs=2, batch_size=4, augment_deg=0.0)


def kl_quadrature(mu, logvar):
    """KL(N(mu, s^2) || N(0, 1)) per dimension by numerical integration of q log(q/p)."""
    total = 0.0
    for m, lv in zip(mu, logvar):
        s = np.exp(lv / 2)
        f = lambda z: norm.pdf(z, m, s) * (norm.logpdf(z, m, s) - norm.logpdf(z))
        total += integrate.quad(f, m - 12 * s, m + 12 * s, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return total


class TestKL:
    def test_prior_is_zero(self):
        assert vae.kl_divergence(np.zeros(3), np.zeros(3)) == 0.0

    def test_unit_shift(self):
        assert vae.kl_divergence(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        mu, lv = rng.normal(0, 1.5, 4), rng.uniform(-2, 1.5, 4)
        assert abs(vae.kl_divergence(mu, lv) - kl_quadrature(mu, lv)) < 1e-6

    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
    def test_nonnegative(self, pairs):
        mu, lv = np.array(pairs).T
        assert vae.kl_divergence(mu, lv) >= -1e-12

    def test_torch_and_numpy_agree(self):
        rng = np.random.default_rng(0)
        mu, lv = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        t = vae.kl_divergence(torch.tensor(mu), torch.tensor(lv)).numpy()
        np.testing.assert_allclose(t, vae.kl_divergence(mu, lv), rtol=1e-12)


class TestReparameterize:
    def test_zero_eps(self):
        mu = np.array([0.3, -1.0])
        assert np.array_equal(vae.reparameterize(mu, np.array([0.5, 2.0]), np.zeros(2)), mu)

    def test_one_hot(self):
        out = vae.reparameterize(np.array([1.0, 2.0]), np.zeros(2), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out, [1.0, 3.0])

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(0)
        mu, lv = np.array([0.5, -1.0]), np.array([0.4, -1.2])
        z = vae.reparameterize(mu, lv, rng.standard_normal((10_000, 2)))
        sd = np.exp(lv / 2)
        se_mean = sd / 100
        assert np.all(np.abs(z.mean(0) - mu) < 3 * se_mean)
        assert np.all(np.abs(z.std(0) - sd) < 3 * sd / np.sqrt(2 * 10_000))


class TestModel:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(input_dims=(30, 32, 40))
        with pytest.raises(ValueError):
            ModelConfig(latent_dim=0)
        with pytest.raises(ValueError):
            ModelConfig(beta=-1)

    def test_dims_mismatch(self):
        m = vae.build_model(SMALL)
        with pytest.raises(ValueError):
            vae.encode(m, np.zeros((8, 8, 8)))

    def test_zero_input_zero_bias(self):
        m = vae.build_model(SMALL)
        with torch.no_grad():
            for mod in m.modules():
                if getattr(mod, "bias", None) is not None:
                    mod.bias.zero_()
        mu, lv = vae.encode(m, np.zeros(SMALL.input_dims))
        assert np.all(mu == 0) and np.all(lv == 0)

    def test_encode_deterministic(self):
        m = vae.build_model(SMALL)
        x = np.random.default_rng(0).random(SMALL.input_dims)
        a, b = vae.encode(m, x), vae.encode(m, x)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
    @settings(max_examples=20, deadline=None)
    def test_decode_in_unit_interval(self, z):
        out = vae.decode(vae.build_model(SMALL), np.array(z))
        assert out.min() >= 0 and out.max() <= 1

    def test_loss_decomposition(self):
        m = vae.build_model(SMALL)
        rng = np.random.default_rng(1)
        x = rng.random((2, *SMALL.input_dims))
        eps = rng.standard_normal((2, SMALL.latent_dim))
        r0, k0, t0 = vae.loss(m, x, eps, 0.0)
        assert np.array_equal(t0, r0)
        r, k, t = vae.loss(m, x, eps, 2.0)
        np.testing.assert_allclose(t - r, 2 * k, rtol=1e-6, atol=1e-4)

    def test_recon_zero_when_output_matches(self):
        m = vae.build_model(SMALL)
        target = vae.decode(m, np.zeros(SMALL.latent_dim))[0]
        # an input whose posterior mean decodes to itself is hard to build, so compare
        # against the decode of the input's own posterior mean
        x_hat = vae.reconstruct(m, target)[0]
        err = vae.reconstruction_error(m, target)[0]
        assert err == pytest.approx(np.sum((target - x_hat) ** 2))

    def test_reconstruction_error_order_invariant(self):
        m = vae.build_model(SMALL)
        x = np.random.default_rng(2).random((5, *SMALL.input_dims)).astype(np.float32)
        e = vae.reconstruction_error(m, x)
        assert np.array_equal(vae.reconstruction_error(m, x[::-1]), e[::-1])


class TestGradCheck:
    def test_correct_gradients(self):
        assert vae.grad_check() < 1e-4

    def test_detects_corruption(self):
        assert vae.grad_check(corrupt=1.01) > 1e-3

    def test_zero_parameters_and_input(self):
        m = vae.build_model(vae.TINY)
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        err = vae.grad_check(vae.TINY, m, np.zeros((1, *vae.TINY.input_dims)), np.zeros((1, 2)))
        assert err < 1e-4


class TestTrain:
    def data(self, n=8, seed=0):
        rng = np.random.default_rng(seed)
        x = np.zeros((n, *SMALL.input_dims), np.float32)
        for i in range(n):
            x[i, 8, :, rng.integers(4, 12)] = 1.0
        return x

    def test_deterministic_report_and_parameters(self):
        x = self.data()
        m1, r1 = vae.train(SMALL, x, x[:2])
        m2, r2 = vae.train(SMALL, x, x[:2])
        assert r1.to_csv() == r2.to_csv()
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_report_shape(self):
        x = self.data()
        _, r = vae.train(SMALL, x, x[:2])
        assert len(r.series("train", "total")) == SMALL.epochs == len(r.series("val", "total"))
        assert np.all(r.series("train", "kl") >= 0)
        assert r.to_csv().splitlines()[0] == "epoch,recon,kl,total,split"

    def test_loss_decreases(self):
        cfg = replace(SMALL, epochs=30, learning_rate=1e-3)
        _, r = vae.train(cfg, self.data(16), None)
        tot = r.series("train", "total")
        assert tot[-1] < 0.5 * tot[0]

    def test_large_beta_collapses_kl(self):
        cfg = replace(SMALL, epochs=30, learning_rate=1e-3, beta=1e3)
        _, r = vae.train(cfg, self.data(16), None)
        kl = r.series("train", "kl")
        assert kl[-1] < kl[0]

    def test_empty_train_set(self):
        with pytest.raises(ValueError):
            vae.train(SMALL, np.zeros((0, *SMALL.input_dims), np.float32))

    def test_non_finite_loss_aborts(self):
        x = self.data()
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="epoch 0"):
            vae.train(SMALL, x)


def test_checkpoint_round_trip(tmp_path):
    m = vae.build_model(SMALL)
    path = vae.save_checkpoint(m, tmp_path / "m.fvae")
    assert path.read_bytes()[:8] == b"FVAE0001"
    back = vae.load_checkpoint(path)
    assert back.config == SMALL
    for a, b in zip(m.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    raw = path.read_bytes()
    (tmp_path / "bad.fvae").write_bytes(raw[:-4])
    (tmp_path / "bad.json").write_text((tmp_path / "m.json").read_text())
    with pytest.raises(ValueError):
        vae.load_checkpoint(tmp_path / "bad.fvae")


class TestSelect:
    def test_single(self):
        row = {"beta": 2.0, "latent_dim": 8, "val_recon": 5.0, "auc": 0.6}
        assert vae.select_config([row]) is row

    def test_gate_excludes_better_auc(self):
        good = {"beta": 1.0, "latent_dim": 8, "val_recon": 10.0, "auc": 0.7}
        bad = {"beta": 4.0, "latent_dim": 8, "val_recon": 13.0, "auc": 0.7}
        assert vae.select_config([bad, good]) is good
        worse = {"beta": 4.0, "latent_dim": 8, "val_recon": 13.0, "auc": 0.9}
        assert vae.select_config([good, worse]) is good

    def test_argmax_among_passing(self):
        rows = [{"beta": b, "latent_dim": 8, "val_recon": 10.0 + b, "auc": a} for b, a in ((1, 0.6), (2, 0.8), (3, 0.7))]
        assert vae.select_config(rows)["beta"] == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            vae.select_config([])


def test_grid_search_small():
    rng = np.random.default_rng(0)
    x = rng.random((12, *SMALL.input_dims)).astype(np.float32) * 0.2
    proxy = x[:6] + 0.5
    cfg = replace(SMALL, epochs=1)
    best, table = vae.grid_search([1.0, 2.0], [2], cfg, x, x, proxy, k_folds=2)
    assert len(table) == 2
    chosen = [r for r in table if r["beta"] == best.beta and r["latent_dim"] == best.latent_dim][0]
    floor = min(r["val_recon"] for r in table)
    passing = [r for r in table if r["val_recon"] <= 1.25 * floor]
    assert chosen["auc"] == max(r["auc"] for r in passing)
    with pytest.raises(ValueError):
        vae.grid_search([], [2], cfg, x, x, proxy)

import numpy as np
import pytest

from zdcflow import numerics as nx
from zdcflow.latent import (
    Discriminator,
    FeatureNet,
    LatentGenerator,
    _terms,
    fingerprint,
    hinge_d_loss,
    kl_divergence,
    normalized_summands,
    vae_loss_gradnorm,
)
from zdcflow.model import ModelCheckpoint, VAEConfig, build_vae

from conftest import fd_grad, rel_err

TINY = VAEConfig(8, 8, base_channels=4, latent_channels=2, groups=2)


def _setup(seed, adv=True):
    rng = np.random.default_rng(seed)
    vae = build_vae(TINY, seed=seed, enforce_budget=False)
    for p in vae.parameters():
        p.data = rng.standard_normal(p.shape) * 0.2
    x = rng.standard_normal((2, 1, 8, 8))
    return vae, FeatureNet(width=4), Discriminator(width=4) if adv else None, x


@pytest.mark.parametrize("seed", range(5))
def test_grad_norms_match_finite_differences(seed):
    with nx.float64_mode():
        vae, fnet, disc, x = _setup(seed)
        _, _, rec = vae_loss_gradnorm(vae, fnet, disc, x, np.random.default_rng(seed), beta=0.1)
        for i in range(3):
            def value():
                with nx.no_grad():
                    return _terms(vae, fnet, disc, nx.Tensor(x), np.random.default_rng(seed), 0.1)[i].item()

            fd_norm = np.linalg.norm(fd_grad(value, x))
            assert abs(rec.grad_norms[i] - fd_norm) / fd_norm < 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_combined_gradient_is_sum_of_normalized_term_gradients(seed):
    with nx.float64_mode():
        vae, fnet, disc, x = _setup(seed)
        total, grads, rec = vae_loss_gradnorm(vae, fnet, disc, x, np.random.default_rng(seed), beta=0.1)
        params = vae.parameters()
        want = {p: np.zeros_like(p.data) for p in params}
        for i in range(3):
            loss = _terms(vae, fnet, disc, nx.Tensor(x), np.random.default_rng(seed), 0.1)[i]
            g = nx.backward(loss, inputs=params)
            for p in params:
                want[p] += g[p] / rec.grad_norms[i]
        for p in params:
            assert rel_err(grads[p], want[p]) < 1e-9
        assert total == pytest.approx(sum(normalized_summands(rec)), rel=1e-12)


@pytest.mark.parametrize("term", [0, 1, 2])
@pytest.mark.parametrize("c", [0.1, 10.0])
def test_normalized_summand_scale_invariance(term, c):
    with nx.float64_mode():
        vae, fnet, disc, x = _setup(7)
        _, _, base = vae_loss_gradnorm(vae, fnet, disc, x, np.random.default_rng(0), 0.1)
        scales = [1.0, 1.0, 1.0]
        scales[term] = c
        _, _, scaled = vae_loss_gradnorm(vae, fnet, disc, x, np.random.default_rng(0), 0.1, scales=tuple(scales))
    a, b = normalized_summands(base), normalized_summands(scaled)
    assert abs(a[term] - b[term]) <= 1e-6 * abs(a[term])
    assert scaled.grad_norms[term] == pytest.approx(c * base.grad_norms[term], rel=1e-9)


def test_adversarial_term_can_be_disabled():
    vae, fnet, _, x = _setup(1, adv=False)
    _, grads, rec = vae_loss_gradnorm(vae, fnet, None, x, np.random.default_rng(0))
    assert rec.l_adv is None and rec.grad_norms[2] is None
    assert normalized_summands(rec)[2] is None
    assert all(np.isfinite(g).all() for g in grads.values())


def test_kl_zero_at_prior():
    assert kl_divergence(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((2, 3)))).item() == 0.0
    assert kl_divergence(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.zeros((2, 3)))).item() == pytest.approx(0.5)


def test_hinge_loss_zero_when_separated():
    class Fixed:
        def __call__(self, x):
            return nx.Tensor(np.asarray(x))

    assert hinge_d_loss(Fixed(), np.full(4, 2.0), np.full(4, -2.0)).item() == 0.0


def test_feature_net_is_frozen_and_zero_on_identity():
    fnet = FeatureNet(width=4)
    assert fnet.parameters() == []
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    assert fnet.distance(x, x).item() == 0.0


def test_latent_generator_checks_compatibility():
    vae = build_vae(TINY, enforce_budget=False)
    vck = ModelCheckpoint("vae", {"detector": "ZN16", "vae": TINY.to_dict()}, vae.state_dict())
    fm = ModelCheckpoint("unet_latent", {"detector": "ZN", "latent_shape": [2, 2, 2]}, {})
    with pytest.raises(ValueError):
        LatentGenerator(vck, fm)
    fm = ModelCheckpoint("unet_latent", {"detector": "ZN16", "latent_shape": [4, 2, 2]}, {})
    with pytest.raises(ValueError):
        LatentGenerator(vck, fm)
    fm = ModelCheckpoint("unet_latent", {"detector": "ZN16", "latent_shape": [2, 2, 2], "vae_fingerprint": "x"}, {})
    with pytest.raises(ValueError):
        LatentGenerator(vck, fm)
    with pytest.raises(ValueError):
        LatentGenerator(vck, ModelCheckpoint("unet_pixel", {}, {}))
    assert fingerprint(vck) == fingerprint(vck)

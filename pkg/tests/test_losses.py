import numpy as np
import pytest
from numpy.testing import assert_allclose

from implicit_keypoints.field.losses import LossError, LossWeights, loss_terms, sdf_losses, udf_losses
from implicit_keypoints.field.network import ImplicitNet, flatten_params, siren_init, unflatten_into
from implicit_keypoints.field.posenc import PosEncConfig
from implicit_keypoints.geometry import KeypointSet, SphereField, sphere_sdf, sphere_sdf_gradient
from implicit_keypoints.sampling import SampleConfig, TrainingSet, make_training_set, make_udf_training_set


def small_batch(seed=0, n=12):
    f = SphereField.from_points([[0.1, 0.0, 0.0], [-0.3, 0.2, 0.1]], 0.08)
    return make_training_set(f, SampleConfig(n_volume=n, n_surface=n, seed=seed))


def random_net(activation, seed, widths=(6, 5), out_dim=1, posenc=PosEncConfig(2), latent_dim=0):
    net = siren_init(ImplicitNet(widths, out_dim, 30.0, posenc, activation, latent_dim), seed)
    rng = np.random.default_rng(seed + 1)
    for p in net.params:
        p += rng.normal(scale=0.05, size=p.shape)
    return net


def fd_grad(loss_fn, net, h=1e-6):
    flat = flatten_params(net.params)
    out = np.empty_like(flat)
    for i in range(flat.size):
        x = flat.copy()
        x[i] += h
        unflatten_into(net.params, x)
        up = loss_fn()
        x[i] -= 2 * h
        unflatten_into(net.params, x)
        out[i] = (up - loss_fn()) / (2 * h)
    unflatten_into(net.params, flat)
    return out


def test_single_sample_sdf_term():
    batch = TrainingSet(np.zeros((1, 3)), np.array([0.2]), np.zeros((1, 3)), np.array([False]))
    terms, _, _ = loss_terms([0.5], [[1.0, 0, 0]], batch)
    assert_allclose(terms.sdf, 0.3, atol=1e-15)
    assert terms.grad == 0 and terms.normal == 0


def test_analytic_field_has_zero_losses():
    f = SphereField.from_points([[0.1, 0.0, 0.0], [-0.4, 0.3, 0.2]], 0.08)
    batch = make_training_set(f, SampleConfig(n_volume=500, n_surface=500, seed=3))
    terms, _, _ = loss_terms(sphere_sdf(batch.points, f), sphere_sdf_gradient(batch.points, f), batch)
    assert terms.sdf < 1e-15
    assert terms.grad < 1e-12
    assert terms.normal < 1e-12


def test_loss_weights_combine():
    batch = small_batch()
    rng = np.random.default_rng(0)
    vals, grads = rng.normal(size=len(batch)), rng.normal(size=(len(batch), 3))
    t, _, _ = loss_terms(vals, grads, batch, LossWeights(2.0, 0.5, 0.25))
    assert_allclose(t.total, 2.0 * t.sdf + 0.5 * t.grad + 0.25 * t.normal, rtol=1e-15)


def test_loss_terms_derivatives_by_finite_differences():
    batch = small_batch()
    rng = np.random.default_rng(4)
    vals, grads = rng.normal(size=len(batch)), rng.normal(size=(len(batch), 3))
    _, dv, dg = loss_terms(vals, grads, batch)
    h = 1e-7
    for i in (0, 5, 20):
        for c in range(3):
            gp, gm = grads.copy(), grads.copy()
            gp[i, c] += h
            gm[i, c] -= h
            fd = (loss_terms(vals, gp, batch)[0].total - loss_terms(vals, gm, batch)[0].total) / (2 * h)
            assert_allclose(dg[i, c], fd, rtol=1e-5, atol=1e-9)
        vp, vm = vals.copy(), vals.copy()
        vp[i] += h
        vm[i] -= h
        fd = (loss_terms(vp, grads, batch)[0].total - loss_terms(vm, grads, batch)[0].total) / (2 * h)
        assert_allclose(dv[i], fd, rtol=1e-6)


@pytest.mark.parametrize("activation", ["sine", "relu", "selu", "linear"])
def test_sdf_parameter_gradients_match_finite_differences(activation):
    net = random_net(activation, seed=2)
    batch = small_batch(seed=5)
    _, grads = sdf_losses(net, batch)
    fd = fd_grad(lambda: sdf_losses(net, batch)[0].total, net)
    an = flatten_params(grads)
    assert np.abs(an - fd).max() / np.abs(fd).max() < 1e-4


def test_latent_gradient_matches_finite_differences():
    net = random_net("sine", seed=6, latent_dim=4)
    batch = small_batch(seed=1)
    code = np.array([0.1, -0.2, 0.05, 0.3])
    _, grads, dcode = sdf_losses(net, batch, latent=code, want_latent_grad=True)
    h = 1e-6
    fd = []
    for i in range(4):
        e = np.eye(4)[i] * h
        fd.append((sdf_losses(net, batch, latent=code + e)[0].total
                   - sdf_losses(net, batch, latent=code - e)[0].total) / (2 * h))
    assert_allclose(dcode, fd, rtol=1e-5, atol=1e-9)
    fdp = fd_grad(lambda: sdf_losses(net, batch, latent=code)[0].total, net)
    assert np.abs(flatten_params(grads) - fdp).max() / np.abs(fdp).max() < 1e-4


def test_udf_gradients_match_finite_differences():
    kps = KeypointSet([[0, 0, 0], [0.4, 0.1, 0]], labels=[0, 2], label_count=3)
    batch = make_udf_training_set(kps, SampleConfig(n_volume=10, n_surface=10, seed=2))
    net = random_net("sine", seed=3, out_dim=3)
    loss, grads = udf_losses(net, batch)
    assert_allclose(loss, np.abs(net(batch.points) - batch.udf).mean(), rtol=1e-14)
    fd = fd_grad(lambda: udf_losses(net, batch)[0], net)
    assert np.abs(flatten_params(grads) - fd).max() / np.abs(fd).max() < 1e-4


def test_empty_batch_and_wrong_heads():
    net = random_net("sine", seed=0)
    empty = TrainingSet(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0, bool))
    with pytest.raises(LossError):
        sdf_losses(net, empty)
    with pytest.raises(LossError):
        sdf_losses(random_net("sine", 0, out_dim=2), small_batch())
    with pytest.raises(LossError):
        udf_losses(net, small_batch())
    with pytest.raises(ValueError):
        LossWeights(1.0, -0.1, 0.0)

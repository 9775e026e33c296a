import numpy as np
import pytest

from conftest import make_params
from ssnn import kernels
from ssnn.generative import joint_log_prob
from ssnn.inference import posterior_log_prob

needs_ext = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")


def case(seed=0, T=9, **kw):
    theta, phi = make_params(seed=seed, **kw)
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(T, theta.m))
    noise = rng.gumbel(size=(T, theta.K * theta.M))
    return theta, phi, x, noise


@needs_ext
@pytest.mark.parametrize("relaxed", [False, True])
@pytest.mark.parametrize("self_transitions", [True, False])
def test_backends_agree(relaxed, self_transitions):
    if relaxed and not self_transitions:
        pytest.skip("relaxed mode needs self-transitions")
    theta, phi, x, noise = case(seed=1, self_transitions=self_transitions)
    args = (x, theta.view(), phi.view(), noise, 0.4)
    kw = dict(relaxed=relaxed, self_transitions=self_transitions)
    c = kernels.elbo_and_grad(*args, backend="cython", **kw)
    p = kernels.elbo_and_grad(*args, backend="python", **kw)
    np.testing.assert_array_equal(c.z, p.z)
    np.testing.assert_array_equal(c.d, p.d)
    assert c.elbo == pytest.approx(p.elbo, rel=1e-12)
    for k in c.grad_theta:
        np.testing.assert_allclose(c.grad_theta[k], p.grad_theta[k], rtol=1e-9, atol=1e-11)
    for k in c.grad_phi:
        np.testing.assert_allclose(c.grad_phi[k], p.grad_phi[k], rtol=1e-9, atol=1e-11)


@needs_ext
def test_backends_agree_with_carried_state():
    theta, phi, x, noise = case(seed=2)
    st = (np.full(phi.e, 0.3), np.full(phi.e, -0.2))
    c = kernels.elbo_and_grad(x, theta.view(), phi.view(), noise, 0.4, encoder_state=st, backend="cython")
    p = kernels.elbo_and_grad(x, theta.view(), phi.view(), noise, 0.4, encoder_state=st, backend="python")
    assert c.elbo == pytest.approx(p.elbo, rel=1e-12)
    np.testing.assert_allclose(c.encoder_state[0], p.encoder_state[0], atol=1e-14)
    np.testing.assert_allclose(c.grad_phi["enc_fwd_W"], p.grad_phi["enc_fwd_W"], atol=1e-11)


@pytest.mark.parametrize("backend", ["python", pytest.param("cython", marks=needs_ext)])
def test_hard_elbo_is_joint_minus_posterior(backend):
    theta, phi, x, noise = case(seed=3, self_transitions=False)
    r = kernels.elbo_and_grad(x, theta.view(), phi.view(), noise, 0.2, self_transitions=False,
                              need_grad=False, backend=backend)
    from ssnn.generative import LatentPath
    path = LatentPath(r.z, r.d)
    assert r.log_joint == pytest.approx(joint_log_prob(x, path, theta), rel=1e-12)
    assert r.log_q == pytest.approx(posterior_log_prob(path, x, phi, False), rel=1e-12)
    assert r.elbo == pytest.approx(r.log_joint - r.log_q, rel=1e-12)


@pytest.mark.parametrize("backend", ["python", pytest.param("cython", marks=needs_ext)])
def test_theta_gradient_matches_differences(backend):
    theta, phi, x, noise = case(seed=4, T=6)
    tv, pv = theta.view(), phi.view()
    r = kernels.elbo_and_grad(x, tv, pv, noise, 0.3, backend=backend)
    step = 1e-5
    for name in ("dur_logits", "W_h", "b_sigma"):
        arr = tv[name]
        for idx in list(np.ndindex(arr.shape))[:6]:
            hi, lo = arr.copy(), arr.copy()
            hi[idx] += step
            lo[idx] -= step
            f = lambda a: kernels.elbo_and_grad(x, {**tv, name: a}, pv, noise, 0.3, need_grad=False,
                                                backend=backend).elbo
            fd = (f(hi) - f(lo)) / (2 * step)
            assert abs(r.grad_theta[name][idx] - fd) / max(1.0, abs(fd)) < 1e-6


def test_noise_shape_checked():
    theta, phi, x, _ = case()
    with pytest.raises(Exception):
        kernels.elbo_and_grad(x, theta.view(), phi.view(), np.zeros((2, 2)), 0.3)

import math

import numpy as np
import pytest
import torch

from cagem.model import ModelConfig, build_model


def toy_cagem_config(k=3, x_dim=3, z1_dim=2, z2_dim=2, hidden=(4,),
                     batch_norm=True, **kw):
    return ModelConfig(x_dim=x_dim, z1_dim=z1_dim, z2_dim=z2_dim, n_clusters=k,
                       hidden=hidden, variant="cagem", batch_norm=batch_norm, **kw)


def toy_vae_config(x_dim=3, z1_dim=2, z2_dim=2, hidden=(4,), batch_norm=True, **kw):
    return ModelConfig(x_dim=x_dim, z1_dim=z1_dim, z2_dim=z2_dim, hidden=hidden,
                       variant="vae", batch_norm=batch_norm, **kw)


def toy_model(config, seed=0):
    torch.manual_seed(seed)
    return build_model(config)


def random_binary(batch, dim, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.bernoulli(torch.full((batch, dim), 0.4, dtype=torch.float64),
                           generator=g)


def fixed_noise(batch, config, seed=0):
    g = torch.Generator().manual_seed(seed)
    noise = {"z1": torch.randn(batch, config.z1_dim, dtype=torch.float64,
                               generator=g)}
    if config.variant == "cagem":
        noise["z2"] = torch.randn(batch, config.n_clusters, config.z2_dim,
                                  dtype=torch.float64, generator=g)
    else:
        noise["z2"] = torch.randn(batch, config.z2_dim, dtype=torch.float64,
                                  generator=g)
    return noise


def finite_diff_grads(fn, params, step=1e-4):
    """Central finite differences of scalar fn() w.r.t. each tensor in params."""
    grads = []
    for p in params:
        flat = p.data.view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = fn()
            flat[i] = orig - step
            f_minus = fn()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g.view_as(p))
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                              torch.full_like(n, atol))
        rel = (a - n).abs() / denom
        assert rel.max().item() <= rtol or (a - n).abs().max().item() <= atol, (
            f"gradient mismatch: max rel {rel.max().item():.3e}")


def linear_gaussian_vae(q_std_scale=1.0):
    """1-d linear-Gaussian VAE with tractable marginal likelihood.

    Generative side: z2 ~ N(0,1); z1 = a z2 + s1 eps; x = w z1 + sx eps.
    The inference net is set to the exact posterior, with optional standard
    deviation inflation q_std_scale to loosen the bound on purpose.
    """
    a, s1, w, sx = 0.8, 0.6, 1.2, 0.5
    v1 = a * a + s1 * s1            # marginal variance of z1
    v = w * w * v1 + sx * sx        # marginal variance of x
    cfg = ModelConfig(x_dim=1, z1_dim=1, z2_dim=1, hidden=(), variant="vae",
                      likelihood="gaussian", batch_norm=False)
    model = build_model(cfg)

    def set_affine(linear, weight, bias):
        with torch.no_grad():
            linear.weight.fill_(weight)
            linear.bias.fill_(bias)

    set_affine(model.p_z1.mean, a, 0.0)
    set_affine(model.p_z1.log_std, 0.0, math.log(s1))
    set_affine(model.p_x.mean, w, 0.0)
    set_affine(model.p_x.log_std, 0.0, math.log(sx))
    # exact posteriors: z1|x and z2|z1 of the joint Gaussian
    post_z1_coeff = w * v1 / v
    post_z1_std = math.sqrt(v1 - w * w * v1 * v1 / v)
    post_z2_coeff = a / v1
    post_z2_std = math.sqrt(1.0 - a * a / v1)
    set_affine(model.q_z1.mean, post_z1_coeff, 0.0)
    set_affine(model.q_z1.log_std, 0.0, math.log(post_z1_std * q_std_scale))
    set_affine(model.q_z2.mean, post_z2_coeff, 0.0)
    set_affine(model.q_z2.log_std, 0.0, math.log(post_z2_std * q_std_scale))

    def exact_log_px(x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return -0.5 * np.log(2 * np.pi * v) - x * x / (2 * v)

    return model, exact_log_px, v


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)

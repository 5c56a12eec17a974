"""Numerical self-checks: finite-difference gradients and Langevin chains on a conjugate model."""

from __future__ import annotations

import numpy as np

from .elvm import Elvm, ElvmConfig, LangevinConfig, LinearGaussianModel, infer_latent
from .nn import FunctionNet, LayerSpec, ParamStore, RngStream, Sequential, grad_check
from .uncertainty import HeadsConfig, UncertaintyHeads

GRAD_TOL = 1e-4


def _off_kink(rng, shape, margin=0.1):
    """Values bounded away from zero so piecewise-linear kinks are never crossed."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _layer_cases(rng):
    """(name, specs, input, train flag) for each catalog layer kind."""
    img = rng.standard_normal((2, 3, 6, 6))
    return [
        ("dense", [LayerSpec("dense", {"in_features": 5, "out_features": 4})],
         rng.standard_normal((3, 5)), False),
        ("conv2d", [LayerSpec("conv2d", {"in_channels": 3, "out_channels": 4})], img, False),
        ("conv2d_stride2", [LayerSpec("conv2d", {"in_channels": 3, "out_channels": 2, "stride": 2})],
         img, False),
        ("conv2d_1x1", [LayerSpec("conv2d", {"in_channels": 3, "out_channels": 2, "kernel_size": 1})],
         img, False),
        ("leaky_relu", [LayerSpec("leaky_relu")], _off_kink(rng, (2, 3, 4, 4)), False),
        ("relu", [LayerSpec("relu")], _off_kink(rng, (2, 3, 4, 4)), False),
        ("sigmoid", [LayerSpec("sigmoid")], rng.standard_normal((2, 3, 4, 4)), False),
        ("batch_norm", [LayerSpec("batch_norm", {"channels": 3})], img, True),
        ("batch_norm_eval", [LayerSpec("batch_norm", {"channels": 3})], img, False),
        ("nearest_upsample", [LayerSpec("nearest_upsample")], img, False),
        ("bilinear_upsample", [LayerSpec("bilinear_upsample", {"factor": 4})], img, False),
        ("flatten", [LayerSpec("flatten"), LayerSpec("dense", {"in_features": 108, "out_features": 3})],
         img, False),
    ]


def _dropout_net(rng):
    store = ParamStore()
    net = Sequential.from_specs([LayerSpec("dropout", {"rate": 0.3})], store, "drop", rng)

    # a fixed mask on every call keeps the function differentiable
    def fwd(x, train):
        return net.forward(x, train, np.random.default_rng(11))

    return FunctionNet(store, fwd, net.backward)


def _elvm_net(seed: int):
    cfg = ElvmConfig(image_size=32, width=4, enc_channels=(4, 4, 4), latent_dim=3, ensemble=2,
                     prior_channels=4, seed=seed)
    model = Elvm(cfg)
    rng = RngStream(seed, 90).generator()
    z = rng.standard_normal((cfg.ensemble, 1, cfg.latent_dim))

    def fwd(x, train):
        preds, det, cache = model.forward_train(x, z)
        mu, lv, pc = model.prior_net.forward(x)
        out = np.concatenate([preds.reshape(-1), det.reshape(-1), mu.reshape(-1), lv.reshape(-1)])
        return out, (cache, pc, preds.shape, det.shape, mu.shape)

    def bwd(cache, g, grads):
        c, pc, ps, ds, ms = cache
        a, b, k = int(np.prod(ps)), int(np.prod(ds)), int(np.prod(ms))
        g_preds, g_det = g[:a].reshape(ps), g[a:a + b].reshape(ds)
        g_mu, g_lv = g[a + b:a + b + k].reshape(ms), g[a + b + k:].reshape(ms)
        model.backward_train(c, g_preds, g_det, grads)
        return model.prior_net.backward(pc, g_mu, g_lv, grads)

    x = rng.uniform(0, 1, (1, 1, 32, 32))
    return FunctionNet(model.store, fwd, bwd), x


def _elvm_latent_net(seed: int):
    """Gradient with respect to z: the Langevin pullback."""
    cfg = ElvmConfig(image_size=32, width=4, enc_channels=(4, 4, 4), latent_dim=3, ensemble=2,
                     prior_channels=4, seed=seed)
    model = Elvm(cfg)
    rng = RngStream(seed, 91).generator()
    x = rng.uniform(0, 1, (2, 1, 32, 32))
    gen = model.generator(x)
    store = ParamStore()

    def fwd(z, train):
        f, pull = gen(z)
        return f, pull

    def bwd(pull, g, grads):
        return pull(g)

    return FunctionNet(store, fwd, bwd), rng.standard_normal((2, cfg.latent_dim))


def _heads_nets(seed: int):
    heads = UncertaintyHeads(HeadsConfig(aleatoric_width=4, predictive_width=4, seed=seed))
    rng = RngStream(seed, 92).generator()
    x = rng.uniform(0, 1, (2, 1, 16, 16))
    xp = rng.uniform(0, 1, (2, 2, 16, 16))
    return [("aleatoric_head", heads.aleatoric_net, x, False),
            ("predictive_head", heads.predictive_net, xp, True)]


def gradcheck_suite(seed: int = 0, n_coords: int = 64) -> dict[str, float]:
    """Max relative FD error per case; keys name the layer kind or network."""
    rng = RngStream(seed, 93).generator()
    results = {}
    for name, specs, x, train in _layer_cases(rng):
        net = Sequential.from_specs(specs, ParamStore(), name, rng)
        results[name] = grad_check(net, x, rng=rng, n_coords=n_coords, train=train)
    results["dropout"] = grad_check(_dropout_net(rng), rng.standard_normal((2, 3, 4, 4)), rng=rng,
                                    n_coords=n_coords)
    for name, net, x, train in _heads_nets(seed):
        results[name] = grad_check(net, x, rng=rng, n_coords=n_coords, train=train)
    net, x = _elvm_net(seed)
    # training never needs d/dx of the full model, so only parameters are probed
    results["elvm"] = grad_check(net, x, rng=rng, n_coords=4 * n_coords, include_input=False)
    net, z = _elvm_latent_net(seed)
    results["elvm_latent"] = grad_check(net, z, rng=rng, n_coords=n_coords)
    return results


def conjugate_chain_check(a: float = 2.0, b: float = 0.5, y: float = 4.25, n_chains: int = 100,
                          steps: int = 500, step_size: float = 0.1, burn_in: int = 250,
                          seed: int = 0) -> dict[str, float]:
    """Pooled mean/variance of Langevin chains on ``y = a z + b + noise`` next to the closed form.

    Chains start from the N(0, 1) prior and the first ``burn_in`` states are dropped.
    """
    lg = LinearGaussianModel(a, b)
    cfg = LangevinConfig(steps=steps, step_size=step_size, sigma_lik=1.0, conditional=False)
    chain = infer_latent(lg, np.zeros((n_chains, 1)), np.full((n_chains, 1), y), cfg,
                         np.random.default_rng(seed))
    kept = chain.zs[burn_in:, :, 0]
    m_true, v_true = lg.posterior(y)
    return {"mean": float(kept.mean()), "var": float(kept.var()),
            "true_mean": float(m_true), "true_var": float(v_true)}

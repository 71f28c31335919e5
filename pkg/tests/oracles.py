"""Independent reference implementations used as test oracles.

Each one is written the slow, direct way so it shares no code path with the
package implementation it checks.
"""

import math

import numpy as np


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def same_pads(n_in, n_out, k=3, s=2):
    total = max((n_out - 1) * s + k - n_in, 0)
    return total // 2


def naive_conv(x, w, b):
    """Loop-by-loop stride-2 3x3 'same' convolution, identity activation, NHWC."""
    bsz, h, wd, c = x.shape
    ho, wo = math.ceil(h / 2), math.ceil(wd / 2)
    pt, pl = same_pads(h, ho), same_pads(wd, wo)
    out = np.zeros((bsz, ho, wo, w.shape[3]))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for di in range(3):
                    for dj in range(3):
                        r, q = 2 * i + di - pt, 2 * j + dj - pl
                        if 0 <= r < h and 0 <= q < wd:
                            out[n, i, j] += x[n, r, q] @ w[di, dj]
                out[n, i, j] += b
    return out


def naive_deconv(x, w, b):
    """Transposed convolution by scattering each input pixel through the kernel."""
    bsz, h, wd, c = x.shape
    ho, wo = 2 * h, 2 * wd
    pt, pl = same_pads(ho, h), same_pads(wo, wd)
    out = np.zeros((bsz, ho, wo, w.shape[3]))
    for n in range(bsz):
        for i in range(h):
            for j in range(wd):
                for di in range(3):
                    for dj in range(3):
                        r, q = 2 * i + di - pt, 2 * j + dj - pl
                        if 0 <= r < ho and 0 <= q < wo:
                            out[n, r, q] += x[n, i, j] @ w[di, dj]
    return out + b


def ols_normal_equations(t, y):
    """Solve [1 t]'[1 t] beta = [1 t]' y directly; returns (intercept, slope)."""
    t = np.asarray(t, dtype=float)
    X = np.column_stack([np.ones_like(t), t])
    beta = np.linalg.solve(X.T @ X, X.T @ np.asarray(y, dtype=float))
    return beta[0], beta[1]


def two_pass_corr(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)


def random_small_model(seed):
    """A tiny VAE with every layer kind and non-zero biases (off the ReLU kink)."""
    from stvae import vae

    rng = np.random.default_rng(seed)
    grid = int(rng.choice([4, 8]))
    model = vae.build_model(
        latent_dim=int(rng.integers(2, 4)),
        channels=(int(rng.integers(1, 4)), int(rng.integers(1, 4))),
        seed=seed,
        grid=grid,
    )
    for p in model.encoder_params + model.decoder_params:
        if p:
            p["b"] = rng.normal(scale=0.3, size=p["b"].shape)
    batch = rng.uniform(0.0, 1.0, size=(int(rng.integers(2, 5)), grid, grid))
    prior = rng.standard_normal((int(rng.integers(2, 6)), model.latent_dim))
    return model, batch, prior


def model_gradient_error(model, batch, prior, config, step=1e-5):
    """Largest relative error between analytic and central-difference vae_loss gradients."""
    from stvae import nn, vae

    _, _, _, grads = vae.vae_loss_and_grad(model, batch, prior, config)
    arrays = model.arrays()
    worst = 0.0
    for i, (a, g) in enumerate(zip(arrays, grads)):
        def f(v, i=i):
            trial = model.copy()
            arrs = trial.arrays()
            arrs[i] = v
            trial.set_arrays(arrs)
            return vae.vae_loss(trial, batch, prior, config)[0]

        fd = nn.finite_difference_gradient(f, a, step)
        worst = max(worst, float(rel_err(g, fd).max()))
    return worst


def beta_moments_quadrature(x, n_log=100, n_unit=40):
    """Posterior mean and second moment of beta for a two-node, two-visit
    CAR-AR series by brute-force grid integration.

    beta and phi are integrated out analytically on the joint Gaussian
    covariance built with Kronecker products. tau2 and eta2 are gridded on
    the log scale, psi and rho on (0, 1) with rho = 1 - s^2 to resolve the
    mass near 1. Weights are accumulated with a running log-sum-exp.
    """
    x = np.asarray(x, float)
    n_t, m = x.shape
    if (n_t, m) != (2, 2):
        raise ValueError("oracle covers the 2 x 2 case only")
    w = np.array([[0, 1], [1, 0]], float)
    lap = np.diag(w.sum(1)) - w
    xv = x.reshape(-1)
    ones = np.ones(n_t * m)
    ls = np.linspace(-12, 10, n_log)
    s2 = np.exp(ls)
    # IG(1, 0.1) density times the log-scale Jacobian
    log_prior_s = math.log(0.1) - 2 * ls - 0.1 / s2 + ls
    tau2, eta2 = s2[:, None], s2[None, :]
    lp_var = log_prior_s[:, None] + log_prior_s[None, :]
    u = (np.arange(n_unit) + 0.5) / n_unit
    acc = np.zeros(3)
    ref = None
    for psi in u:
        a = np.array([[1 + psi * psi, -psi], [-psi, 1.0]])
        for sv in u:
            rho = 1 - sv * sv
            q = rho * lap + (1 - rho) * np.eye(m)
            k = np.kron(np.linalg.inv(a), np.linalg.inv(q))
            kval, kvec = np.linalg.eigh(k)
            px, p1 = kvec.T @ xv, kvec.T @ ones
            d = tau2[..., None] * kval + eta2[..., None]
            prec = np.sum(p1**2 / d, -1) + 1 / 1000
            b = np.sum(p1 * px / d, -1)
            logw = (
                -0.5 * np.sum(np.log(d), -1)
                - 0.5 * np.sum(px**2 / d, -1)
                + 0.5 * b * b / prec
                - 0.5 * np.log(prec)
                + lp_var
                + math.log(2 * sv)
            )
            top = logw.max()
            if ref is None or top > ref:
                acc *= math.exp((ref if ref is not None else top) - top)
                ref = top
            wt = np.exp(logw - ref)
            mu = b / prec
            acc += [wt.sum(), (wt * mu).sum(), (wt * (mu * mu + 1 / prec)).sum()]
    return acc[1] / acc[0], acc[2] / acc[0]

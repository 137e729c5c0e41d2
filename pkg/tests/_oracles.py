"""Independent ground-truth computations used by the test suite.

Everything here avoids the package's samplers and autodiff: evidence
and model probabilities come from dense-grid quadrature (Laplace-guided
boxes), posterior moments from a plain batched random-walk Metropolis.
"""

import numpy as np
from scipy import optimize


def _laplace_box(model, x0, widths=8.0, log_drop=30.0):
    """Posterior mode and axis-aligned bounds covering the bulk of mass.

    Starts from +-widths marginal sds (finite-difference Hessian at the
    mode) and then pushes each face outward until the log density along
    that axis has fallen log_drop below the mode, so skewed or
    heavy-tailed directions are not truncated.
    """
    res = optimize.minimize(
        lambda t: -float(model.log_density_np(t[None, :])[0]), x0,
        method="Nelder-Mead", options={"xatol": 1e-8, "fatol": 1e-10,
                                       "maxiter": 20_000})
    mode = res.x
    h = 1e-3
    d = mode.size
    hess = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for si in (1, -1):
                for sj in (1, -1):
                    t = mode.copy()
                    t[i] += si * h
                    t[j] += sj * h
                    acc += si * sj * float(
                        model.log_density_np(t[None, :])[0])
            hess[i, j] = acc / (4 * h * h)
    try:
        cov = np.linalg.inv(-hess)
        sds = np.sqrt(np.maximum(np.diag(cov), 1e-12))
    except np.linalg.LinAlgError:
        sds = np.ones(d)
    f_mode = float(model.log_density_np(mode[None, :])[0])
    lo = mode - widths * sds
    hi = mode + widths * sds

    def _face_log(i, value):
        # Max log density over the box face {x_i = value}: correlated
        # ridges can leave the box through a face far from the mode's
        # axis-aligned shadow, so probe the whole face on a coarse grid.
        others = [j for j in range(d) if j != i]
        if not others:
            return float(model.log_density_np(np.array([[value]]))[0])
        n = max(3, int(round(2000 ** (1 / len(others)))))
        axes = [np.linspace(lo[j], hi[j], n) for j in others]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.empty((mesh[0].size, d))
        pts[:, i] = value
        for j, m in zip(others, mesh):
            pts[:, j] = m.reshape(-1)
        return float(model.log_density_np(pts).max())

    for _ in range(200):
        grew = False
        for i in range(d):
            step = widths * sds[i]
            if _face_log(i, lo[i]) > f_mode - log_drop:
                lo[i] -= step
                grew = True
            if _face_log(i, hi[i]) > f_mode - log_drop:
                hi[i] += step
                grew = True
        if not grew:
            break
    return lo, hi


def quadrature_log_evidence(model, points_per_dim=60, widths=8.0):
    """Dense-grid integral of the unnormalized posterior density."""
    d = model.dim
    lo, hi = _laplace_box(model, np.zeros(d), widths)
    axes = [np.linspace(lo[i], hi[i], points_per_dim) for i in range(d)]
    # Build the grid one first-axis slice at a time to bound memory.
    log_vals = np.empty([points_per_dim] * d)
    tail = np.meshgrid(*axes[1:], indexing="ij") if d > 1 else []
    tail_flat = np.stack([m.reshape(-1) for m in tail], axis=-1) \
        if d > 1 else np.empty((1, 0))
    for s, x0 in enumerate(axes[0]):
        pts = np.concatenate(
            [np.full((tail_flat.shape[0], 1), x0), tail_flat], axis=1)
        log_vals[s] = model.log_density_np(pts).reshape(
            log_vals.shape[1:] if d > 1 else ())
    shift = log_vals.max()
    vals = np.exp(log_vals - shift)
    for i in range(d - 1, -1, -1):
        vals = np.trapezoid(vals, axes[i], axis=i)
    return shift + float(np.log(vals))


def quadrature_model_probabilities(family, points_per_dim=60):
    """Posterior over models from per-model quadrature evidences."""
    log_post = np.array([
        quadrature_log_evidence(family.models[k], points_per_dim)
        + family.log_prior[k]
        for k in range(family.num_models)])
    p = np.exp(log_post - log_post.max())
    return p / p.sum()


def rwm_posterior_mean(model, n_steps, n_chains=64, step_scale=0.05,
                       seed=0, burn_frac=0.3, x0=None, transform=None):
    """Batched random-walk Metropolis; returns (mean, se, acc_rate).

    ``transform`` maps raw states to the functional being averaged
    (identity by default).  The standard error comes from the spread of
    per-chain means over independent chains.
    """
    rng = np.random.default_rng(seed)
    d = model.dim
    x = np.tile(np.zeros(d) if x0 is None else x0, (n_chains, 1))
    x += 0.01 * rng.standard_normal(x.shape)
    logp = model.log_density_np(x)
    if transform is None:
        transform = lambda t: t
    burn = int(burn_frac * n_steps)
    sums = np.zeros((n_chains, np.atleast_2d(transform(x)).shape[1]))
    count = 0
    accepted = 0
    for t in range(n_steps):
        prop = x + step_scale * rng.standard_normal(x.shape)
        logp_prop = model.log_density_np(prop)
        take = np.log(rng.random(n_chains)) < logp_prop - logp
        x[take] = prop[take]
        logp[take] = logp_prop[take]
        accepted += int(np.sum(take))
        if t >= burn:
            sums += transform(x)
            count += 1
    chain_means = sums / count
    mean = chain_means.mean(axis=0)
    se = chain_means.std(axis=0, ddof=1) / np.sqrt(n_chains)
    return mean, se, accepted / (n_steps * n_chains)

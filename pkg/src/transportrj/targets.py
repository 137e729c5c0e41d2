"""Trans-dimensional target families.

Each family is a list of models with unnormalized log posterior
densities over an unconstrained parameterization (positivity handled by
softplus with its log-Jacobian folded into the density), a model-index
prior, and a saturation mask per model.  Densities come in two flavors:
a batched numpy callable for the samplers and a tape callable for
differentiable training; a consistency test keeps them aligned.

Families provided:

- ``sas_family``: two skewed/heavy-tailed sinh-arcsinh pushforward
  models (d = 1 and 2) with known exact transport maps.
- ``fa_family``: Bayesian factor analysis with 2 or 3 factors on
  six-dimensional observations.
- ``vs_family``: robust-regression variable selection over four nested
  models with a two-component Gaussian mixture error.
- ``gaussian_toy_family``: standard-normal conditionals, used to test
  the trans-dimensional trainer against its analytic optimum.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Node, Tape
from .flows import SasExactMap
from .reference import LOG_2PI, ReferenceDist


@dataclass
class ModelSpace:
    """One model of a trans-dimensional family.

    ``log_density_np`` maps a (n, d_k) batch of unconstrained parameters
    to per-sample unnormalized log posteriors (likelihood x parameter
    prior, model prior excluded).  ``log_density_tape`` is the same
    computation recorded on a tape.
    """

    index: int
    label: object
    dim: int
    mask: np.ndarray
    log_density_np: Callable[[np.ndarray], np.ndarray]
    log_density_tape: Callable[[Tape, Node], Node]

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if int(self.mask.sum()) != self.dim or not np.all(
                (self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"mask of model {self.label} inconsistent with d_k")


@dataclass
class TargetFamily:
    name: str
    models: list[ModelSpace]
    log_prior: np.ndarray  # over model indices
    d_max: int = 0
    hyperparams: dict = field(default_factory=dict)
    data_digest: str | None = None
    exact_maps: list | None = None

    def __post_init__(self):
        self.log_prior = np.asarray(self.log_prior, dtype=np.float64)
        total = np.exp(self.log_prior).sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"model priors sum to {total}, not 1")
        if not self.d_max:
            self.d_max = max(m.dim for m in self.models)

    @property
    def num_models(self) -> int:
        return len(self.models)

    def model(self, index: int) -> ModelSpace:
        return self.models[index]

    def log_joint_np(self, index: int, theta: np.ndarray) -> np.ndarray:
        """Unnormalized log pi(k, theta | y) including the model prior."""
        return self.models[index].log_density_np(theta) + self.log_prior[index]


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# -- sinh-arcsinh toy target -------------------------------------------

SAS_PARAMS = {
    1: (np.array([-2.0]), np.array([1.0]), np.array([[1.0]])),
    2: (np.array([1.5, -2.0]), np.array([1.0, 1.5]),
        np.linalg.cholesky(np.array([[1.0, 0.99], [0.99, 1.0]]))),
}
SAS_MODEL_PRIOR = np.array([0.25, 0.75])


def _sas_log_density_np(eps, delta, lower):
    linv = np.linalg.inv(lower)
    logdet_l = float(np.sum(np.log(np.abs(np.diag(lower)))))
    d = eps.size

    def fn(theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        arg = delta * np.arcsinh(theta) - eps
        v = np.sinh(arg)
        log_jac = np.sum(np.log(np.cosh(arg)) + np.log(delta)
                         - 0.5 * np.log1p(theta ** 2), axis=-1)
        w = v @ linv.T
        log_gauss = -0.5 * (d * LOG_2PI + np.sum(w * w, axis=-1)) - logdet_l
        return log_gauss + log_jac

    return fn


def _sas_log_density_tape(eps, delta, lower):
    linv_t = np.linalg.inv(lower).T
    logdet_l = float(np.sum(np.log(np.abs(np.diag(lower)))))
    d = eps.size

    def fn(tape: Tape, theta: Node) -> Node:
        arg = ad.asinh(theta) * delta - eps
        v = ad.sinh(arg)
        log_jac = (ad.log(ad.cosh(arg)) + np.log(delta)
                   - 0.5 * ad.log(1.0 + theta ** 2)).sum(axis=-1)
        w = ad.matmul(v, tape.constant(linv_t))
        log_gauss = -0.5 * ((w * w).sum(axis=-1) + d * LOG_2PI) - logdet_l
        return log_gauss + log_jac

    return fn


def sas_exact_map(k: int) -> SasExactMap:
    eps, delta, lower = SAS_PARAMS[k]
    return SasExactMap(eps, delta, lower)


def sas_family() -> TargetFamily:
    models = []
    for index, k in enumerate((1, 2)):
        eps, delta, lower = SAS_PARAMS[k]
        d = eps.size
        mask = np.zeros(2, dtype=np.int64)
        mask[:d] = 1
        models.append(ModelSpace(
            index=index, label=k, dim=d, mask=mask,
            log_density_np=_sas_log_density_np(eps, delta, lower),
            log_density_tape=_sas_log_density_tape(eps, delta, lower)))
    return TargetFamily(
        name="sas", models=models, log_prior=np.log(SAS_MODEL_PRIOR),
        hyperparams={"eps": {k: v[0].tolist() for k, v in SAS_PARAMS.items()},
                     "delta": {k: v[1].tolist() for k, v in SAS_PARAMS.items()},
                     "model_prior": SAS_MODEL_PRIOR.tolist()},
        exact_maps=[sas_exact_map(1), sas_exact_map(2)])


# -- Bayesian factor analysis ------------------------------------------

FA_OBS_DIM = 6
FA_N_OBS = 143
FA_IG_SHAPE = 1.1
FA_IG_SCALE = 0.05


def fa_dim(k: int) -> int:
    return FA_OBS_DIM * (k + 1) - k * (k - 1) // 2


def _fa_layout(k: int):
    """Column-major lower-triangular beta entries, then the Lambda diagonal."""
    off_rows, off_cols, diag_pos = [], [], []
    pos = 0
    for j in range(k):
        for i in range(j, FA_OBS_DIM):
            if i == j:
                diag_pos.append(pos)
            else:
                off_rows.append(i)
                off_cols.append(j)
            pos += 1
    n_beta = pos
    return (np.array(off_rows), np.array(off_cols),
            np.array(diag_pos), n_beta)


def _fa_scatter(data: np.ndarray) -> np.ndarray:
    return data.T @ data


def _fa_beta_basis(k: int):
    """Constant matrices mapping entry vectors to vec(beta), row-major."""
    off_rows, off_cols, diag_pos, _ = _fa_layout(k)
    diag_rows = []
    pos = 0
    for j in range(k):
        for i in range(j, FA_OBS_DIM):
            if i == j:
                diag_rows.append((i, j))
            pos += 1
    n_off = off_rows.size
    e_off = np.zeros((FA_OBS_DIM * k, n_off))
    for idx, (i, j) in enumerate(zip(off_rows, off_cols)):
        e_off[i * k + j, idx] = 1.0
    e_diag = np.zeros((FA_OBS_DIM * k, k))
    for idx, (i, j) in enumerate(diag_rows):
        e_diag[i * k + j, idx] = 1.0
    e_lam = np.zeros((FA_OBS_DIM * FA_OBS_DIM, FA_OBS_DIM))
    for i in range(FA_OBS_DIM):
        e_lam[i * FA_OBS_DIM + i, i] = 1.0
    return e_off, e_diag, e_lam


def _ig_logpdf(lam):
    return (FA_IG_SHAPE * np.log(FA_IG_SCALE) - gammaln(FA_IG_SHAPE)
            - (FA_IG_SHAPE + 1.0) * np.log(lam) - FA_IG_SCALE / lam)


def _fa_split(theta: np.ndarray, k: int):
    _, _, diag_pos, n_beta = _fa_layout(k)
    off_pos = np.setdiff1d(np.arange(n_beta), diag_pos)
    return off_pos, diag_pos, n_beta


def _fa_log_density_np(k: int, data: np.ndarray):
    off_rows, off_cols, diag_pos, n_beta = _fa_layout(k)
    off_pos = np.setdiff1d(np.arange(n_beta), diag_pos)
    scatter = _fa_scatter(data)
    n_obs = data.shape[0]
    d = fa_dim(k)
    off_rc = (off_rows, off_cols)
    diag_rc = ([i for i in range(k)], [j for j in range(k)])

    def fn(theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[-1] != d:
            raise ValueError(f"model k={k} expects dim {d}, got {theta.shape[-1]}")
        n = theta.shape[0]
        off = theta[:, off_pos]
        diag_raw = theta[:, diag_pos]
        lam_raw = theta[:, n_beta:]
        diag = ad.softplus_np(diag_raw)
        lam = ad.softplus_np(lam_raw)
        beta = np.zeros((n, FA_OBS_DIM, k))
        beta[:, off_rc[0], off_rc[1]] = off
        beta[:, diag_rc[0], diag_rc[1]] = diag
        sigma = beta @ np.swapaxes(beta, 1, 2)
        sigma[:, np.arange(FA_OBS_DIM), np.arange(FA_OBS_DIM)] += lam
        sign, logdet = np.linalg.slogdet(sigma)
        quad = np.einsum("nij,ji->n", np.linalg.inv(sigma), scatter)
        loglik = (-0.5 * n_obs * (FA_OBS_DIM * LOG_2PI + logdet)
                  - 0.5 * quad)
        log_prior = (-0.5 * np.sum(off ** 2 + LOG_2PI, axis=-1)
                     + np.sum(np.log(2.0) - 0.5 * (diag ** 2 + LOG_2PI), axis=-1)
                     + np.sum(_ig_logpdf(lam), axis=-1))
        # softplus log-Jacobians for the positive entries
        log_jac = (np.sum(diag_raw - ad.softplus_np(diag_raw), axis=-1)
                   + np.sum(lam_raw - ad.softplus_np(lam_raw), axis=-1))
        return loglik + log_prior + log_jac

    return fn


def _fa_log_density_tape(k: int, data: np.ndarray):
    _, _, diag_pos, n_beta = _fa_layout(k)
    off_pos = np.setdiff1d(np.arange(n_beta), diag_pos)
    e_off, e_diag, e_lam = _fa_beta_basis(k)
    scatter = _fa_scatter(data)
    n_obs = data.shape[0]

    def fn(tape: Tape, theta: Node) -> Node:
        n = theta.value.shape[0]
        off = theta[:, off_pos]
        diag_raw = theta[:, diag_pos]
        lam_raw = theta[:, n_beta:]
        diag = ad.softplus(diag_raw)
        lam = ad.softplus(lam_raw)
        vec_beta = (ad.matmul(off, tape.constant(e_off.T))
                    + ad.matmul(diag, tape.constant(e_diag.T)))
        beta = vec_beta.reshape(n, FA_OBS_DIM, k)
        lam_mat = ad.matmul(lam, tape.constant(e_lam.T)).reshape(
            n, FA_OBS_DIM, FA_OBS_DIM)
        sigma = ad.matmul(beta, beta.transpose((0, 2, 1))) + lam_mat
        loglik = (ad.gaussian_quadform_logdet(sigma, scatter, n_obs)
                  - 0.5 * n_obs * FA_OBS_DIM * LOG_2PI)
        log_prior = ((-0.5) * (off ** 2 + LOG_2PI).sum(axis=-1)
                     + (np.log(2.0) - 0.5 * LOG_2PI
                        - 0.5 * diag ** 2).sum(axis=-1)
                     + (FA_IG_SHAPE * np.log(FA_IG_SCALE) - gammaln(FA_IG_SHAPE)
                        - (FA_IG_SHAPE + 1.0) * ad.log(lam)
                        - FA_IG_SCALE / lam).sum(axis=-1))
        log_jac = ((diag_raw - ad.softplus(diag_raw)).sum(axis=-1)
                   + (lam_raw - ad.softplus(lam_raw)).sum(axis=-1))
        return loglik + log_prior + log_jac

    return fn


def fa_family(data: np.ndarray) -> TargetFamily:
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1] != FA_OBS_DIM:
        raise ValueError(f"factor-analysis data must have {FA_OBS_DIM} columns")
    d_max = fa_dim(3)
    models = []
    for index, k in enumerate((2, 3)):
        d = fa_dim(k)
        mask = np.zeros(d_max, dtype=np.int64)
        mask[:d] = 1
        models.append(ModelSpace(
            index=index, label=k, dim=d, mask=mask,
            log_density_np=_fa_log_density_np(k, data),
            log_density_tape=_fa_log_density_tape(k, data)))
    return TargetFamily(
        name="factor-analysis", models=models,
        log_prior=np.log([0.5, 0.5]), d_max=d_max,
        hyperparams={"ig_shape": FA_IG_SHAPE, "ig_scale": FA_IG_SCALE,
                     "n_obs": int(data.shape[0]),
                     "inverse_gamma_convention": "shape/scale, mean scale/(shape-1)"},
        data_digest=_digest(data))


def fa_load_data(path) -> np.ndarray:
    """Delimited text with 143 rows x 6 numeric columns; header auto-detected."""
    path = Path(path)
    text = path.read_text().strip().splitlines()
    if not text:
        raise ValueError(f"{path}: empty data file")

    def parse(line: str):
        sep = "," if "," in line else None
        return [cell for cell in line.replace(",", " ").split()] if sep else line.split()

    rows = []
    for lineno, line in enumerate(text):
        cells = parse(line)
        if lineno == 0:
            try:
                [float(c) for c in cells]
            except ValueError:
                continue  # header row
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno + 1}: non-numeric cell") from exc
    data = np.asarray(rows, dtype=np.float64)
    if data.shape != (FA_N_OBS, FA_OBS_DIM):
        raise ValueError(
            f"{path}: expected shape ({FA_N_OBS}, {FA_OBS_DIM}), got {data.shape}")
    return data


def fa_synthetic_data(seed: int, n_obs: int = FA_N_OBS) -> np.ndarray:
    """Draws from a fixed 2-factor model, for runs without the real dataset."""
    rng = np.random.default_rng(seed)
    beta = np.array([[1.0, 0.0],
                     [0.8, 0.9],
                     [0.7, 0.5],
                     [0.6, -0.4],
                     [0.5, 0.6],
                     [0.4, -0.3]])
    lam = np.array([0.15, 0.2, 0.1, 0.25, 0.12, 0.18])
    cov = beta @ beta.T + np.diag(lam)
    chol = np.linalg.cholesky(cov)
    return rng.standard_normal((n_obs, FA_OBS_DIM)) @ chol.T


# -- variable selection in robust regression ---------------------------

VS_MODELS = [(1, 0, 0, 0), (1, 1, 0, 0), (1, 0, 1, 1), (1, 1, 1, 1)]
VS_MIXTURE_WEIGHT = 0.9  # weight of the N(0, 1) component; not stated upstream
VS_PRIOR_VAR = 100.0
VS_WIDE_VAR = 100.0


def vs_active_columns(label) -> np.ndarray:
    return np.flatnonzero(np.asarray(label, dtype=np.int64))


def _vs_log_density_np(label, X, Y, weight):
    cols = vs_active_columns(label)
    x_active = X[:, cols]
    log_w = np.log(weight)
    log_1mw = np.log1p(-weight)

    def fn(theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[-1] != cols.size:
            raise ValueError(
                f"model {label} expects dim {cols.size}, got {theta.shape[-1]}")
        resid = Y[None, :] - theta @ x_active.T
        a = log_w - 0.5 * (LOG_2PI + resid ** 2)
        b = log_1mw - 0.5 * (LOG_2PI + np.log(VS_WIDE_VAR)
                             + resid ** 2 / VS_WIDE_VAR)
        loglik = np.sum(np.logaddexp(a, b), axis=-1)
        log_prior = -0.5 * np.sum(
            theta ** 2 / VS_PRIOR_VAR + LOG_2PI + np.log(VS_PRIOR_VAR), axis=-1)
        return loglik + log_prior

    return fn


def _vs_log_density_tape(label, X, Y, weight):
    cols = vs_active_columns(label)
    x_active_t = X[:, cols].T
    log_w = float(np.log(weight))
    log_1mw = float(np.log1p(-weight))

    def fn(tape: Tape, theta: Node) -> Node:
        resid = tape.constant(Y[None, :]) - ad.matmul(theta,
                                                      tape.constant(x_active_t))
        a = log_w - 0.5 * (LOG_2PI + resid ** 2)
        b = log_1mw - 0.5 * (LOG_2PI + np.log(VS_WIDE_VAR)) \
            - resid ** 2 * (0.5 / VS_WIDE_VAR)
        # logaddexp(a, b) = b + softplus(a - b); a - b is bounded above
        loglik = (b + ad.softplus(a - b)).sum(axis=-1)
        log_prior = (-0.5) * (theta ** 2 * (1.0 / VS_PRIOR_VAR)
                              + LOG_2PI + np.log(VS_PRIOR_VAR)).sum(axis=-1)
        return loglik + log_prior

    return fn


def vs_family(X: np.ndarray, Y: np.ndarray,
              weight: float = VS_MIXTURE_WEIGHT) -> TargetFamily:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0] or X.shape[1] != 4:
        raise ValueError(f"design matrix must be n x 4 matching Y, got {X.shape}")
    if not 0.0 < weight < 1.0:
        raise ValueError("mixture weight must lie in (0, 1)")
    models = []
    for index, label in enumerate(VS_MODELS):
        mask = np.asarray(label, dtype=np.int64)
        models.append(ModelSpace(
            index=index, label=label, dim=int(mask.sum()), mask=mask,
            log_density_np=_vs_log_density_np(label, X, Y, weight),
            log_density_tape=_vs_log_density_tape(label, X, Y, weight)))
    # k_1, k_2 ~ Bernoulli(1/2) gives a uniform prior over the 4 models
    return TargetFamily(
        name="variable-selection", models=models,
        log_prior=np.log([0.25] * 4), d_max=4,
        hyperparams={"mixture_weight": weight,
                     "beta_prior_var": VS_PRIOR_VAR,
                     "wide_component_var": VS_WIDE_VAR},
        data_digest=_digest(X, Y))


def vs_simulate_data(seed: int, n_obs: int = 80):
    """Design and responses from the two-intercept generating process."""
    rng = np.random.default_rng(seed)
    X = np.concatenate([np.ones((n_obs, 1)),
                        rng.standard_normal((n_obs, 3))], axis=1)
    half = n_obs // 2
    beta = np.zeros((n_obs, 4))
    beta[:half, 0], beta[:half, 1] = 1.0, 1.0
    beta[half:, 0], beta[half:, 1] = 6.0, 1.0
    Y = np.sum(X * beta, axis=1) + 5.0 * rng.standard_normal(n_obs)
    return X, Y


# -- Gaussian toy family for the conditional trainer --------------------

def gaussian_toy_family(dims=(1, 2)) -> TargetFamily:
    d_max = max(dims)
    models = []
    for index, d in enumerate(dims):
        mask = np.zeros(d_max, dtype=np.int64)
        mask[:d] = 1

        def np_fn(theta, d=d):
            theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
            return -0.5 * np.sum(theta ** 2 + LOG_2PI, axis=-1)

        def tape_fn(tape, theta, d=d):
            return (-0.5) * (theta ** 2 + LOG_2PI).sum(axis=-1)

        models.append(ModelSpace(index=index, label=d, dim=d, mask=mask,
                                 log_density_np=np_fn,
                                 log_density_tape=tape_fn))
    prior = np.full(len(dims), 1.0 / len(dims))
    return TargetFamily(name="gaussian-toy", models=models,
                        log_prior=np.log(prior), d_max=d_max)

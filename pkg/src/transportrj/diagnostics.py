"""Mixing and accuracy diagnostics for reversible-jump runs.

The bridge estimator turns averaged acceptance probabilities of
cross-model proposals on per-model evaluation sets into model
probability estimates.  Pairwise ratio estimates from noisy data are
generally inconsistent across composition paths, so the conversion
solves the least-squares gauge problem over all observed pairs (for
complete pair data this is the geometric mean over anchors); the result
is exactly invariant to the anchor index used for gauge fixing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rjmcmc import (CtpKernel, StandardSaturatedKernel, TransModelState,
                     TrjKernel, assemble_saturated, split_saturated)
from .targets import TargetFamily


def running_model_prob(record, index: int) -> np.ndarray:
    """Running estimate of the posterior probability of one model.

    Entry t is the fraction of the first t post-init states in model
    ``index``.
    """
    ks = record.k_array[1:]
    if ks.size == 0:
        raise ValueError("empty trace")
    hits = (ks == index).astype(np.float64)
    return np.cumsum(hits) / np.arange(1, ks.size + 1)


class InsufficientPairData(ValueError):
    def __init__(self, pair):
        super().__init__(f"no recorded proposals for model pair {pair}")
        self.pair = pair


@dataclass
class BbeAccumulator:
    """Per ordered (k -> k') pair lists of acceptance probabilities."""

    num_models: int
    alphas: dict = field(default_factory=dict)

    def add(self, k_from: int, k_to: int, values) -> None:
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if np.any((values < 0) | (values > 1)):
            raise ValueError("acceptance probabilities must lie in [0, 1]")
        self.alphas.setdefault((k_from, k_to), []).append(values)

    def mean(self, k_from: int, k_to: int) -> float:
        values = self.alphas.get((k_from, k_to))
        if not values:
            raise InsufficientPairData((k_from, k_to))
        return float(np.mean(np.concatenate(values)))

    def count(self, k_from: int, k_to: int) -> int:
        values = self.alphas.get((k_from, k_to), [])
        return int(sum(v.size for v in values))

    def merge(self, other: "BbeAccumulator") -> "BbeAccumulator":
        out = BbeAccumulator(self.num_models)
        for acc in (self, other):
            for pair, chunks in acc.alphas.items():
                for chunk in chunks:
                    out.add(pair[0], pair[1], chunk)
        return out

    @classmethod
    def from_chain(cls, record, num_models: int) -> "BbeAccumulator":
        acc = cls(num_models)
        for (k_from, k_to), values in record.pair_acceptances().items():
            if k_from != k_to:
                acc.add(k_from, k_to, values)
        return acc


def bbe_estimate(acc: BbeAccumulator, num_models: int, anchor: int = 0,
                 index_proposal: np.ndarray | None = None,
                 log_prior: np.ndarray | None = None) -> np.ndarray:
    """Model probabilities from bridge (acceptance-ratio) estimates.

    ``index_proposal`` corrects for a non-uniform model-index proposal
    q; ``log_prior`` optionally reweights a non-uniform model prior out
    of the estimates (extension, off by default).  The anchor only
    fixes the gauge and cancels in the normalization.
    """
    if not 0 <= anchor < num_models:
        raise ValueError("anchor out of range")
    # log B[k, j]: estimated log ratio pi(k|y)/pi(j|y)
    log_b = np.zeros((num_models, num_models))
    for k in range(num_models):
        for j in range(k + 1, num_models):
            m_jk = acc.mean(j, k)  # proposals j -> k
            m_kj = acc.mean(k, j)
            value = np.log(m_jk) - np.log(m_kj)
            if index_proposal is not None:
                # q[from, to]: odds of reaching k from j vs j from k
                value += (np.log(index_proposal[j, k])
                          - np.log(index_proposal[k, j]))
            log_b[k, j] = value
            log_b[j, k] = -value
    # least-squares consistent log ratios; gauge fixed at the anchor
    ell = log_b.mean(axis=1)
    ell = ell - ell[anchor]
    if log_prior is not None:
        ell = ell - np.asarray(log_prior) + np.asarray(log_prior)[anchor]
    probs = np.exp(ell - np.max(ell))
    return probs / probs.sum()


# -- evaluation sets ----------------------------------------------------

def exact_map_source(tm):
    """Per-model sample source drawing through an exact transport map."""

    def draw(n: int, rng) -> np.ndarray:
        z = rng.standard_normal((n, tm.dim))
        x, _ = tm.push_np(z)
        return x

    return draw


def flow_mh_source(flow, model, thin: int = 1):
    """Trained-flow independence proposals filtered by an MH correction.

    Yields exact (if correlated) draws from the model's conditional
    posterior regardless of the flow's approximation quality.
    """

    def draw(n: int, rng) -> np.ndarray:
        total = n * thin
        z = rng.standard_normal((total, flow.dim))
        cand, logdet = flow.push_np(z)
        logq = flow.base.log_density_rows(z) - logdet
        logp = model.log_density_np(cand)
        logw = logp - logq
        out = np.empty((total, flow.dim))
        current = 0
        log_u = np.log(rng.random(total))
        for i in range(total):
            if log_u[i] < logw[i] - logw[current]:
                current = i
            out[i] = cand[current]
        return out[thin - 1::thin][:n]

    return draw


def conditional_mh_source(stack, family: TargetFamily, index: int,
                          ref=None, thin: int = 1):
    """Independence MH on the saturated space through a conditional flow.

    Target is the augmented density pi(theta | k) x reference(aux); the
    auxiliary block is dropped after filtering, leaving conditional
    posterior draws for model ``index``.
    """
    from .reference import ReferenceDist
    ref = ref or ReferenceDist()
    model = family.models[index]

    def draw(n: int, rng) -> np.ndarray:
        total = n * thin
        mu, sigma = stack.base.moments_np(index)
        eps = rng.standard_normal((total, stack.dim))
        z0 = mu + sigma * eps
        cand, logdet = stack.push_np(z0, index)
        logq = stack.base.log_density_rows(z0, index) - logdet
        logp = model.log_density_np(cand[:, model.mask == 1])
        if family.d_max > model.dim:
            logp = logp + ref.log_density_rows(cand[:, model.mask == 0])
        logw = logp - logq
        out = np.empty((total, model.dim))
        current = 0
        log_u = np.log(rng.random(total))
        active = model.mask == 1
        for i in range(total):
            if log_u[i] < logw[i] - logw[current]:
                current = i
            out[i] = cand[current, active]
        return out[thin - 1::thin][:n]

    return draw


def chain_thinning_source(thetas: np.ndarray):
    """Evaluation samples subsampled from a long pre-run chain trace."""
    thetas = np.atleast_2d(thetas)

    def draw(n: int, rng) -> np.ndarray:
        idx = rng.integers(0, thetas.shape[0], size=n)
        return thetas[idx]

    return draw


def _pair_alpha_trj(kernel: TrjKernel, k: int, kp: int,
                    thetas: np.ndarray, rng) -> np.ndarray:
    family = kernel.family
    d, dp = family.models[k].dim, family.models[kp].dim
    n = thetas.shape[0]
    z, logdet_pull = kernel.maps[k].pull_np(thetas)
    if dp >= d:
        u = rng.standard_normal((n, dp - d))
        z_new = np.concatenate([z, u], axis=1)
        log_gu = kernel.ref.log_density_rows(u) if dp > d else np.zeros(n)
        log_gu_rev = np.zeros(n)
    else:
        z_new, dropped = z[:, :dp], z[:, dp:]
        log_gu = np.zeros(n)
        log_gu_rev = kernel.ref.log_density_rows(dropped)
    theta_new, logdet_push = kernel.maps[kp].push_np(z_new)
    log_ratio = (family.log_joint_np(kp, theta_new)
                 - family.log_joint_np(k, thetas)
                 + np.log(kernel.q[kp, k]) - np.log(kernel.q[k, kp])
                 + log_gu_rev - log_gu + logdet_pull + logdet_push)
    return np.exp(np.minimum(log_ratio, 0.0))


def _aug_target_rows(kernel, index: int, sat: np.ndarray,
                     aux_logpdf) -> np.ndarray:
    model = kernel.family.models[index]
    theta = sat[:, model.mask == 1]
    u = sat[:, model.mask == 0]
    value = (kernel.family.log_prior[index]
             + model.log_density_np(theta))
    if u.shape[1]:
        value = value + aux_logpdf(u)
    return value


def _pair_alpha_ctp(kernel: CtpKernel, k: int, kp: int,
                    thetas: np.ndarray, rng) -> np.ndarray:
    family = kernel.family
    model = family.models[k]
    n = thetas.shape[0]
    aux = rng.standard_normal((n, family.d_max - model.dim))
    sat = np.empty((n, family.d_max))
    sat[:, model.mask == 1] = thetas
    sat[:, model.mask == 0] = aux
    z0, logdet_pull = kernel.stack.pull_np(sat, k)
    mu_k, sigma_k = kernel.stack.base.moments_np(k)
    mu_p, sigma_p = kernel.stack.base.moments_np(kp)
    e = (z0 - mu_k) / sigma_k
    z0_new = mu_p + sigma_p * e
    sat_new, logdet_push = kernel.stack.push_np(z0_new, kp)
    logdet_to_ref = logdet_pull - float(np.sum(np.log(sigma_k)))
    logdet_from_ref = logdet_push + float(np.sum(np.log(sigma_p)))
    aux_logpdf = kernel.ref.log_density_rows
    log_ratio = (_aug_target_rows(kernel, kp, sat_new, aux_logpdf)
                 - _aug_target_rows(kernel, k, sat, aux_logpdf)
                 + np.log(kernel.q[kp, k]) - np.log(kernel.q[k, kp])
                 + logdet_to_ref + logdet_from_ref)
    return np.exp(np.minimum(log_ratio, 0.0))


def _pair_alpha_standard(kernel: StandardSaturatedKernel, k: int, kp: int,
                         thetas: np.ndarray, rng) -> np.ndarray:
    family = kernel.family
    model = family.models[k]
    n = thetas.shape[0]
    aux = kernel.aux_sd * rng.standard_normal((n, family.d_max - model.dim))
    sat = np.empty((n, family.d_max))
    sat[:, model.mask == 1] = thetas
    sat[:, model.mask == 0] = aux

    def aux_logpdf(u):
        scaled = u / kernel.aux_sd
        return (np.sum(-0.5 * (np.log(2.0 * np.pi) + scaled ** 2), axis=-1)
                - u.shape[1] * np.log(kernel.aux_sd))

    log_ratio = (_aug_target_rows(kernel, kp, sat, aux_logpdf)
                 - _aug_target_rows(kernel, k, sat, aux_logpdf)
                 + np.log(kernel.q[kp, k]) - np.log(kernel.q[k, kp]))
    return np.exp(np.minimum(log_ratio, 0.0))


def pair_alphas(kernel, k: int, kp: int, thetas: np.ndarray,
                rng) -> np.ndarray:
    """Acceptance probabilities for one jump proposal per evaluation state."""
    if isinstance(kernel, TrjKernel):
        return _pair_alpha_trj(kernel, k, kp, thetas, rng)
    if isinstance(kernel, CtpKernel):
        return _pair_alpha_ctp(kernel, k, kp, thetas, rng)
    if isinstance(kernel, StandardSaturatedKernel):
        return _pair_alpha_standard(kernel, k, kp, thetas, rng)
    raise TypeError(f"unsupported kernel {type(kernel).__name__}")


def build_eval_set(kernel, sources: list, n_per_model: int,
                   rng) -> BbeAccumulator:
    """One reversible-jump proposal per evaluation sample, per model.

    ``sources[k]`` draws approximate posterior samples for model k (the
    mode — exact map, MH-corrected flow, or thinned chain — is the
    caller's choice and belongs in the run manifest).
    """
    family: TargetFamily = kernel.family
    acc = BbeAccumulator(family.num_models)
    for k in range(family.num_models):
        thetas = sources[k](n_per_model, rng)
        targets = rng.choice(family.num_models, size=n_per_model,
                             p=kernel.q[k])
        for kp in range(family.num_models):
            idx = np.flatnonzero(targets == kp)
            if idx.size == 0 or kp == k:
                continue
            alphas = pair_alphas(kernel, k, kp, thetas[idx], rng)
            acc.add(k, kp, alphas)
    return acc


def export_replicates(path, rows) -> None:
    """Violin-plot-ready export: (replicate, model, probability) rows."""
    with open(path, "w") as fh:
        fh.write("replicate,model,probability\n")
        for replicate, model, prob in rows:
            fh.write("%d,%s,%.17g\n" % (replicate, model, prob))

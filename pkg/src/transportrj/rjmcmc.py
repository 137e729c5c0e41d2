"""Reversible-jump samplers built on transport maps.

Kernels:

- :class:`TrjKernel`: between-model proposals routed through a shared
  reference space via one trained (or exact) map per model.
- :class:`CtpKernel`: between-model proposals through a single
  conditional map on the saturated space, with auxiliary coordinates
  refreshed from the reference each proposal.
- :class:`StandardSaturatedKernel`: the classic saturated-space
  baseline with N(0, 100) auxiliaries and a deterministic block swap.
- :func:`within_model_update`: transported within-model moves (MCMC in
  reference space, random-walk Metropolis or leapfrog Hamiltonian).

All acceptance ratios are computed in log space; every propose method
can be replayed with forced choices, which is how the log-ratio
antisymmetry property is tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .reference import LOG_2PI, ReferenceDist, derive_seed
from .targets import ModelSpace, TargetFamily


@dataclass
class TransModelState:
    """Current model index (position in the family) and its parameters."""

    index: int
    theta: np.ndarray
    aux: np.ndarray | None = None  # saturated-space auxiliaries

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64))


@dataclass
class Proposal:
    state: TransModelState
    log_ratio: float
    forced_model: int
    forced_draw: np.ndarray | None

    @property
    def alpha(self) -> float:
        return float(min(1.0, np.exp(min(self.log_ratio, 0.0))))


def _sample_reference(ref: ReferenceDist, n: int, rng) -> np.ndarray:
    if ref.kind == "gaussian":
        return rng.standard_normal(n)
    return rng.standard_t(ref.dof, size=n)


def _validate_index_proposal(q: np.ndarray, num_models: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (num_models, num_models) or np.any(q < 0) or \
            not np.allclose(q.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("index proposal must be a row-stochastic KxK matrix")
    return q


class TrjKernel:
    """Between-model proposals with one transport map per model.

    ``maps[i]`` must provide pull_np/push_np for model i of the family;
    exact maps and trained flows share that interface.
    """

    def __init__(self, family: TargetFamily, maps: list,
                 index_proposal: np.ndarray,
                 reference: ReferenceDist | None = None):
        self.family = family
        if len(maps) != family.num_models or any(m is None for m in maps):
            raise ValueError("a trained map is required for every model")
        for model, tm in zip(family.models, maps):
            if tm.dim != model.dim:
                raise ValueError(
                    f"map dim {tm.dim} does not match model {model.label}")
        self.maps = maps
        self.q = _validate_index_proposal(index_proposal, family.num_models)
        self.ref = reference or ReferenceDist()

    def propose(self, state: TransModelState, rng=None,
                force_model: int | None = None,
                force_draw: np.ndarray | None = None) -> Proposal:
        k = state.index
        kp = force_model if force_model is not None else \
            int(rng.choice(self.q.shape[0], p=self.q[k]))
        d, dp = self.family.models[k].dim, self.family.models[kp].dim
        z, logdet_pull = self.maps[k].pull_np(state.theta[None, :])
        z = z[0]
        if dp >= d:
            if force_draw is not None:
                u = force_draw
            else:
                u = _sample_reference(self.ref, dp - d, rng)
            z_new = np.concatenate([z, u])
            log_gu = self.ref.log_density(u) if u.size else 0.0
            log_gu_rev = 0.0
            draw = u
        else:
            z_new, dropped = z[:dp], z[dp:]
            log_gu = 0.0
            log_gu_rev = self.ref.log_density(dropped)
            draw = dropped
        theta_new, logdet_push = self.maps[kp].push_np(z_new[None, :])
        theta_new = theta_new[0]
        log_ratio = (self.family.log_joint_np(kp, theta_new[None, :])[0]
                     - self.family.log_joint_np(k, state.theta[None, :])[0]
                     + np.log(self.q[kp, k]) - np.log(self.q[k, kp])
                     + log_gu_rev - log_gu
                     + float(logdet_pull[0]) + float(logdet_push[0]))
        return Proposal(TransModelState(kp, theta_new), float(log_ratio),
                        kp, draw)


def assemble_saturated(model: ModelSpace, theta: np.ndarray,
                       aux: np.ndarray) -> np.ndarray:
    """Concatenation c_k: active coordinates from theta, rest from aux."""
    sat = np.empty(model.mask.size)
    sat[model.mask == 1] = theta
    sat[model.mask == 0] = aux
    return sat


def split_saturated(model: ModelSpace, sat: np.ndarray):
    return sat[model.mask == 1], sat[model.mask == 0]


class CtpKernel:
    """Conditional transport proposals through one conditional flow.

    The learned map for model k is the context-k flow composed with the
    standardization of its Gaussian base, so the common reference space
    is N(0, I) for every model.
    """

    def __init__(self, family: TargetFamily, stack,
                 index_proposal: np.ndarray,
                 reference: ReferenceDist | None = None):
        if stack.dim != family.d_max or stack.context_dim != family.num_models:
            raise ValueError("conditional stack does not match the family")
        self.family = family
        self.stack = stack
        self.q = _validate_index_proposal(index_proposal, family.num_models)
        self.ref = reference or ReferenceDist()

    def log_aug_target(self, index: int, sat: np.ndarray) -> float:
        model = self.family.models[index]
        theta, u = split_saturated(model, sat)
        value = (self.family.log_prior[index]
                 + float(model.log_density_np(theta[None, :])[0]))
        if u.size:
            value += self.ref.log_density(u)
        return value

    def _to_reference(self, sat: np.ndarray, index: int):
        z0, logdet = self.stack.pull_np(sat[None, :], index)
        mu, sigma = self.stack.base.moments_np(index)
        e = (z0[0] - mu[0]) / sigma[0]
        return e, float(logdet[0]) - float(np.sum(np.log(sigma[0])))

    def _from_reference(self, e: np.ndarray, index: int):
        mu, sigma = self.stack.base.moments_np(index)
        z0 = mu[0] + sigma[0] * e
        sat, logdet = self.stack.push_np(z0[None, :], index)
        return sat[0], float(logdet[0]) + float(np.sum(np.log(sigma[0])))

    def propose(self, state: TransModelState, rng=None,
                force_model: int | None = None,
                force_aux: np.ndarray | None = None) -> Proposal:
        k = state.index
        model = self.family.models[k]
        n_aux = self.family.d_max - model.dim
        if force_aux is not None:
            aux = force_aux
        else:
            aux = _sample_reference(self.ref, n_aux, rng)
        kp = force_model if force_model is not None else \
            int(rng.choice(self.q.shape[0], p=self.q[k]))
        sat = assemble_saturated(model, state.theta, aux)
        e, logdet_to_ref = self._to_reference(sat, k)
        sat_new, logdet_from_ref = self._from_reference(e, kp)
        theta_new, aux_new = split_saturated(self.family.models[kp], sat_new)
        log_ratio = (self.log_aug_target(kp, sat_new)
                     - self.log_aug_target(k, sat)
                     + np.log(self.q[kp, k]) - np.log(self.q[k, kp])
                     + logdet_to_ref + logdet_from_ref)
        return Proposal(TransModelState(kp, theta_new, aux=aux_new),
                        float(log_ratio), kp, aux)


class StandardSaturatedKernel:
    """Deterministic block-swap baseline with wide Gaussian auxiliaries."""

    def __init__(self, family: TargetFamily, index_proposal: np.ndarray,
                 aux_sd: float = 10.0):
        self.family = family
        self.q = _validate_index_proposal(index_proposal, family.num_models)
        self.aux_sd = aux_sd

    def _log_aux(self, u: np.ndarray) -> float:
        if u.size == 0:
            return 0.0
        return float(np.sum(-0.5 * (LOG_2PI + u ** 2 / self.aux_sd ** 2))
                     - u.size * np.log(self.aux_sd))

    def log_aug_target(self, index: int, sat: np.ndarray) -> float:
        model = self.family.models[index]
        theta, u = split_saturated(model, sat)
        return (self.family.log_prior[index]
                + float(model.log_density_np(theta[None, :])[0])
                + self._log_aux(u))

    def refresh_aux(self, state: TransModelState, rng) -> TransModelState:
        """Gibbs refresh of the inactive block from its exact conditional."""
        model = self.family.models[state.index]
        n_aux = self.family.d_max - model.dim
        aux = self.aux_sd * rng.standard_normal(n_aux)
        return TransModelState(state.index, state.theta, aux=aux)

    def propose(self, state: TransModelState, rng=None,
                force_model: int | None = None) -> Proposal:
        k = state.index
        kp = force_model if force_model is not None else \
            int(rng.choice(self.q.shape[0], p=self.q[k]))
        sat = assemble_saturated(self.family.models[k], state.theta, state.aux)
        theta_new, aux_new = split_saturated(self.family.models[kp], sat)
        log_ratio = (self.log_aug_target(kp, sat) - self.log_aug_target(k, sat)
                     + np.log(self.q[kp, k]) - np.log(self.q[k, kp]))
        return Proposal(TransModelState(kp, theta_new, aux=aux_new),
                        float(log_ratio), kp, None)


def reference_log_target(tm, model: ModelSpace, z: np.ndarray) -> float:
    """Log density of the transported conditional in reference space."""
    theta, logdet_push = tm.push_np(z[None, :])
    return float(model.log_density_np(theta)[0] + logdet_push[0])


def _reference_grad(tm, model: ModelSpace, z: np.ndarray) -> np.ndarray:
    tape = Tape()
    leaves = tm.lift(tape)
    z_node = tape.leaf(z[None, :])
    x, logdet = tm.push_tape(tape, z_node, leaves)
    out = model.log_density_tape(tape, x).sum() + logdet.sum()
    return tape.gradient(out, [z_node])[0][0]


def within_model_update(state: TransModelState, tm, model: ModelSpace,
                        rng, n_steps: int = 1, step_scale: float = 0.3,
                        kernel: str = "rwm", leapfrog_steps: int = 5):
    """Transported within-model move: pull, MCMC in reference space, push.

    Exact for the conditional target whenever the inner kernel leaves
    the transported density invariant; never changes the model index.
    Returns (new state, acceptance count).
    """
    if n_steps == 0:
        return state, 0
    z, _ = tm.pull_np(state.theta[None, :])
    z = z[0]
    logp = reference_log_target(tm, model, z)
    accepted = 0
    for _ in range(n_steps):
        if kernel == "rwm":
            z_prop = z + step_scale * rng.standard_normal(z.size)
            logp_prop = reference_log_target(tm, model, z_prop)
            if np.log(rng.random()) < logp_prop - logp:
                z, logp = z_prop, logp_prop
                accepted += 1
        elif kernel == "hmc":
            p0 = rng.standard_normal(z.size)
            z_prop, p = z.copy(), p0.copy()
            grad = _reference_grad(tm, model, z_prop)
            for _ in range(leapfrog_steps):
                p += 0.5 * step_scale * grad
                z_prop += step_scale * p
                grad = _reference_grad(tm, model, z_prop)
                p += 0.5 * step_scale * grad
            logp_prop = reference_log_target(tm, model, z_prop)
            log_accept = (logp_prop - logp
                          - 0.5 * float(p @ p) + 0.5 * float(p0 @ p0))
            if np.log(rng.random()) < log_accept:
                z, logp = z_prop, logp_prop
                accepted += 1
        else:
            raise ValueError(f"unknown within-model kernel {kernel!r}")
    theta, _ = tm.push_np(z[None, :])
    return TransModelState(state.index, theta[0], aux=state.aux), accepted


@dataclass
class ChainRecord:
    """Iteration-indexed trace with per-proposal acceptance probabilities."""

    seed: int
    d_max: int
    ks: list[int] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    moves: list[tuple[int, int]] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)

    def record_state(self, state: TransModelState) -> None:
        padded = np.full(self.d_max, np.nan)
        padded[: state.theta.size] = state.theta
        self.ks.append(state.index)
        self.thetas.append(padded)

    def record_move(self, k_from: int, k_to: int, alpha: float,
                    kind: str) -> None:
        self.alphas.append(float(alpha))
        self.moves.append((k_from, k_to))
        self.kinds.append(kind)

    @property
    def k_array(self) -> np.ndarray:
        return np.asarray(self.ks, dtype=np.int64)

    def theta_array(self) -> np.ndarray:
        return np.asarray(self.thetas)

    def pair_acceptances(self) -> dict:
        out: dict[tuple[int, int], list[float]] = {}
        for (k_from, k_to), alpha, kind in zip(self.moves, self.alphas,
                                               self.kinds):
            if kind == "jump":
                out.setdefault((k_from, k_to), []).append(alpha)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            theta_cols = ",".join(f"theta{i}" for i in range(self.d_max))
            fh.write(f"iter,k,{theta_cols},accept_prob,move_kind\n")
            for it, (k, theta) in enumerate(zip(self.ks, self.thetas)):
                tcell = ",".join("%.17g" % v for v in theta)
                if it == 0:
                    fh.write(f"0,{k},{tcell},,init\n")
                else:
                    fh.write("%d,%d,%s,%.17g,%s\n"
                             % (it, k, tcell, self.alphas[it - 1],
                                self.kinds[it - 1]))


class NonFiniteTargetError(RuntimeError):
    def __init__(self, state, value):
        super().__init__(
            f"non-finite log target {value} at model index {state.index}, "
            f"theta={state.theta}")
        self.state = state


def initial_state(family: TargetFamily, maps: list, seed: int,
                  saturated: bool = False,
                  reference: ReferenceDist | None = None) -> TransModelState:
    """Model index from its prior; parameters at the reference mode image."""
    rng = np.random.default_rng(seed)
    k = int(rng.choice(family.num_models, p=np.exp(family.log_prior)))
    theta, _ = maps[k].push_np(np.zeros((1, family.models[k].dim)))
    aux = None
    if saturated:
        ref = reference or ReferenceDist()
        aux = _sample_reference(ref, family.d_max - family.models[k].dim, rng)
    return TransModelState(k, theta[0], aux=aux)


def run_chain(kernel, init: TransModelState, n_iterations: int, seed: int,
              within_maps: list | None = None, within_steps: int = 0,
              within_scale: float = 0.3,
              aux_refresh: bool = False) -> ChainRecord:
    """One chain: jump proposal each iteration, optional within-model moves.

    ``within_maps`` enables transported within-model updates for
    TrjKernel runs; ``aux_refresh`` enables the Gibbs auxiliary refresh
    of the standard saturated sampler.
    """
    rng = np.random.default_rng(seed)
    family = kernel.family
    record = ChainRecord(seed=seed, d_max=family.d_max)
    state = init
    record.record_state(state)
    for _ in range(n_iterations):
        if aux_refresh:
            state = kernel.refresh_aux(state, rng)
        proposal = kernel.propose(state, rng)
        if np.isnan(proposal.log_ratio) or proposal.log_ratio == np.inf:
            raise NonFiniteTargetError(proposal.state, proposal.log_ratio)
        alpha = proposal.alpha
        k_from = state.index
        if rng.random() < alpha:
            state = proposal.state
        record.record_move(k_from, proposal.forced_model, alpha, "jump")
        if within_steps and within_maps is not None:
            state, _ = within_model_update(
                state, within_maps[state.index], family.models[state.index],
                rng, n_steps=within_steps, step_scale=within_scale)
        record.record_state(state)
    return record


def run_chains(kernel, init: TransModelState, n_iterations: int,
               n_chains: int, master_seed: int, **kwargs) -> list[ChainRecord]:
    """Independent chains with disjoint derived seed streams."""
    return [run_chain(kernel, init, n_iterations, derive_seed(master_seed, c),
                      **kwargs)
            for c in range(n_chains)]

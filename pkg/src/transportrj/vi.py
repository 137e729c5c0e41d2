"""Reverse-KL variational training of transport maps.

``sgvi_train`` fits one flow to one model's unnormalized posterior by
stochastic gradient descent on the negative ELBO, estimated with
minibatches drawn from the reference distribution (reparameterization:
the draws are fixed inputs, the flow parameters move).
``conditional_train`` fits a single conditional flow jointly over all
models of a family in the saturated space, drawing the model index
uniformly per sample and routing pushed coordinates either to the
model's density or to the reference product via the saturation mask.

Both use Adam with the standard moment constants and support early
stopping on a windowed moving average of the loss.  Training is
deterministic given (seed, config): the minibatch stream is
counter-based and the accumulation order is fixed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .flows import ConditionalBase, FlowStack
from .reference import ReferenceDist, counter_uniform
from .targets import ModelSpace, TargetFamily


@dataclass
class TrainerConfig:
    minibatch: int = 256
    learning_rate: float = 1e-4
    max_iterations: int = 10_000
    window: int = 200
    early_stop_tol: float = 1e-3
    patience: int = 5
    seed: int = 0
    deterministic_timestamps: bool = True

    def __post_init__(self):
        if self.minibatch < 2:
            raise ValueError("minibatch must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class ElboTrace:
    iterations: list[int] = field(default_factory=list)
    neg_elbo: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, it, loss, gnorm, sec):
        self.iterations.append(int(it))
        self.neg_elbo.append(float(loss))
        self.grad_norm.append(float(gnorm))
        self.seconds.append(float(sec))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,neg_elbo,grad_norm,seconds\n")
            for row in zip(self.iterations, self.neg_elbo,
                           self.grad_norm, self.seconds):
                fh.write("%d,%.17g,%.17g,%.17g\n" % row)


class Adam:
    """Adam with the usual (0.9, 0.999, 1e-8) moment constants."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class TrainingError(RuntimeError):
    pass


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(values)))[0])
        raise TrainingError(f"non-finite {what} at sample {bad}")


def negative_elbo(flow, model: ModelSpace, m: int, seed: int,
                  start: int = 0) -> float:
    """Monte-Carlo negative ELBO, plain numpy (no gradients)."""
    z = flow.base.sample(flow.dim, m, seed, start)
    x, logdet = flow.push_np(z)
    logq = flow.base.log_density_rows(z) - logdet
    logpi = model.log_density_np(x)
    _check_finite(logpi, "target log density")
    return float(np.mean(logq - logpi))


def _neg_elbo_graph(flow, model: ModelSpace, z: np.ndarray):
    """Tape graph of the minibatch negative ELBO; returns (tape, loss, leaves)."""
    tape = Tape()
    leaves = flow.lift(tape)
    x, logdet = flow.push_tape(tape, tape.leaf(z), leaves)
    base_ld = float(np.sum(flow.base.log_density_rows(z)))
    logpi = model.log_density_tape(tape, x)
    _check_finite(logpi.value, "target log density")
    m = z.shape[0]
    loss = (base_ld / m) - logdet.mean() - logpi.mean()
    return tape, loss, leaves


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def sgvi_train(flow, model: ModelSpace, config: TrainerConfig):
    """Algorithm: sample reference minibatch, estimate gradient, Adam step.

    Returns (flow, ElboTrace); the flow's parameters are left at the
    best windowed loss seen during training.
    """
    params = flow.params()
    opt = Adam(params, config.learning_rate)
    trace = ElboTrace()
    t0 = time.perf_counter()
    best_window = np.inf
    best_params = [p.copy() for p in params]
    stall = 0
    initial_loss = None
    diverged_run = 0
    counter = 0
    for it in range(config.max_iterations):
        z = flow.base.sample(flow.dim, config.minibatch, config.seed, counter)
        counter += config.minibatch * flow.dim
        tape, loss, leaves = _neg_elbo_graph(flow, model, z)
        grads = tape.gradient(loss, leaves)
        opt.step(grads)
        loss_val = float(loss.value)
        sec = 0.0 if config.deterministic_timestamps else time.perf_counter() - t0
        trace.append(it, loss_val, _grad_norm(grads), sec)
        if initial_loss is None:
            initial_loss = abs(loss_val) + 1.0
        diverged_run = diverged_run + 1 if loss_val > 10.0 * initial_loss else 0
        if diverged_run >= 100:
            raise TrainingError(
                f"divergence: negative ELBO {loss_val:.3g} stayed above 10x "
                f"the initial value for 100 steps (iteration {it})")
        if (it + 1) % config.window == 0:
            window_mean = float(np.mean(trace.neg_elbo[-config.window:]))
            if window_mean < best_window - config.early_stop_tol:
                best_window = window_mean
                best_params = [p.copy() for p in params]
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    if best_window < np.inf:
        flow.set_params(best_params)
    return flow, trace


def _draw_model_indices(num_models: int, m: int, seed: int,
                        start: int) -> np.ndarray:
    u = counter_uniform(seed ^ 0x5bd1e995, start, m)
    return np.minimum((u * num_models).astype(np.int64), num_models - 1)


def _conditional_graph(stack: FlowStack, family: TargetFamily,
                       ks: np.ndarray, eps: np.ndarray):
    """Trans-dimensional negative ELBO graph for one minibatch."""
    tape = Tape()
    leaves = stack.lift(tape)
    base: ConditionalBase = stack.base
    base_leaves = stack.base_leaves_slice(leaves)
    z0, logq0 = base.sample_tape(tape, ks, eps, base_leaves)
    x, logdet = stack.push_tape(tape, z0, leaves, ks)
    logq = logq0 - logdet
    m = ks.size
    # route pushed coordinates through each model's density by mask
    total = logq.mean()
    for model in family.models:
        idx = np.flatnonzero(ks == model.index)
        if idx.size == 0:
            continue
        active = np.flatnonzero(model.mask)
        aux = np.flatnonzero(model.mask == 0)
        theta = x[idx][:, active]
        logpi = model.log_density_tape(tape, theta)
        _check_finite(logpi.value, f"target log density (model {model.label})")
        term = logpi.sum()
        if aux.size:
            u = x[idx][:, aux]
            term = term + ((-0.5) * (u ** 2 + np.log(2.0 * np.pi))).sum()
        total = total - term / m
    return tape, total, leaves


def conditional_train(stack: FlowStack, family: TargetFamily,
                      config: TrainerConfig):
    """Joint training of the conditional flow and its per-model base."""
    if stack.dim != family.d_max or stack.context_dim != family.num_models:
        raise ValueError("stack dimensions do not match the target family")
    params = stack.params()
    opt = Adam(params, config.learning_rate)
    trace = ElboTrace()
    t0 = time.perf_counter()
    best_window = np.inf
    best_params = [p.copy() for p in params]
    stall = 0
    counter = 0
    for it in range(config.max_iterations):
        ks = _draw_model_indices(family.num_models, config.minibatch,
                                 config.seed, counter)
        eps = ReferenceDist().sample(stack.dim, config.minibatch,
                                     config.seed, counter)
        counter += config.minibatch * stack.dim
        tape, loss, leaves = _conditional_graph(stack, family, ks, eps)
        grads = tape.gradient(loss, leaves)
        opt.step(grads)
        sec = 0.0 if config.deterministic_timestamps else time.perf_counter() - t0
        trace.append(it, float(loss.value), _grad_norm(grads), sec)
        if (it + 1) % config.window == 0:
            window_mean = float(np.mean(trace.neg_elbo[-config.window:]))
            if window_mean < best_window - config.early_stop_tol:
                best_window = window_mean
                best_params = [p.copy() for p in params]
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    if best_window < np.inf:
        stack.set_params(best_params)
    return stack, trace


@dataclass
class EvidenceEstimate:
    estimate: float
    standard_error: float
    log_estimate: float
    n_samples: int


def estimate_evidence(flow, model: ModelSpace, m: int, seed: int,
                      start: int = 0) -> EvidenceEstimate:
    """Importance-sampling marginal likelihood with the flow as proposal.

    Accumulation happens in log space with a max shift, so likelihoods
    spanning hundreds of log units do not underflow.
    """
    z = flow.base.sample(flow.dim, m, seed, start)
    x, logdet = flow.push_np(z)
    logq = flow.base.log_density_rows(z) - logdet
    logw = model.log_density_np(x) - logq
    _check_finite(logw, "importance weight")
    shift = float(np.max(logw))
    if shift == -np.inf:
        raise FloatingPointError("all importance weights are zero")
    w = np.exp(logw - shift)
    mean_w = float(np.mean(w))
    log_estimate = shift + float(np.log(mean_w))
    sd = float(np.std(w, ddof=1)) / np.sqrt(m)
    return EvidenceEstimate(
        estimate=float(np.exp(shift) * mean_w),
        standard_error=float(np.exp(shift) * sd),
        log_estimate=log_estimate,
        n_samples=m)


def rejection_free_index_proposal(evidences, priors) -> np.ndarray:
    """Model-index proposal proportional to estimated evidence x prior."""
    evidences = np.asarray(evidences, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(evidences <= 0) or np.any(priors <= 0):
        raise ValueError("evidences and priors must be positive")
    q = evidences * priors
    return q / q.sum()

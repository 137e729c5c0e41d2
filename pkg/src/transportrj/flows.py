"""Invertible transport maps: RealNVP stacks, a scalar flow, and exact maps.

Conventions used throughout:

- ``push`` maps reference/base space to target space (this is the
  learned T^-1), ``pull`` is the exact algebraic inverse.
- Both directions return (output, logdet) where logdet is the log
  absolute Jacobian determinant of the direction evaluated, per sample.
  Push and pull log-determinants at corresponding points are exact
  negatives of each other.
- ``*_np`` methods are plain numpy (used by the samplers); ``push_tape``
  records on an autodiff tape (used by training).  Both share the same
  formulas and a consistency test pins them together.

All networks are zero-initialized so every freshly built stack is the
global identity map, which is where training starts.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .autodiff import MlpParams, Node, Tape
from .reference import LOG_2PI, ReferenceDist, counter_uniform

SIGMA_FLOOR = 1e-6
_SOFTPLUS_INV_1 = float(np.log(np.e - 1.0))  # softplus(x + this) = 1 at x = 0


def one_hot(k, num_classes: int) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    out = np.zeros((k.size, num_classes))
    out[np.arange(k.size), k] = 1.0
    return out


@dataclass
class CouplingLayer:
    """One affine coupling step on R^d.

    The identity block is copied; the other block is scaled by exp(s)
    and shifted by t, with s and t MLPs of the identity block (plus a
    one-hot context when ``context_dim`` > 0).  ``parity`` alternates
    which block is the identity one from layer to layer.
    """

    dim: int
    split: int
    parity: int
    s_net: MlpParams
    t_net: MlpParams
    context_dim: int = 0

    @classmethod
    def create(cls, dim: int, split: int, parity: int, hidden: int,
               context_dim: int = 0, scale: float = 0.0, rng=None) -> "CouplingLayer":
        if not 1 <= split < dim:
            raise ValueError(f"split index must satisfy 1 <= d0 < d, got {split}")
        id_size = split if parity % 2 == 0 else dim - split
        tr_size = dim - id_size
        sizes = [id_size + context_dim, hidden, tr_size]
        if rng is None:
            rng = np.random.default_rng(1000 + parity)
        s_net = MlpParams.create(sizes, scale=scale, rng=rng)
        t_net = MlpParams.create(sizes, scale=scale, rng=rng)
        return cls(dim, split, parity, s_net, t_net, context_dim)

    def _blocks(self):
        if self.parity % 2 == 0:
            return slice(0, self.split), slice(self.split, self.dim)
        return slice(self.split, self.dim), slice(0, self.split)

    def params(self) -> list[np.ndarray]:
        return self.s_net.params() + self.t_net.params()

    def _check(self, z: np.ndarray, context):
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {z.shape[-1]}")
        if (context is None) != (self.context_dim == 0):
            raise ValueError("context must be supplied iff the layer is conditional")

    def _net_input(self, z_id: np.ndarray, context) -> np.ndarray:
        if self.context_dim:
            return np.concatenate([z_id, context], axis=-1)
        return z_id

    def forward_np(self, z: np.ndarray, context=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        self._check(z, context)
        id_sl, tr_sl = self._blocks()
        h = self._net_input(z[:, id_sl], context)
        s = self.s_net.apply_np(h)
        t = self.t_net.apply_np(h)
        x = z.copy()
        x[:, tr_sl] = z[:, tr_sl] * np.exp(s) + t
        return x, np.sum(s, axis=-1)

    def inverse_np(self, x: np.ndarray, context=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._check(x, context)
        id_sl, tr_sl = self._blocks()
        h = self._net_input(x[:, id_sl], context)
        s = self.s_net.apply_np(h)
        t = self.t_net.apply_np(h)
        z = x.copy()
        z[:, tr_sl] = (x[:, tr_sl] - t) * np.exp(-s)
        return z, -np.sum(s, axis=-1)

    def lift(self, tape: Tape) -> list[Node]:
        return [tape.leaf(a) for a in self.params()]

    def forward_tape(self, tape: Tape, z: Node, leaves: list[Node],
                     context: np.ndarray | None = None):
        self._check(z.value, context)
        id_sl, tr_sl = self._blocks()
        n_s = 2 * len(self.s_net.weights)
        z_id = z[:, id_sl]
        if self.context_dim:
            z_id = ad.concat([z_id, tape.constant(context)], axis=-1)
        s = ad.mlp_apply(self.s_net, z_id, tape, leaves[:n_s])
        t = ad.mlp_apply(self.t_net, z_id, tape, leaves[n_s:])
        x_tr = z[:, tr_sl] * ad.exp(s) + t
        blocks = [z[:, id_sl], x_tr] if self.parity % 2 == 0 else [x_tr, z[:, id_sl]]
        # parity even: identity block first; odd: transformed block first
        x = ad.concat(blocks, axis=-1)
        return x, s.sum(axis=-1)


class ConditionalBase:
    """Gaussian base N(mu(k), diag(sigma(k)^2)) with MLP-generated moments."""

    def __init__(self, d: int, num_models: int, hidden: int = 256, rng=None):
        self.d = d
        self.num_models = num_models
        if rng is None:
            rng = np.random.default_rng(0xBA5E)
        self.mu_net = MlpParams.create([num_models, hidden, d], rng=rng)
        self.sigma_net = MlpParams.create([num_models, hidden, d], rng=rng)

    def params(self) -> list[np.ndarray]:
        return self.mu_net.params() + self.sigma_net.params()

    def lift(self, tape: Tape) -> list[Node]:
        return [tape.leaf(a) for a in self.params()]

    def moments_np(self, k):
        ctx = one_hot(k, self.num_models)
        mu = self.mu_net.apply_np(ctx)
        sigma = ad.softplus_np(self.sigma_net.apply_np(ctx)) + SIGMA_FLOOR
        return mu, sigma

    def log_density_rows(self, z0: np.ndarray, k) -> np.ndarray:
        mu, sigma = self.moments_np(k)
        resid = (np.atleast_2d(z0) - mu) / sigma
        return -0.5 * np.sum(resid ** 2 + LOG_2PI, axis=-1) - np.sum(
            np.log(sigma), axis=-1)

    def sample_np(self, k, seed: int, start: int = 0):
        """Reparameterized draws for an array of model indices."""
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        mu, sigma = self.moments_np(k)
        eps = ReferenceDist().sample(self.d, k.size, seed, start)
        return mu + sigma * eps, eps

    def moments_tape(self, tape: Tape, k, leaves: list[Node]):
        n_mu = 2 * len(self.mu_net.weights)
        ctx = tape.constant(one_hot(k, self.num_models))
        mu = ad.mlp_apply(self.mu_net, ctx, tape, leaves[:n_mu])
        raw = ad.mlp_apply(self.sigma_net, ctx, tape, leaves[n_mu:])
        sigma = ad.softplus(raw) + SIGMA_FLOOR
        return mu, sigma

    def sample_tape(self, tape: Tape, k, eps: np.ndarray, leaves: list[Node]):
        """Differentiable z0 = mu(k) + sigma(k) * eps with its log density."""
        mu, sigma = self.moments_tape(tape, k, leaves)
        z0 = mu + sigma * tape.constant(eps)
        logq = (-0.5) * ((tape.constant(eps) ** 2 + LOG_2PI).sum(axis=-1)) \
            - ad.log(sigma).sum(axis=-1)
        return z0, logq


@dataclass
class FlowStack:
    """Composition of coupling layers with a base distribution.

    For unconditional stacks the base is a ReferenceDist product; a
    conditional stack (context_dim > 0) carries a ConditionalBase.
    """

    dim: int
    layers: list[CouplingLayer]
    base: ReferenceDist | ConditionalBase
    context_dim: int = 0
    hidden: int = 256

    @classmethod
    def create(cls, dim: int, depth: int, hidden: int = 256,
               base: ReferenceDist | None = None, context_dim: int = 0,
               scale: float = 0.0, rng=None) -> "FlowStack":
        split = (dim + 1) // 2
        if rng is None:
            rng = np.random.default_rng(0x5EED)
        layers = [CouplingLayer.create(dim, split, parity, hidden,
                                       context_dim, scale, rng)
                  for parity in range(depth)]
        if base is None:
            base = (ConditionalBase(dim, context_dim, hidden, rng=rng)
                    if context_dim else ReferenceDist())
        return cls(dim, layers, base, context_dim, hidden)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        if isinstance(self.base, ConditionalBase):
            out.extend(self.base.params())
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        own = self.params()
        if len(own) != len(arrays):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(own, arrays):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src

    def _context(self, k, n: int):
        if not self.context_dim:
            return None
        ctx = one_hot(k, self.context_dim)
        if ctx.shape[0] == 1 and n > 1:
            ctx = np.broadcast_to(ctx, (n, self.context_dim))
        return ctx

    def push_np(self, z: np.ndarray, k=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        x, logdet = z, np.zeros(z.shape[0])
        ctx = self._context(k, z.shape[0])
        for layer in self.layers:
            x, ld = layer.forward_np(x, ctx)
            logdet = logdet + ld
        return x, logdet

    def pull_np(self, x: np.ndarray, k=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z, logdet = x, np.zeros(x.shape[0])
        ctx = self._context(k, x.shape[0])
        for layer in reversed(self.layers):
            z, ld = layer.inverse_np(z, ctx)
            logdet = logdet + ld
        return z, logdet

    def log_density_np(self, x: np.ndarray, k=None) -> np.ndarray:
        """log q(x) by pulling back to the base: change of variables."""
        z, logdet_pull = self.pull_np(x, k)
        if isinstance(self.base, ConditionalBase):
            base_ld = self.base.log_density_rows(z, k)
        else:
            base_ld = self.base.log_density_rows(z)
        return base_ld + logdet_pull

    def lift(self, tape: Tape) -> list[Node]:
        return [tape.leaf(a) for a in self.params()]

    def push_tape(self, tape: Tape, z: Node, leaves: list[Node], k=None):
        n_per = [len(layer.params()) for layer in self.layers]
        ctx = self._context(k, z.value.shape[0])
        x, logdet = z, None
        offset = 0
        for layer, n in zip(self.layers, n_per):
            x, ld = layer.forward_tape(tape, x, leaves[offset:offset + n], ctx)
            logdet = ld if logdet is None else logdet + ld
            offset += n
        return x, logdet

    def base_leaves_slice(self, leaves: list[Node]) -> list[Node]:
        n_flow = sum(len(layer.params()) for layer in self.layers)
        return leaves[n_flow:]


@dataclass
class ScalarFlow:
    """Invertible flow on R for one-dimensional models.

    Each layer applies x = sinh((asinh(a z + b) + eps) / delta) with
    a, delta > 0 via a shifted softplus so that zero raw parameters give
    the exact identity.  Inverse and log-determinant are closed form.
    """

    raw: list[np.ndarray]  # per layer: (a_raw, b, eps_raw, delta_raw)
    dim: int = 1
    base: ReferenceDist = field(default_factory=ReferenceDist)
    context_dim: int = 0

    @classmethod
    def create(cls, depth: int, base: ReferenceDist | None = None) -> "ScalarFlow":
        return cls([np.zeros(4) for _ in range(depth)],
                   base=base or ReferenceDist())

    @property
    def depth(self) -> int:
        return len(self.raw)

    def params(self) -> list[np.ndarray]:
        return self.raw

    def set_params(self, arrays: list[np.ndarray]) -> None:
        for dst, src in zip(self.raw, arrays):
            dst[...] = src

    @staticmethod
    def _constrained(p: np.ndarray):
        a = ad.softplus_np(p[0] + _SOFTPLUS_INV_1)
        delta = ad.softplus_np(p[3] + _SOFTPLUS_INV_1)
        return a, p[1], p[2], delta

    def push_np(self, z: np.ndarray, k=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        x, logdet = z, np.zeros(z.shape[0])
        for p in self.raw:
            a, b, eps, delta = self._constrained(p)
            y = a * x + b
            w = (np.arcsinh(y) + eps) / delta
            ld = (np.log(np.cosh(w)) + np.log(a) - np.log(delta)
                  - 0.5 * np.log1p(y * y))
            x = np.sinh(w)
            logdet = logdet + np.sum(ld, axis=-1)
        return x, logdet

    def pull_np(self, x: np.ndarray, k=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z, logdet = x, np.zeros(x.shape[0])
        for p in reversed(self.raw):
            a, b, eps, delta = self._constrained(p)
            w = np.arcsinh(z)
            y = np.sinh(delta * w - eps)
            ld = (np.log(np.cosh(delta * w - eps)) + np.log(delta)
                  - 0.5 * np.log1p(z * z) - np.log(a))
            z = (y - b) / a
            logdet = logdet + np.sum(ld, axis=-1)
        return z, logdet

    def log_density_np(self, x: np.ndarray, k=None) -> np.ndarray:
        z, logdet_pull = self.pull_np(x, k)
        return self.base.log_density_rows(z) + logdet_pull

    def lift(self, tape: Tape) -> list[Node]:
        return [tape.leaf(p) for p in self.raw]

    def push_tape(self, tape: Tape, z: Node, leaves: list[Node], k=None):
        x, logdet = z, None
        for leaf in leaves:
            a = ad.softplus(leaf[0] + _SOFTPLUS_INV_1)
            delta = ad.softplus(leaf[3] + _SOFTPLUS_INV_1)
            y = a * x + leaf[1]
            w = (ad.asinh(y) + leaf[2]) / delta
            ld = (ad.log(ad.cosh(w)) + ad.log(a) - ad.log(delta)
                  - 0.5 * ad.log(1.0 + y * y))
            x = ad.sinh(w)
            ld_sum = ld.sum(axis=-1)
            logdet = ld_sum if logdet is None else logdet + ld_sum
        return x, logdet


@dataclass(frozen=True)
class SasExactMap:
    """Analytic transport T(z) = S_eps_delta(L z) between N(0, I) and the
    sinh-arcsinh pushforward target; used as the exact-map oracle."""

    eps: np.ndarray
    delta: np.ndarray
    lower: np.ndarray  # lower-triangular L

    def __post_init__(self):
        if np.any(np.abs(np.diag(self.lower)) < 1e-300):
            raise ValueError("singular L matrix")

    @property
    def dim(self) -> int:
        return self.eps.size

    @property
    def context_dim(self) -> int:
        return 0

    @property
    def _logdet_L(self) -> float:
        return float(np.sum(np.log(np.abs(np.diag(self.lower)))))

    def push_np(self, z: np.ndarray, k=None):
        """Reference to target; logdet of the forward map."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        v = z @ self.lower.T
        w = (np.arcsinh(v) + self.eps) / self.delta
        ld = (np.log(np.cosh(w)) - np.log(self.delta)
              - 0.5 * np.log1p(v * v))
        return np.sinh(w), np.sum(ld, axis=-1) + self._logdet_L

    def pull_np(self, x: np.ndarray, k=None):
        """Target to reference via S^-1 then a triangular solve."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        arg = self.delta * np.arcsinh(x) - self.eps
        v = np.sinh(arg)
        ld = (np.log(np.cosh(arg)) + np.log(self.delta)
              - 0.5 * np.log1p(x * x))
        z = solve_triangular(self.lower, v.T, lower=True).T
        return z, np.sum(ld, axis=-1) - self._logdet_L

    def log_density_np(self, x: np.ndarray, k=None) -> np.ndarray:
        z, logdet_pull = self.pull_np(x, k)
        return ReferenceDist().log_density_rows(z) + logdet_pull

    def lift(self, tape: Tape) -> list[Node]:
        return []  # no trainable parameters

    def push_tape(self, tape: Tape, z: Node, leaves: list[Node], k=None):
        v = ad.matmul(z, tape.constant(self.lower.T.copy()))
        w = (ad.asinh(v) + tape.constant(self.eps)) \
            * tape.constant(1.0 / self.delta)
        ld = (ad.log(ad.cosh(w)) + tape.constant(-np.log(self.delta))
              + ad.log(v * v + 1.0) * (-0.5))
        logdet = ld.sum(axis=-1) + self._logdet_L
        return ad.sinh(w), logdet

    @property
    def base(self) -> ReferenceDist:
        return ReferenceDist()


# -- checkpoint serialization ------------------------------------------

_MAGIC = b"TRJF\x01"


def _flow_header(flow) -> dict:
    if isinstance(flow, ScalarFlow):
        return {"kind": "scalar", "depth": flow.depth}
    base = flow.base
    header = {
        "kind": "realnvp",
        "dim": flow.dim,
        "depth": flow.depth,
        "hidden": flow.hidden,
        "context_dim": flow.context_dim,
    }
    if isinstance(base, ReferenceDist):
        header["base"] = {"kind": base.kind, "dof": base.dof}
    return header


def build_flow(header: dict):
    if header["kind"] == "scalar":
        return ScalarFlow.create(header["depth"])
    if header["kind"] == "realnvp":
        base = None
        if "base" in header:
            base = ReferenceDist(header["base"]["kind"], header["base"]["dof"])
        return FlowStack.create(header["dim"], header["depth"],
                                hidden=header["hidden"], base=base,
                                context_dim=header["context_dim"])
    raise ValueError(f"unknown flow kind {header['kind']!r}")


def save_checkpoint(path, flow, meta: dict | None = None) -> None:
    """Versioned binary checkpoint: JSON header + raw float64 blocks."""
    arrays = flow.params()
    header = {
        "flow": _flow_header(flow),
        "shapes": [list(a.shape) for a in arrays],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild a flow from a checkpoint; rejects shape-incompatible files."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a flow checkpoint")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode())
        flow = build_flow(header["flow"])
        arrays = []
        for shape in header["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    expected = [a.shape for a in flow.params()]
    got = [a.shape for a in arrays]
    if expected != got:
        raise ValueError(f"{path}: checkpoint shapes {got} do not match "
                         f"flow shapes {expected}")
    flow.set_params(arrays)
    return flow, header["meta"]

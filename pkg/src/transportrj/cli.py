"""Command-line entry point.

Subcommands: ``train``, ``sample``, ``diagnose``, ``evidence``,
``ablate``.  Every command writes ``manifest.json`` (full config, config
hash, seeds, package versions, input hashes, output list) into the
output directory; re-running with ``--config manifest.json`` reproduces
every output byte-for-byte.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 data error.
"""

from __future__ import annotations

import csv
import glob as globlib
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import scipy
import yaml

from . import __version__
from .config import ConfigError, RunConfig, preset
from .diagnostics import (BbeAccumulator, bbe_estimate, build_eval_set,
                          conditional_mh_source, exact_map_source,
                          export_replicates, flow_mh_source,
                          running_model_prob)
from .flows import (FlowStack, ScalarFlow, load_checkpoint, save_checkpoint)
from .reference import ReferenceDist, derive_seed
from .rjmcmc import (CtpKernel, NonFiniteTargetError, StandardSaturatedKernel,
                     TransModelState, TrjKernel, initial_state, run_chain)
from .targets import (fa_family, fa_load_data, fa_synthetic_data,
                      gaussian_toy_family, sas_family, vs_family,
                      vs_simulate_data)
from .vi import (TrainerConfig, TrainingError, conditional_train,
                 estimate_evidence, negative_elbo, sgvi_train)

EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 2, 3, 4


class DataError(ValueError):
    pass


# -- config and manifest plumbing --------------------------------------

def _load_config(config_path, preset_name, seed, out, synthetic) -> RunConfig:
    if config_path is None and preset_name is None:
        raise ConfigError("either --config or --preset is required")
    if config_path is not None:
        text = Path(config_path).read_text()
        if str(config_path).endswith(".json"):
            # manifests embed the config under the "config" key
            cfg = RunConfig.from_dict(json.loads(text)["config"])
        else:
            cfg = RunConfig.from_yaml(text)
    else:
        cfg = preset(preset_name)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = str(out)
    if synthetic:
        cfg.synthetic_data = True
    return cfg


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, command: str, outputs: list[str],
                    inputs: dict | None = None, extra: dict | None = None):
    out_dir = Path(cfg.out_dir)
    # The hash identifies the computation, so the output location is
    # excluded: a rerun into a different directory hashes the same.
    hashed = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    config_yaml = yaml.safe_dump(hashed, sort_keys=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": hashlib.sha256(config_yaml.encode()).hexdigest(),
        "seed": cfg.seed,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "transportrj": __version__,
        },
        "input_hashes": inputs or {},
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _build_family(cfg: RunConfig):
    """Target family plus the input-file hash record for the manifest."""
    inputs = {}
    try:
        if cfg.target == "sas":
            family = sas_family()
        elif cfg.target == "gaussian-toy":
            family = gaussian_toy_family()
        elif cfg.target == "factor-analysis":
            if cfg.data_path:
                inputs[str(cfg.data_path)] = _file_digest(cfg.data_path)
                data = fa_load_data(cfg.data_path)
            elif cfg.synthetic_data:
                data = fa_synthetic_data(derive_seed(cfg.seed, 0xDA7A))
            else:
                raise DataError(
                    "factor-analysis needs data_path or synthetic_data")
            family = fa_family(data)
        else:
            if cfg.data_path:
                raise DataError(
                    "variable-selection uses simulated data; drop data_path")
            X, Y = vs_simulate_data(derive_seed(cfg.seed, 0xDA7A))
            kwargs = {}
            if "mixture_weight" in cfg.target_params:
                kwargs["weight"] = cfg.target_params["mixture_weight"]
            family = vs_family(X, Y, **kwargs)
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(str(exc)) from exc
    return family, inputs


def _reference(cfg: RunConfig) -> ReferenceDist:
    return ReferenceDist(cfg.flow.reference, cfg.flow.student_dof)


def _make_flow(cfg: RunConfig, dim: int, model_index: int):
    if dim == 1 and not cfg.flow.conditional:
        return ScalarFlow.create(cfg.flow.depth_for(model_index),
                                 base=_reference(cfg))
    return FlowStack.create(dim, cfg.flow.depth_for(model_index),
                            hidden=cfg.flow.hidden, base=_reference(cfg))


def _trainer(cfg: RunConfig, stream: int) -> TrainerConfig:
    t = cfg.trainer
    return TrainerConfig(minibatch=t.minibatch, learning_rate=t.learning_rate,
                         max_iterations=t.max_iterations, window=t.window,
                         early_stop_tol=t.early_stop_tol, patience=t.patience,
                         seed=derive_seed(cfg.seed, stream),
                         deterministic_timestamps=t.deterministic_timestamps)


def _checkpoint_paths(cfg: RunConfig, family) -> list[Path]:
    out_dir = Path(cfg.out_dir)
    if cfg.flow.conditional:
        return [out_dir / "conditional.ckpt"]
    return [out_dir / f"model{m.index}.ckpt" for m in family.models]


def _load_maps(cfg: RunConfig, family, checkpoint_dir):
    """Per-model maps for sampling: exact maps or trained checkpoints."""
    if cfg.flow.kind == "exact":
        if family.exact_maps is None:
            raise ConfigError(
                f"flow.kind: target {family.name!r} has no exact maps")
        return family.exact_maps
    ckpt_dir = Path(checkpoint_dir or cfg.out_dir)
    maps = []
    for model in family.models:
        flow, _ = load_checkpoint(ckpt_dir / f"model{model.index}.ckpt")
        if flow.dim != model.dim:
            raise ConfigError(
                f"checkpoint model{model.index}.ckpt: dim {flow.dim} does "
                f"not match model dim {model.dim}")
        maps.append(flow)
    return maps


def _index_proposal(family) -> np.ndarray:
    """Rows equal to the model prior (uniform prior gives uniform rows)."""
    p = np.exp(family.log_prior)
    return np.tile(p, (family.num_models, 1))


def _build_kernel(cfg: RunConfig, family, checkpoint_dir):
    q = _index_proposal(family)
    if cfg.chain.kernel == "standard":
        return StandardSaturatedKernel(family, q)
    if cfg.chain.kernel == "ctp":
        ckpt = Path(checkpoint_dir or cfg.out_dir) / "conditional.ckpt"
        stack, _ = load_checkpoint(ckpt)
        return CtpKernel(family, stack, q, reference=_reference(cfg))
    maps = _load_maps(cfg, family, checkpoint_dir)
    return TrjKernel(family, maps, q, reference=_reference(cfg))


# -- commands -----------------------------------------------------------

def _run_train(cfg: RunConfig) -> list[str]:
    family, inputs = _build_family(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, final_losses = [], {}
    if cfg.flow.conditional:
        stack = FlowStack.create(family.d_max, cfg.flow.depth,
                                 hidden=cfg.flow.hidden,
                                 context_dim=family.num_models)
        stack, trace = conditional_train(stack, family, _trainer(cfg, 0))
        ckpt = out_dir / "conditional.ckpt"
        save_checkpoint(ckpt, stack, meta={"target": cfg.target,
                                           "conditional": True})
        trace_path = out_dir / "elbo_conditional.csv"
        trace.to_csv(trace_path)
        outputs += [str(ckpt), str(trace_path)]
        final_losses["conditional"] = trace.neg_elbo[-1]
    else:
        for model in family.models:
            flow = _make_flow(cfg, model.dim, model.index)
            flow, trace = sgvi_train(flow, model, _trainer(cfg, model.index))
            ckpt = out_dir / f"model{model.index}.ckpt"
            save_checkpoint(ckpt, flow, meta={"target": cfg.target,
                                              "model_index": model.index,
                                              "model_label": str(model.label)})
            trace_path = out_dir / f"elbo_model{model.index}.csv"
            trace.to_csv(trace_path)
            outputs += [str(ckpt), str(trace_path)]
            final_losses[f"model{model.index}"] = trace.neg_elbo[-1]
    _write_manifest(cfg, "train", outputs, inputs,
                    extra={"final_neg_elbo": final_losses})
    return outputs


def _run_sample(cfg: RunConfig, checkpoint_dir) -> list[str]:
    family, inputs = _build_family(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kernel = _build_kernel(cfg, family, checkpoint_dir)
    saturated = cfg.chain.kernel == "standard"
    maps = None
    if isinstance(kernel, TrjKernel):
        maps = kernel.maps
    init_maps = maps if maps is not None else _init_pushers(kernel, family)
    outputs = []
    summary: dict[str, dict] = {}
    for c in range(cfg.chain.chains):
        chain_seed = derive_seed(cfg.seed, c)
        init = initial_state(family, init_maps, chain_seed,
                             saturated=saturated)
        record = run_chain(
            kernel, init, cfg.chain.iterations, chain_seed,
            within_maps=maps if cfg.chain.within_steps else None,
            within_steps=cfg.chain.within_steps if maps is not None else 0,
            within_scale=cfg.chain.within_scale,
            aux_refresh=saturated or cfg.chain.aux_refresh)
        trace_path = out_dir / f"trace_{c}.csv"
        record.to_csv(trace_path)
        alpha_path = out_dir / f"jumps_{c}.csv"
        _write_jumps(alpha_path, record)
        outputs += [str(trace_path), str(alpha_path)]
        for pair, alphas in record.pair_acceptances().items():
            key = f"{pair[0]}->{pair[1]}"
            entry = summary.setdefault(key, {"count": 0, "mean_alpha": 0.0})
            total = entry["mean_alpha"] * entry["count"] + float(np.sum(alphas))
            entry["count"] += len(alphas)
            entry["mean_alpha"] = total / entry["count"]
    _write_manifest(cfg, "sample", outputs, inputs,
                    extra={"acceptance_summary": summary})
    return outputs


def _init_pushers(kernel, family):
    """Identity-at-zero maps so chains can start without per-model flows."""
    class _Zero:
        def __init__(self, dim):
            self.dim = dim

        def push_np(self, z):
            return z, np.zeros(z.shape[0])

    if isinstance(kernel, CtpKernel):
        class _Cond:
            def __init__(self, stack, model):
                self.dim = model.dim
                self._stack, self._model = stack, model

            def push_np(self, z):
                model = self._model
                sat = np.zeros((z.shape[0], model.mask.size))
                sat[:, model.mask == 1] = z
                out, logdet = self._stack.push_np(sat, model.index)
                return out[:, model.mask == 1], logdet

        return [_Cond(kernel.stack, m) for m in kernel.family.models]
    return [_Zero(m.dim) for m in family.models]


def _write_jumps(path, record) -> None:
    with open(path, "w") as fh:
        fh.write("k_from,k_to,accept_prob\n")
        for (k_from, k_to), alpha, kind in zip(record.moves, record.alphas,
                                               record.kinds):
            if kind == "jump":
                fh.write("%d,%d,%.17g\n" % (k_from, k_to, alpha))


def _read_trace_ks(path) -> np.ndarray:
    with open(path) as fh:
        reader = csv.DictReader(fh)
        try:
            return np.array([int(row["k"]) for row in reader], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed trace file") from exc


def _eval_sources(cfg: RunConfig, family, checkpoint_dir):
    """Per-model posterior-sample sources for evaluation-set replicates."""
    if cfg.flow.conditional:
        ckpt = Path(checkpoint_dir or cfg.out_dir) / "conditional.ckpt"
        stack, _ = load_checkpoint(ckpt)
        return [conditional_mh_source(stack, family, k, thin=5)
                for k in range(family.num_models)]
    maps = _load_maps(cfg, family, checkpoint_dir)
    if cfg.flow.kind == "exact":
        return [exact_map_source(tm) for tm in maps]
    return [flow_mh_source(flow, model, thin=5)
            for flow, model in zip(maps, family.models)]


def _run_diagnose(cfg: RunConfig, traces_dir, checkpoint_dir=None,
                  replicates: int = 0, eval_samples: int = 500) -> list[str]:
    family, inputs = _build_family(cfg)
    src = Path(traces_dir or cfg.out_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_files = sorted(globlib.glob(str(src / "trace_*.csv")))
    if not trace_files and not replicates:
        raise DataError(f"no trace files found under {src}")
    outputs = []
    burn = cfg.chain.burn_in_fraction
    if trace_files:
        running_path = out_dir / "running_prob.csv"
        with open(running_path, "w") as fh:
            fh.write("chain,iteration,model,probability\n")
            for c, tf in enumerate(trace_files):
                inputs[tf] = _file_digest(tf)
                ks = _read_trace_ks(tf)

                class _Rec:  # running_model_prob only needs k_array
                    k_array = ks

                for model in family.models:
                    series = running_model_prob(_Rec, model.index)
                    for t, value in enumerate(series, start=1):
                        fh.write("%d,%d,%d,%.17g\n"
                                 % (c, t, model.index, value))
        outputs.append(str(running_path))
        acc = BbeAccumulator(family.num_models)
        for jf in sorted(globlib.glob(str(src / "jumps_*.csv"))):
            inputs[jf] = _file_digest(jf)
            with open(jf) as fh:
                rows = list(csv.DictReader(fh))
            n_skip = int(burn * len(rows))
            for row in rows[n_skip:]:
                k_from, k_to = int(row["k_from"]), int(row["k_to"])
                if k_from != k_to:
                    acc.add(k_from, k_to, float(row["accept_prob"]))
        bbe_path = out_dir / "bbe.csv"
        with open(bbe_path, "w") as fh:
            fh.write("model,probability\n")
            probs = bbe_estimate(acc, family.num_models,
                                 index_proposal=_index_proposal(family))
            for model, p in zip(family.models, probs):
                fh.write("%s,%.17g\n" % (model.index, p))
        outputs.append(str(bbe_path))
    if replicates:
        kernel = _build_kernel(cfg, family, checkpoint_dir)
        sources = _eval_sources(cfg, family, checkpoint_dir)
        rows = []
        for i in range(replicates):
            rng = np.random.default_rng(derive_seed(cfg.seed, 0xB3E0 + i))
            acc = build_eval_set(kernel, sources, eval_samples, rng)
            probs = bbe_estimate(acc, family.num_models,
                                 index_proposal=kernel.q)
            rows.extend((i, model.index, p)
                        for model, p in zip(family.models, probs))
        rep_path = out_dir / "bbe_replicates.csv"
        export_replicates(rep_path, rows)
        outputs.append(str(rep_path))
    _write_manifest(cfg, "diagnose", outputs, inputs,
                    extra={"replicates": replicates,
                           "eval_samples": eval_samples} if replicates
                    else None)
    return outputs


def _run_evidence(cfg: RunConfig, checkpoint_dir, n_samples: int) -> list[str]:
    family, inputs = _build_family(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = _load_maps(cfg, family, checkpoint_dir)
    path = out_dir / "evidence.csv"
    rows = []
    for model, flow in zip(family.models, maps):
        if not hasattr(flow, "base"):
            raise ConfigError("evidence requires trained flow proposals")
        est = estimate_evidence(flow, model, n_samples,
                                derive_seed(cfg.seed, 0xE51D + model.index))
        nelbo = negative_elbo(flow, model, n_samples,
                              derive_seed(cfg.seed, 0xE7B0 + model.index))
        rows.append((model.index, est, nelbo))
    # The negative ELBO lower-bounds the log evidence, so it doubles as
    # a cheap model-comparing score next to the IS estimate.
    log_prior = family.log_prior
    elbo_scores = np.array([lp - nelbo
                            for (_, _, nelbo), lp in zip(rows, log_prior)])
    is_scores = np.array([lp + est.log_estimate
                          for (_, est, _), lp in zip(rows, log_prior)])
    elbo_probs = np.exp(elbo_scores - elbo_scores.max())
    elbo_probs /= elbo_probs.sum()
    is_probs = np.exp(is_scores - is_scores.max())
    is_probs /= is_probs.sum()
    with open(path, "w") as fh:
        fh.write("model,estimate,standard_error,log_estimate,n_samples,"
                 "neg_elbo,elbo_model_probability,is_model_probability\n")
        for (index, est, nelbo), pe, pi in zip(rows, elbo_probs, is_probs):
            fh.write("%d,%.17g,%.17g,%.17g,%d,%.17g,%.17g,%.17g\n"
                     % (index, est.estimate, est.standard_error,
                        est.log_estimate, est.n_samples, nelbo, pe, pi))
    _write_manifest(cfg, "evidence", [str(path)], inputs,
                    extra={"n_samples": n_samples})
    return [str(path)]


def _run_ablate(cfg: RunConfig, depths: tuple[int, ...],
                model_index: int) -> list[str]:
    family, inputs = _build_family(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = family.models[model_index]
    outputs, table = [], []
    for depth in depths:
        if model.dim == 1:
            flow = ScalarFlow.create(depth, base=_reference(cfg))
        else:
            flow = FlowStack.create(model.dim, depth, hidden=cfg.flow.hidden,
                                    base=_reference(cfg))
        flow, trace = sgvi_train(flow, model, _trainer(cfg, depth))
        ckpt = out_dir / f"ablate_model{model_index}_L{depth}.ckpt"
        save_checkpoint(ckpt, flow, meta={"target": cfg.target,
                                          "model_index": model_index,
                                          "depth": depth})
        outputs.append(str(ckpt))
        window = min(len(trace.neg_elbo), 200)
        table.append((depth, len(trace.neg_elbo),
                      float(np.mean(trace.neg_elbo[-window:]))))
    table_path = out_dir / "ablation.csv"
    with open(table_path, "w") as fh:
        fh.write("depth,iterations,final_neg_elbo\n")
        for row in table:
            fh.write("%d,%d,%.17g\n" % row)
    outputs.append(str(table_path))
    _write_manifest(cfg, "ablate", outputs, inputs,
                    extra={"depths": list(depths), "model_index": model_index})
    return outputs


# -- click wiring --------------------------------------------------------

def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML config or manifest.json")(fn)
    fn = click.option("--preset", "preset_name", default=None,
                      type=click.Choice(["sas", "factor-analysis",
                                         "variable-selection"]))(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1),
                      default=None)(fn)
    fn = click.option("--out", type=click.Path(), default=None)(fn)
    fn = click.option("--synthetic-data", is_flag=True, default=False)(fn)
    return fn


def _dispatch(runner, config_path, preset_name, seed, out, synthetic,
              **kwargs):
    try:
        cfg = _load_config(config_path, preset_name, seed, out, synthetic)
        outputs = runner(cfg, **kwargs)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except (TrainingError, NonFiniteTargetError, FloatingPointError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    for path in outputs:
        click.echo(path)


@click.group()
@click.version_option(__version__)
def main():
    """Transport-map training and reversible-jump sampling."""


@main.command()
@_common
def train(config_path, preset_name, seed, out, synthetic_data):
    """Fit transport maps by stochastic variational inference."""
    _dispatch(_run_train, config_path, preset_name, seed, out, synthetic_data)


@main.command()
@_common
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(),
              default=None, help="directory holding train outputs")
def sample(config_path, preset_name, seed, out, synthetic_data,
           checkpoint_dir):
    """Run reversible-jump chains and write per-chain traces."""
    _dispatch(_run_sample, config_path, preset_name, seed, out,
              synthetic_data, checkpoint_dir=checkpoint_dir)


@main.command()
@_common
@click.option("--traces", "traces_dir", type=click.Path(), default=None,
              help="directory holding sample outputs")
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(),
              default=None, help="directory holding train outputs "
                                 "(for --replicates)")
@click.option("--replicates", type=click.IntRange(0), default=0,
              help="also export N bridge-estimator replicates computed "
                   "on fresh evaluation sets")
@click.option("--eval-samples", type=click.IntRange(1), default=500,
              help="evaluation points per model per replicate")
def diagnose(config_path, preset_name, seed, out, synthetic_data, traces_dir,
             checkpoint_dir, replicates, eval_samples):
    """Running model probabilities and bridge-estimator tables."""
    _dispatch(_run_diagnose, config_path, preset_name, seed, out,
              synthetic_data, traces_dir=traces_dir,
              checkpoint_dir=checkpoint_dir, replicates=replicates,
              eval_samples=eval_samples)


@main.command()
@_common
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(),
              default=None)
@click.option("--samples", "n_samples", type=click.IntRange(2), default=10_000)
def evidence(config_path, preset_name, seed, out, synthetic_data,
             checkpoint_dir, n_samples):
    """Importance-sampling marginal likelihood per model."""
    _dispatch(_run_evidence, config_path, preset_name, seed, out,
              synthetic_data, checkpoint_dir=checkpoint_dir,
              n_samples=n_samples)


@main.command()
@_common
@click.option("--depths", default="4,8,12,16", help="comma-separated depths")
@click.option("--model-index", type=int, default=0)
def ablate(config_path, preset_name, seed, out, synthetic_data, depths,
           model_index):
    """Depth sweep: one training run per depth plus a combined table."""
    try:
        depth_list = tuple(int(tok) for tok in depths.split(","))
    except ValueError:
        click.echo(f"config error: --depths: cannot parse {depths!r}", err=True)
        sys.exit(EXIT_CONFIG)
    _dispatch(_run_ablate, config_path, preset_name, seed, out,
              synthetic_data, depths=depth_list, model_index=model_index)


if __name__ == "__main__":
    main()

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from transportrj.cli import main
from transportrj.config import ConfigError, RunConfig, preset


# -- config schema ------------------------------------------------------

def test_config_yaml_round_trip():
    cfg = preset("variable-selection")
    text = cfg.to_yaml()
    back = RunConfig.from_yaml(text)
    assert back == cfg
    assert RunConfig.from_yaml(back.to_yaml()) == back


def test_config_missing_target_names_field():
    with pytest.raises(ConfigError, match="target"):
        RunConfig.from_dict({"seed": 1})


def test_config_unknown_fields_are_named():
    with pytest.raises(ConfigError, match="flow.depht"):
        RunConfig.from_dict({"target": "sas", "flow": {"depht": 8}})
    with pytest.raises(ConfigError, match="chainz"):
        RunConfig.from_dict({"target": "sas", "chainz": {}})


def test_config_value_validation():
    with pytest.raises(ConfigError, match="kernel"):
        RunConfig.from_dict({"target": "sas", "chain": {"kernel": "warp"}})
    with pytest.raises(ConfigError, match="student_dof"):
        RunConfig.from_dict({"target": "sas",
                             "flow": {"reference": "student-t"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"target": "unknown-target"})


def test_presets_have_published_defaults():
    sas = preset("sas")
    assert sas.flow.depths == [8, 9]
    assert sas.trainer.minibatch == 256
    assert sas.trainer.learning_rate == pytest.approx(1e-4)
    assert sas.trainer.max_iterations == 10_000
    vs = preset("variable-selection")
    assert vs.flow.conditional and vs.chain.kernel == "ctp"
    assert vs.trainer.max_iterations == 40_000
    assert vs.target_params["mixture_weight"] == pytest.approx(0.9)
    fa = preset("factor-analysis")
    assert fa.flow.depth == 16


# -- commands -----------------------------------------------------------

def _toy_yaml(tmp_path, out, **overrides):
    lines = [
        "target: gaussian-toy",
        "flow: {depth: 2, hidden: 8}",
        "trainer: {max_iterations: 60, minibatch: 32}",
        "chain: {iterations: 80, chains: 2}",
        "seed: 3",
        f"out_dir: {out}",
    ]
    path = tmp_path / "toy.yaml"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_cli_reports_config_error_with_exit_code_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 4\n")
    result = CliRunner().invoke(main, ["train", "--config", str(bad)])
    assert result.exit_code == 2
    assert "target" in result.output


def test_cli_requires_config_or_preset():
    result = CliRunner().invoke(main, ["train"])
    assert result.exit_code == 2


def test_cli_data_error_exit_code_4(tmp_path):
    cfg = tmp_path / "fa.yaml"
    cfg.write_text(f"target: factor-analysis\nout_dir: {tmp_path / 'o'}\n")
    result = CliRunner().invoke(main, ["train", "--config", str(cfg)])
    assert result.exit_code == 4
    assert "data" in result.output


def test_train_sample_diagnose_evidence_pipeline(tmp_path):
    out = tmp_path / "run"
    cfg = _toy_yaml(tmp_path, out)
    runner = CliRunner()

    result = runner.invoke(main, ["train", "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    assert (out / "model0.ckpt").exists()
    assert (out / "manifest.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert "final_neg_elbo" in manifest and "config_hash" in manifest

    result = runner.invoke(main, ["sample", "--config", str(cfg),
                                  "--checkpoints", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "trace_0.csv").exists() and (out / "trace_1.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert "acceptance_summary" in manifest

    result = runner.invoke(main, ["diagnose", "--config", str(cfg),
                                  "--traces", str(out)])
    assert result.exit_code == 0, result.output
    bbe = (out / "bbe.csv").read_text().splitlines()
    assert bbe[0] == "model,probability"
    probs = [float(line.split(",")[1]) for line in bbe[1:]]
    assert sum(probs) == pytest.approx(1.0, abs=1e-9)

    result = runner.invoke(main, ["evidence", "--config", str(cfg),
                                  "--checkpoints", str(out),
                                  "--samples", "2000"])
    assert result.exit_code == 0, result.output
    rows = (out / "evidence.csv").read_text().splitlines()
    assert rows[0].startswith("model,estimate")
    for line in rows[1:]:
        assert float(line.split(",")[1]) == pytest.approx(1.0, abs=0.1)


def test_exact_map_sampling_without_checkpoints(tmp_path):
    out = tmp_path / "sas"
    cfg = tmp_path / "sas.yaml"
    cfg.write_text("\n".join([
        "target: sas",
        "flow: {kind: exact}",
        "chain: {iterations: 400, chains: 1, within_steps: 0}",
        "seed: 1",
        f"out_dir: {out}",
    ]) + "\n")
    result = CliRunner().invoke(main, ["sample", "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.json").read_text())
    for entry in manifest["acceptance_summary"].values():
        assert entry["mean_alpha"] == pytest.approx(1.0, abs=1e-10)


def test_zero_iteration_traces(tmp_path):
    out = tmp_path / "zero"
    cfg = tmp_path / "zero.yaml"
    cfg.write_text("\n".join([
        "target: sas",
        "flow: {kind: exact}",
        "chain: {iterations: 0, chains: 1}",
        f"out_dir: {out}",
    ]) + "\n")
    result = CliRunner().invoke(main, ["sample", "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    assert len((out / "trace_0.csv").read_text().splitlines()) == 2


def test_manifest_rerun_reproduces_outputs_bitwise(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    cfg = _toy_yaml(tmp_path, out1)
    runner = CliRunner()
    assert runner.invoke(main, ["train", "--config", str(cfg)]).exit_code == 0
    manifest_path = tmp_path / "manifest_copy.json"
    manifest_path.write_bytes((out1 / "manifest.json").read_bytes())
    assert runner.invoke(main, ["train", "--config", str(manifest_path),
                                "--out", str(out2)]).exit_code == 0
    for name in ("model0.ckpt", "model1.ckpt", "elbo_model0.csv",
                 "elbo_model1.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_ablate_writes_sweep_table(tmp_path):
    out = tmp_path / "ablate"
    cfg = _toy_yaml(tmp_path, out)
    result = CliRunner().invoke(main, [
        "ablate", "--config", str(cfg), "--depths", "2,3",
        "--model-index", "1"])
    assert result.exit_code == 0, result.output
    table = (out / "ablation.csv").read_text().splitlines()
    assert table[0] == "depth,iterations,final_neg_elbo"
    assert len(table) == 3
    assert (out / "ablate_model1_L2.ckpt").exists()
    assert (out / "ablate_model1_L3.ckpt").exists()


def test_diagnose_replicate_export_without_traces(tmp_path):
    out = tmp_path / "rep"
    cfg = tmp_path / "sas.yaml"
    cfg.write_text("\n".join([
        "target: sas",
        "flow: {kind: exact}",
        "seed: 1",
        f"out_dir: {out}",
    ]) + "\n")
    result = CliRunner().invoke(main, ["diagnose", "--config", str(cfg),
                                       "--replicates", "4",
                                       "--eval-samples", "100"])
    assert result.exit_code == 0, result.output
    rows = (out / "bbe_replicates.csv").read_text().splitlines()
    assert rows[0] == "replicate,model,probability"
    assert len(rows) == 1 + 4 * 2
    # exact transport maps make every replicate land on (1/4, 3/4)
    for line in rows[1:]:
        _, model, prob = line.split(",")
        expected = 0.25 if model == "0" else 0.75
        assert float(prob) == pytest.approx(expected, abs=1e-9)


def test_malformed_trace_file_is_data_error(tmp_path):
    out = tmp_path / "diag"
    src = tmp_path / "traces"
    src.mkdir()
    (src / "trace_0.csv").write_text("iter,wrong,header\n1,2,3\n")
    cfg = _toy_yaml(tmp_path, out)
    result = CliRunner().invoke(main, ["diagnose", "--config", str(cfg),
                                       "--traces", str(src)])
    assert result.exit_code == 4
    assert "malformed" in result.output or "trace" in result.output

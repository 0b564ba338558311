import json
import os

import pytest

from app import dependencies
from app.cli import main
from app.commands import run as run_command
from app.config import settings
from app.errors import EXIT_ALIGNMENT, EXIT_CONFIG, EXIT_OK
from app.models import DatasetRecord, PatchGrid
from app.repository.templates import read_prompts, write_prompts


@pytest.fixture
def model_args(toy_model_dir):
    return ["--weights", str(toy_model_dir / "model.safetensors"),
            "--vocab", str(toy_model_dir / "vocab.json"),
            "--merges", str(toy_model_dir / "merges.txt")]


@pytest.fixture
def toy_model(monkeypatch, toy_weights):
    monkeypatch.setattr(dependencies, "get_weights", lambda path: toy_weights)
    return toy_weights


@pytest.fixture
def pairs_file(tmp_path):
    records = [
        DatasetRecord(text=" Mary met John. She", corrupted_text=" Mike met John. He", family="FL"),
        DatasetRecord(text=" Ann met Tom. She", corrupted_text=" Bob met Tom. He", family="FL"),
    ]
    return write_prompts(str(tmp_path / "pairs.jsonl"), records)


def _load(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def test_dataset_command_is_reproducible(tmp_path):
    args = ["dataset", "--family", "FL", "--n", "4", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    name = "dataset_ECOA-PAYMENT-PLAN_n4_s7.jsonl"
    first = (tmp_path / "a" / name).read_bytes()
    assert first == (tmp_path / "b" / name).read_bytes()
    assert len(read_prompts(str(tmp_path / "a" / name))) == 4


def test_dataset_command_reports_capacity(tmp_path):
    code = main(["dataset", "--family", "TCPA", "--template", "MARKETING-CALL", "--n", "99",
                 "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_dataset_command_builds_aligned_pairs(tmp_path, monkeypatch, model_args, registry):
    monkeypatch.setattr(dependencies, "get_registry", lambda path=None: registry)
    code = main(["dataset", "--family", "FL", "--pairs", "--n", "5", "--seed", "1",
                 "--out", str(tmp_path), *model_args])
    assert code == EXIT_OK
    records = read_prompts(str(tmp_path / "dataset_GENDER-CREDIT-SCORE_n5_s1.jsonl"))
    assert len(records) == 5
    assert all(r.corrupted_text for r in records)


def test_bad_usage_exits_with_config_code():
    assert main([]) == EXIT_CONFIG
    assert main(["explain"]) == EXIT_CONFIG
    assert main(["run", "--family", "FL", "--answers", "Yes"]) == EXIT_CONFIG


def test_missing_weights_fail_validation(tmp_path, toy_model_dir):
    code = main(["run", "--family", "FL", "--weights", str(tmp_path / "absent.safetensors"),
                 "--vocab", str(toy_model_dir / "vocab.json"), "--merges", str(toy_model_dir / "merges.txt"),
                 "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_run_writes_logit_tables(tmp_path, model_args, toy_model, pairs_file):
    out = tmp_path / "run"
    assert main(["run", "--prompts", pairs_file, "--both-bos", "--out", str(out), *model_args]) == EXIT_OK
    table = _load(out / "logits.json")
    assert table["schema_version"] == settings.SCHEMA_VERSION
    assert len(table["records"]) == 2
    assert all(r["prepend_bos"] for r in table["records"])
    record = table["records"][0]
    assert record["prob_ratio"] == pytest.approx(record["p_yes"] / record["p_no"], rel=1e-5)
    assert not any(r["prepend_bos"] for r in _load(out / "logits_no_bos.json")["records"])
    assert (out / "logits.csv").read_text().startswith(f"# schema_version={settings.SCHEMA_VERSION}\n")


def test_empty_prompt_file_is_a_usage_error(tmp_path, model_args, toy_model):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["run", "--prompts", str(empty), "--out", str(tmp_path), *model_args]) == EXIT_CONFIG


def test_dla_writes_grids_and_charts(tmp_path, model_args, toy_model, pairs_file):
    out = tmp_path / "dla"
    assert main(["dla", "--prompts", pairs_file, "--out", str(out), *model_args]) == EXIT_OK
    for stem in ("accumulated_mean", "per_layer_mean", "per_head_mean", "prompt_00_per_head", "prompt_01_per_layer"):
        assert (out / f"{stem}.json").exists()
        assert (out / f"{stem}.csv").exists()
    per_layer = _load(out / "prompt_00_per_layer.json")
    accumulated = _load(out / "prompt_00_accumulated.json")
    assert sum(per_layer["values"]) == pytest.approx(accumulated["values"][-1], abs=1e-3)
    assert len(_load(out / "per_head_mean_matrix.json")["values"]) == 2
    assert (out / "per_head_mean.svg").read_text().startswith("<?xml")
    assert "final-post" in (out / "accumulated_mean.svg").read_text()
    assert any(name.startswith("attn_pattern_") for name in os.listdir(out))
    assert _load(out / "head_comparison_dla.json")["source"] == "dla"


def test_patch_resid_sweep(tmp_path, model_args, toy_model, pairs_file):
    out = tmp_path / "patch"
    assert main(["patch", "--prompts", pairs_file, "--out", str(out), *model_args]) == EXIT_OK
    grid = _load(out / "patch_resid_pre.json")
    assert grid["n_pairs"] == 2
    assert grid["axes"]["layer"] == ["0", "1"]
    assert grid["axes"]["position"][1] == "1: Mary"
    assert (out / "patch_resid_pre.svg").exists()


def test_patch_head_sweep_with_spec_file(tmp_path, model_args, toy_model, pairs_file):
    sweep = tmp_path / "heads.json"
    sweep.write_text('{"site": "head", "direction": "noise"}')
    out = tmp_path / "patch"
    code = main(["patch", "--prompts", pairs_file, "--sweep", str(sweep), "--workers", "2",
                 "--out", str(out), *model_args])
    assert code == EXIT_OK
    grid = _load(out / "patch_attn_z.json")
    assert grid["direction"] == "noise"
    assert len(grid["values"]) == 2 and len(grid["values"][0]) == 2
    assert _load(out / "head_comparison_patch.json")["source"] == "patch attn_z"


def test_patch_direction_flag_overrides_the_spec(tmp_path, model_args, toy_model, pairs_file):
    out = tmp_path / "patch"
    code = main(["patch", "--prompts", pairs_file, "--sweep", os.path.join(settings.DATA_DIR, "sweeps", "block_fl.json"),
                 "--direction", "noise", "--out", str(out), *model_args])
    assert code == EXIT_OK
    assert _load(out / "patch_block.json")["direction"] == "noise"


def test_patch_rejects_unaligned_pairs(tmp_path, model_args, toy_model):
    path = write_prompts(str(tmp_path / "bad.jsonl"), [
        DatasetRecord(text=" Mary met John. She", corrupted_text=" Zebra met John. He", family="FL")])
    code = main(["patch", "--prompts", path, "--out", str(tmp_path / "out"), *model_args])
    assert code == EXIT_ALIGNMENT
    assert not (tmp_path / "out" / "patch_resid_pre.json").exists()


def test_patch_needs_corrupted_prompts(tmp_path, model_args, toy_model):
    path = write_prompts(str(tmp_path / "single.jsonl"), [DatasetRecord(text=" Mary met John. She", family="FL")])
    assert main(["patch", "--prompts", path, "--out", str(tmp_path), *model_args]) == EXIT_CONFIG


def test_patch_path_sweep_with_spec_file(tmp_path, model_args, toy_model, pairs_file):
    sweep = tmp_path / "path.json"
    sweep.write_text('{"site": "path", "receivers": ["1.0", "1.1"], "receiver_site": "attn_v"}')
    out = tmp_path / "patch"
    code = main(["patch", "--prompts", pairs_file, "--sweep", str(sweep), "--out", str(out), *model_args])
    assert code == EXIT_OK
    grid = _load(out / "patch_path_attn_v.json")
    assert grid["axes"] == {"sender": ["0.0", "0.1"], "receiver": ["1.0", "1.1"]}
    assert grid["n_pairs"] == 2
    assert (out / "patch_path_attn_v.svg").exists()
    assert not (out / "head_comparison_patch.json").exists()


def test_patch_path_sweep_rejects_receivers_outside_the_model(tmp_path, model_args, toy_model, pairs_file):
    sweep = tmp_path / "path.json"
    sweep.write_text('{"site": "path", "receivers": ["12.0"]}')
    code = main(["patch", "--prompts", pairs_file, "--sweep", str(sweep), "--out", str(tmp_path), *model_args])
    assert code == EXIT_CONFIG
    sweep.write_text('{"site": "path"}')
    code = main(["patch", "--prompts", pairs_file, "--sweep", str(sweep), "--out", str(tmp_path), *model_args])
    assert code == EXIT_CONFIG


def test_patch_head_components_reports_value_dominance(tmp_path, model_args, toy_model, pairs_file):
    out = tmp_path / "patch"
    code = main(["patch", "--prompts", pairs_file, "--sweep",
                 os.path.join(settings.DATA_DIR, "sweeps", "head_components_fl.json"),
                 "--out", str(out), *model_args])
    assert code == EXIT_OK
    for site in ("attn_z", "attn_q", "attn_k", "attn_v", "attn_pattern"):
        assert (out / f"patch_{site}.json").exists()
    report = _load(out / "component_dominance.json")
    assert report["min_layer"] == 0
    assert sorted(h["head"] for h in report["heads"]) == ["0.0", "0.1", "1.0", "1.1"]
    assert report["violations"] == [h["head"] for h in report["heads"] if not h["value_dominates"]]
    assert report["holds"] == (report["violations"] == [])
    assert _load(out / "head_comparison_patch.json")["source"] == "patch attn_z"


def test_run_scores_the_corrupted_side_of_pairs(tmp_path, model_args, toy_model, pairs_file):
    out = tmp_path / "run"
    assert main(["run", "--prompts", pairs_file, "--out", str(out), *model_args]) == EXIT_OK
    clean = _load(out / "logits.json")["records"]
    corrupted = _load(out / "logits_corrupted.json")["records"]
    assert [r["prompt"] for r in corrupted] == [" Mike met John. He", " Bob met Tom. He"]
    for row in corrupted:
        assert row["rank_yes"] >= 1 and row["rank_no"] >= 1
        assert row["rank_yes"] != row["rank_no"]
        assert (row["rank_yes"] < row["rank_no"]) == (row["logit_yes"] > row["logit_no"])
    assert [r["logit_diff"] for r in clean] != [r["logit_diff"] for r in corrupted]
    assert (out / "logits_corrupted.csv").exists()


def test_run_without_pairs_writes_no_corrupted_table(tmp_path, model_args, toy_model):
    path = write_prompts(str(tmp_path / "single.jsonl"), [DatasetRecord(text=" Mary met John. She", family="FL")])
    out = tmp_path / "run"
    assert main(["run", "--prompts", path, "--out", str(out), *model_args]) == EXIT_OK
    assert not (out / "logits_corrupted.json").exists()


def test_identical_answers_exit_with_config_code(tmp_path, model_args, toy_model, pairs_file):
    code = main(["run", "--prompts", pairs_file, "--answers", "Yes,Yes", "--out", str(tmp_path), *model_args])
    assert code == EXIT_CONFIG


def test_invalid_result_models_exit_with_config_code(tmp_path, monkeypatch, model_args, toy_model, pairs_file):
    def broken(*args, **kwargs):
        return PatchGrid(name="broken", axes={"layer": ["0"], "head": ["0"]}, values=[[float("nan")]])

    monkeypatch.setattr(run_command, "build_logit_table", broken)
    assert main(["run", "--prompts", pairs_file, "--out", str(tmp_path), *model_args]) == EXIT_CONFIG

import io
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from polyfuse.cli import dispatch

from corpus import generate

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "src" / "polyfuse" / "schemas"


def check_schema(obj, name):
    schema = json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
    jsonschema.validate(obj, schema)


def run(argv, out=None):
    code = dispatch([str(a) for a in argv] + (["--out", str(out)] if out else []))
    return code


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """CSV -> jsonl -> planted embeddings -> one trained checkpoint."""
    root = tmp_path_factory.mktemp("cliwork")
    strings = generate(60, seed=17)
    stream_values = np.linspace(-40.0, 140.0, 60)
    csv_path = root / "data.csv"
    lines = ["id,psmiles,Tg,mu_O2"]
    for i, (s, v) in enumerate(zip(strings, stream_values)):
        mu = "" if i % 3 else f"{10 ** (i % 5 / 2.0):.6f}"
        lines.append(f"poly{i},{s},{v:.3f},{mu}")
    csv_path.write_text("\n".join(lines) + "\n")

    data = root / "data.jsonl"
    assert run(["ingest", csv_path], out=data) == 0

    llm, uni = root / "llm.plye", root / "uni.plye"
    tokens = root / "llm.plyt"
    assert run(["embed", "synth", "--data", data, "--modality", "text", "--dim", "12",
                "--plant", "--tokens-out", tokens, "--dest", llm, "--seed", "5"]) == 0
    assert run(["embed", "synth", "--data", data, "--modality", "structure", "--dim", "10",
                "--plant", "--dest", uni, "--seed", "6"]) == 0

    cfg = root / "config.json"
    cfg.write_text(json.dumps({
        "batch_size": 16, "hidden": 16, "rank": 4, "alpha": 8.0, "lr": 0.01,
        "weight_decay": 1e-5, "dropout": 0.1, "loss_kind": "mse",
        "max_epochs": 25, "patience_early": 10, "patience_lr": 5, "seed": 42,
    }))
    ckpt_dir = root / "ckpts"
    report = root / "run_report.json"
    assert run(["train", "--data", data, "--llm", llm, "--uni", uni,
                "--property", "Tg", "--config", cfg,
                "--checkpoint-dir", ckpt_dir], out=report) == 0
    return {
        "root": root, "csv": csv_path, "data": data, "llm": llm, "uni": uni,
        "tokens": tokens, "config": cfg, "report": report,
        "checkpoint": json.loads(report.read_text())["folds"][0]["checkpoint_path"],
    }


# ---------------------------------------------------------------------------
# String commands


def test_cap_stdin(monkeypatch, capsys):
    monkeypatch.setattr(sys, "stdin", io.StringIO("[*]CC([*])C\n"))
    assert dispatch(["cap"]) == 0
    assert capsys.readouterr().out.strip() == "CCC(C)C"


def test_tokenize_stdin(monkeypatch, capsys):
    monkeypatch.setattr(sys, "stdin", io.StringIO("[*]CC([*])Cl\n"))
    assert dispatch(["tokenize"]) == 0
    assert capsys.readouterr().out.strip() == "[*]\tC\tC\t(\t[*]\t)\tCl"


# ---------------------------------------------------------------------------
# Exit codes


def test_unknown_subcommand_is_usage_error(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_train_missing_embedding_file_is_data_error(workdir, capsys):
    code = dispatch(["train", "--data", str(workdir["data"]),
                     "--llm", "/nonexistent/llm.plye", "--uni", str(workdir["uni"]),
                     "--property", "Tg"])
    assert code == 2
    assert "/nonexistent/llm.plye" in capsys.readouterr().err


def test_corrupt_embedding_file_is_data_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.plye"
    bad.write_bytes(b"XXXX" + bytes(30))
    assert dispatch(["embed", "validate", str(bad)]) == 2
    assert "magic" in capsys.readouterr().err


def test_invalid_psmiles_on_stdin_is_data_error(monkeypatch, capsys):
    monkeypatch.setattr(sys, "stdin", io.StringIO("CCO\n"))
    assert dispatch(["cap"]) == 2


def test_numerical_failure_exit_code(workdir, tmp_path, capsys):
    # Constant targets make R^2 undefined during evaluation.
    data = tmp_path / "const.jsonl"
    lines = [json.dumps({"id": f"poly{i}", "psmiles": "[*]CC([*])C", "values": {"Tg": 5.0}})
             for i in range(12)]
    # unique psmiles ids not needed; ids are explicit and unique
    data.write_text("\n".join(lines))
    code = dispatch(["evaluate", "--checkpoint", str(workdir["checkpoint"]),
                     "--data", str(data), "--llm", str(workdir["llm"]),
                     "--uni", str(workdir["uni"])])
    assert code in (2, 3)  # missing embeddings for these ids -> 2 happens first


# ---------------------------------------------------------------------------
# Structured outputs validate against shipped schemas


def test_ingest_output_schema(workdir):
    for line in workdir["data"].read_text().splitlines():
        check_schema(json.loads(line), "dataset_record")


def test_split_output_schema(workdir, tmp_path):
    out = tmp_path / "plan.json"
    assert run(["split", "--data", workdir["data"], "--property", "Tg", "--seed", 3], out=out) == 0
    plan = json.loads(out.read_text())
    check_schema(plan, "split_plan")
    assert len(plan["test_ids"]) == round(0.15 * 60)


def test_embed_info_and_validate_schemas(workdir, tmp_path):
    out = tmp_path / "info.json"
    assert run(["embed", "info", workdir["llm"]], out=out) == 0
    info = json.loads(out.read_text())
    check_schema(info, "embed_info")
    assert info["dim"] == 12 and info["kind"] == "pooled" and info["modality"] == "text_llm"

    assert run(["embed", "validate", workdir["llm"]], out=out) == 0
    check_schema(json.loads(out.read_text()), "embed_validate")

    assert run(["embed", "info", workdir["tokens"]], out=out) == 0
    tok_info = json.loads(out.read_text())
    check_schema(tok_info, "embed_info")
    assert tok_info["kind"] == "tokens"


def test_train_report_schema(workdir):
    report = json.loads(workdir["report"].read_text())
    check_schema(report, "run_report")
    assert report["property"] == "Tg"
    assert len(report["folds"]) == 5
    assert Path(report["folds"][0]["checkpoint_path"]).exists()


def test_evaluate_schema(workdir, tmp_path):
    out = tmp_path / "metrics.json"
    assert run(["evaluate", "--checkpoint", workdir["checkpoint"], "--data", workdir["data"],
                "--llm", workdir["llm"], "--uni", workdir["uni"]], out=out) == 0
    check_schema(json.loads(out.read_text()), "eval_metrics")


def test_predict_schema_and_csv(workdir, tmp_path):
    out = tmp_path / "pred.jsonl"
    assert run(["predict", "--checkpoint", workdir["checkpoint"], "--data", workdir["data"],
                "--llm", workdir["llm"], "--uni", workdir["uni"]], out=out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 60
    for line in lines:
        check_schema(json.loads(line), "prediction")

    csv_out = tmp_path / "pred.csv"
    assert run(["predict", "--checkpoint", workdir["checkpoint"], "--data", workdir["data"],
                "--llm", workdir["llm"], "--uni", workdir["uni"], "--format", "csv"],
               out=csv_out) == 0
    assert csv_out.read_text().splitlines()[0] == "id,property,prediction,prediction_original"


def test_baseline_ridge_schema(workdir, tmp_path):
    out = tmp_path / "ridge.json"
    assert run(["baseline", "ridge", "--data", workdir["data"], "--llm", workdir["llm"],
                "--uni", workdir["uni"], "--property", "Tg"], out=out) == 0
    check_schema(json.loads(out.read_text()), "ridge_report")


def test_attribute_schema(workdir, tmp_path):
    out = tmp_path / "attr.json"
    assert run(["attribute", "--checkpoint", workdir["checkpoint"],
                "--tokens-file", workdir["tokens"], "--uni", workdir["uni"],
                "--steps", 16, "--ids", "poly0,poly1"], out=out) == 0
    items = json.loads(out.read_text())
    check_schema(items, "attribution")
    assert [it["polymer_id"] for it in items] == ["poly0", "poly1"]
    for it in items:
        assert it["normalized_scores"] is not None
        star = it["tokens"].index("[*]")
        assert it["normalized_scores"][star] == pytest.approx(1.0)


def test_similarity_schema_and_csv(workdir, tmp_path):
    out = tmp_path / "sim.json"
    assert run(["similarity", "--tokens-file", workdir["tokens"], "--id", "poly0",
                "--threshold", 0.5], out=out) == 0
    sim = json.loads(out.read_text())
    check_schema(sim, "similarity")
    assert all(e["value"] >= 0.5 for e in sim["edges"])

    csv_out = tmp_path / "sim.csv"
    assert run(["similarity", "--tokens-file", workdir["tokens"], "--id", "poly0",
                "--format", "csv"], out=csv_out) == 0
    assert csv_out.read_text().splitlines()[0] == "i,j,token_i,token_j,value"


def test_pca_schema(workdir, tmp_path):
    out = tmp_path / "pca.json"
    assert run(["pca", "--embeddings", workdir["llm"], "--k", 3], out=out) == 0
    obj = json.loads(out.read_text())
    check_schema(obj, "pca")
    assert len(obj["coords"]) == 60 and len(obj["coords"][0]) == 3
    assert len(obj["explained_variance_ratio"]) == 3


def test_pca_k_too_large_is_data_error(workdir):
    assert dispatch(["pca", "--embeddings", str(workdir["llm"]), "--k", "9999"]) == 2


def test_report_merges_by_property(workdir, tmp_path):
    # Synthesize a second report for another property by relabeling.
    second = json.loads(workdir["report"].read_text())
    second["property"] = "Egc"
    second_path = tmp_path / "second.json"
    second_path.write_text(json.dumps(second))

    out = tmp_path / "merged.json"
    assert run(["report", workdir["report"], second_path], out=out) == 0
    rows = json.loads(out.read_text())
    check_schema(rows, "report")
    # Oracle: concatenate + sort by property.
    first = json.loads(workdir["report"].read_text())
    expected_order = sorted([first["property"], "Egc"])
    assert [r["property"] for r in rows] == expected_order
    by_prop = {r["property"]: r for r in rows}
    assert by_prop["Tg"]["r2_mean"] == first["r2_mean"]
    assert by_prop["Egc"]["r2_mean"] == second["r2_mean"]

    csv_out = tmp_path / "merged.csv"
    assert run(["report", workdir["report"], second_path, "--format", "csv"], out=csv_out) == 0
    lines = csv_out.read_text().splitlines()
    assert lines[0].startswith("property,r2_mean")
    assert len(lines) == 3


def test_train_csv_format(workdir, tmp_path):
    out = tmp_path / "report.csv"
    assert run(["train", "--data", workdir["data"], "--llm", workdir["llm"],
                "--uni", workdir["uni"], "--property", "Tg",
                "--config", workdir["config"], "--format", "csv"], out=out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ("property,r2_mean,r2_std,mae_mean,mae_std,"
                        "mae_original_mean,mae_original_std,n_folds")
    assert lines[1].startswith("Tg,")


def test_identical_invocations_byte_identical(workdir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run(["split", "--data", workdir["data"], "--seed", 11], out=out) == 0
    assert a.read_bytes() == b.read_bytes()

import json

import numpy as np
import pytest

from uabackprop.attribution import load_map
from uabackprop.cli import main
from uabackprop.data import load_dataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Two-class synthetic pipeline inputs: train set, corrupted set, 3-member ensemble."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "train.npz"), "--n", "200", "--classes", "2", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "corrupt.npz"), "--n", "60", "--classes", "2",
                 "--occluder", "2", "--seed", "2", "--split", "corrupted"]) == 0
    assert main(["train", "--dataset", str(root / "train.npz"), "--out", str(root / "ens.uabp"),
                 "--members", "3", "--epochs", "4"]) == 0
    return root


def test_gen_data_writes_dataset_and_config(workspace):
    ds = load_dataset(workspace / "corrupt.npz")
    assert len(ds) == 60 and ds.boxes is not None and ds.split == "corrupted"
    assert "occluder = 2" in (workspace / "corrupt.npz.ini").read_text()


def test_attribute_writes_maps_and_heatmaps(workspace, capsys):
    out = workspace / "maps"
    code, stdout, _ = run(capsys, "attribute", "--model", workspace / "ens.uabp", "--dataset",
                          workspace / "corrupt.npz", "--limit", "2", "--kind", "total", "--out", out)
    assert code == 0 and json.loads(stdout)["maps"] == 2
    amap, meta = load_map(out / "00001_ua_total.uamap")
    assert meta["kind"] == "total" and amap.shape == (16, 16)
    assert abs(amap.values.sum() - meta["uncertainty"]) < 1e-5 * max(meta["uncertainty"], 1e-6)
    assert (out / "00001_ua_total.pgm").read_bytes().startswith(b"P5\n16 16\n")


def test_single_member_epistemic_warns_and_emits_zero_map(workspace, capsys):
    model = workspace / "single.uabp"
    assert main(["train", "--dataset", str(workspace / "train.npz"), "--out", str(model), "--members", "1",
                 "--epochs", "1"]) == 0
    code, _, err = run(capsys, "attribute", "--model", model, "--dataset", workspace / "corrupt.npz",
                       "--limit", "1", "--out", workspace / "single_maps")
    assert code == 0 and err.startswith("warning:")
    amap, _ = load_map(workspace / "single_maps" / "00000_ua_epistemic.uamap")
    assert np.all(amap.values == 0)


def test_blur_test_csv_summary_and_rerun_from_config(workspace, capsys):
    out = workspace / "blur"
    code, stdout, _ = run(capsys, "blur-test", "--model", workspace / "ens.uabp", "--dataset",
                          workspace / "corrupt.npz", "--count", "6", "--budget-pct", "5", "--out", out)
    assert code == 0
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == "id,method,kind,MURR,AUC-URR,sigma,IoU,hit"
    assert len(lines) == 7
    summary = json.loads((out / "summary.json").read_text())
    assert summary["budget_pixels"] == 13 and summary == json.loads(stdout)
    again = workspace / "blur_again"
    assert main(["blur-test", "--config", str(out / "config.ini"), "--out", str(again)]) == 0
    assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()


def test_flags_override_config_values(workspace, capsys):
    base = workspace / "blur_base"
    assert main(["blur-test", "--model", str(workspace / "ens.uabp"), "--dataset", str(workspace / "corrupt.npz"),
                 "--count", "3", "--out", str(base)]) == 0
    over = workspace / "blur_over"
    code, stdout, _ = run(capsys, "blur-test", "--config", base / "config.ini", "--method", "random",
                          "--count", "2", "--out", over)
    assert code == 0
    rows = (over / "results.csv").read_text().splitlines()[1:]
    assert len(rows) == 2 and all(",random," in r for r in rows)
    assert "method = random" in (over / "config.ini").read_text()


def test_parallel_jobs_do_not_change_results(workspace):
    outs = []
    for jobs in ("1", "3"):
        out = workspace / f"anom_jobs{jobs}"
        assert main(["anomaly-test", "--model", str(workspace / "ens.uabp"), "--dataset",
                     str(workspace / "corrupt.npz"), "--count", "6", "--jobs", jobs, "--out", str(out)]) == 0
        outs.append((out / "results.csv").read_bytes())
    assert outs[0] == outs[1]
    summary = json.loads((workspace / "anom_jobs1" / "summary.json").read_text())
    assert summary["images"] == 6 and 0.0 <= summary["ADA"] <= 1.0


def test_mitigate_writes_model_and_metrics(workspace, capsys):
    out = workspace / "mit"
    code, stdout, _ = run(capsys, "mitigate", "--model", workspace / "ens.uabp", "--dataset", workspace / "train.npz",
                          "--test-dataset", workspace / "corrupt.npz", "--train-limit", "40", "--epochs", "2",
                          "--out", out)
    assert code == 0
    summary = json.loads(stdout)
    assert summary["before"]["alpha"] == 0.0 and summary["after"]["alpha"] == 0.2
    assert (out / "mitigated.uabp").exists()
    assert (out / "metrics.csv").read_text().startswith("setting,alpha,accuracy,nll\nno-attention,0.0,")


def test_report_aggregates_and_handles_empty(workspace, capsys):
    code, stdout, _ = run(capsys, "report", workspace / "blur" / "results.csv", workspace / "anom_jobs1" / "results.csv")
    assert code == 0
    assert "| blur | ua | epistemic | 6 |" in stdout
    assert "| anomaly | ua | epistemic | 6 |" in stdout
    empty = workspace / "empty.csv"
    empty.write_text("")
    code, stdout, _ = run(capsys, "report", empty)
    assert code == 0 and stdout.count("\n") == 2


@pytest.mark.parametrize("argv,code_tag,status", [
    (["blur-test", "--out", "x", "--method", "bogus"], "E_USAGE", 2),
    (["frobnicate"], "E_USAGE", 2),
    (["blur-test", "--out", "x"], "E_USAGE", 2),
    (["report", "/nonexistent/file.csv"], "E_IO", 1),
])
def test_errors_are_single_line_with_code(capsys, tmp_path, argv, code_tag, status):
    code, _, err = run(capsys, *argv)
    assert code == status
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error: {code_tag}: ")


def test_bad_model_file_and_config(workspace, tmp_path, capsys):
    bogus = tmp_path / "bogus.uabp"
    bogus.write_bytes(b"not a model")
    code, _, err = run(capsys, "blur-test", "--model", bogus, "--dataset", workspace / "corrupt.npz", "--out", tmp_path / "o")
    assert code == 1 and err.startswith("error: E_FORMAT:")
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[eval]\ncount = many\n")
    code, _, err = run(capsys, "blur-test", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and err.startswith("error: E_CONFIG:")
    code, _, err = run(capsys, "blur-test", "--model", workspace / "ens.uabp", "--dataset", workspace / "corrupt.npz",
                       "--budget-pct", "0", "--out", tmp_path / "o")
    assert code == 1 and err.startswith("error: E_VALUE:")

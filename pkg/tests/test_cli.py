import csv
import json
import subprocess
import sys

import pytest

from consor.annotations import load_annotations
from consor.cli import main


def _tree(root):
    return {
        str(path.relative_to(root)): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file() and path.name != "run_manifest.json"
    }


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy", "--images", "12", "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--config", str(toy_dir / "toy.json"), "--epochs", "2", "--out", str(out)])
    assert code == 0
    return out


def test_module_entry_point_generates_toy_data(tmp_path):
    cmd = [sys.executable, "-m", "consor.cli", "gen-toy", "--images", "3", "--out", str(tmp_path / "toy")]
    result = subprocess.run(cmd, check=False, capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert "[consor] Generating 3 toy images (3 classes, seed 0)" in result.stdout
    assert (tmp_path / "toy" / "annotations.json").is_file()
    assert (tmp_path / "toy" / "run_manifest.json").is_file()


def test_gen_toy_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-toy", "--images", "4", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    config = json.loads((tmp_path / "a" / "toy.json").read_text(encoding="utf-8"))
    assert config["paths"]["annotations"] == "annotations.json"
    assert config["train"]["logit_scale"] == 20.0


def test_gen_toy_with_builtin_taxonomy(tmp_path):
    assert main(["gen-toy", "--images", "2", "--taxonomy", "pisc-coarse", "--out", str(tmp_path)]) == 0
    annotations = json.loads((tmp_path / "annotations.json").read_text(encoding="utf-8"))
    assert annotations["taxonomy"] == "pisc-coarse"


def test_train_writes_losses_checkpoint_and_manifest(trained):
    with (trained / "losses.tsv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle, delimiter="\t"))
    assert len(rows) == 2 * 9
    assert {row["epoch"] for row in rows} == {"0", "1"}
    assert (trained / "checkpoint.fpk").is_file()

    manifest = json.loads((trained / "run_manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "train"
    assert manifest["config"]["train"]["epochs"] == 2
    assert len(manifest["config_digest"]) == 64
    assert set(manifest["versions"]) >= {"consor", "python", "numpy", "torch"}

    events = [json.loads(line) for line in (trained / "events.jsonl").read_text(encoding="utf-8").splitlines()]
    assert events[0] == {"event": "command.start", "command": "train"}
    assert sum(1 for e in events if e["event"] == "train.step") == 18
    assert events[-1]["event"] == "command.done"


def test_eval_from_checkpoint(toy_dir, trained, tmp_path, capsys):
    args = ["eval", "--config", str(toy_dir / "toy.json"), "--checkpoint", str(trained / "checkpoint.fpk")]
    assert main([*args, "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["mode"] == "standard"
    assert metrics["n_samples"] == 12 * 6
    assert metrics["classes"] == ["relation-0", "relation-1", "relation-2"]
    with (tmp_path / "scores.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 72
    assert rows[0]["sample_id"] == "toy-0000:0-1"
    assert "[consor] mode=standard" in capsys.readouterr().out


def test_zeroshot_eval_needs_no_checkpoint(toy_dir, tmp_path):
    assert main(["eval", "--config", str(toy_dir / "toy.json"), "--mode", "zeroshot", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["classifier"] == "zeroshot"
    assert metrics["n_samples"] == 72
    assert 0.0 <= metrics["acc1"] <= 1.0


def test_resume_runs_only_remaining_epochs(toy_dir, trained, tmp_path):
    args = ["train", "--config", str(toy_dir / "toy.json"), "--epochs", "3", "--resume", str(trained / "checkpoint.fpk")]
    assert main([*args, "--out", str(tmp_path)]) == 0
    with (tmp_path / "losses.tsv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle, delimiter="\t"))
    assert {row["epoch"] for row in rows} == {"2"}
    assert rows[0]["step"] == "18"


def test_resume_with_other_architecture_is_refused(toy_dir, trained, tmp_path, capsys):
    args = ["train", "--config", str(toy_dir / "toy.json"), "--sharing", "dual", "--resume", str(trained / "checkpoint.fpk")]
    assert main([*args, "--out", str(tmp_path)]) == 2
    assert "different model architecture" in capsys.readouterr().err


def test_grad_check_command(toy_dir, tmp_path):
    args = ["grad-check", "--config", str(toy_dir / "toy.json"), "--coords", "40", "--pairs", "4"]
    assert main([*args, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text(encoding="utf-8"))
    assert report["passed"] is True
    assert report["n_coords"] == 40


def test_export_attention(toy_dir, trained, tmp_path):
    args = [
        "export-attn", "--config", str(toy_dir / "toy.json"), "--checkpoint", str(trained / "checkpoint.fpk"),
        "--image", "toy-0001", "--pair", "2,0",
    ]
    assert main([*args, "--out", str(tmp_path)]) == 0
    maps = json.loads((tmp_path / "attention" / "toy-0001_2-0.json").read_text(encoding="utf-8"))
    assert maps["pair"] == [2, 0]
    assert len(maps["layers"][0]) == 8
    assert len(maps["layers"][0][0][0]) == 9


def test_vocab_and_prompt_files(toy_dir, tmp_path):
    config = str(toy_dir / "toy.json")
    assert main(["select-vocabs", "--config", config, "--image", "toy-0002", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "vocabs" / "toy-0002.json").read_text(encoding="utf-8"))
    assert report["image_id"] == "toy-0002"

    assert main(["build-prompts", "--config", config, "--out", str(tmp_path)]) == 0
    prompts = sorted((tmp_path / "prompts").glob("*.txt"))
    assert len(prompts) == 12
    lines = prompts[0].read_text(encoding="utf-8").splitlines()
    assert [line.split("\t")[0] for line in lines] == ["relation-0", "relation-1", "relation-2"]


def test_build_fixtures_with_synthetic_provider(toy_dir, tmp_path):
    args = ["build-fixtures", "--config", str(toy_dir / "toy.json"), "--provider", "synthetic"]
    assert main([*args, "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "fixtures").rglob("*.fpk"))) > 12


def test_report_command(toy_dir, tmp_path, capsys):
    config = str(toy_dir / "toy.json")
    for name in ("zs-a", "zs-b"):
        assert main(["eval", "--config", config, "--mode", "zeroshot", "--out", str(tmp_path / name)]) == 0
    metrics = [str(tmp_path / name / "metrics.json") for name in ("zs-a", "zs-b")]
    assert main(["report", *metrics, "--out", str(tmp_path / "report")]) == 0
    lines = (tmp_path / "report" / "report.tsv").read_text(encoding="utf-8").splitlines()
    assert [line.split("\t")[0] for line in lines[1:]] == ["zs-a", "zs-b"]
    assert "[consor] Summary:" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--annotations", "does-not-exist.json"],
        ["train", "--ablate", "everything"],
        ["eval", "--provider", "synthetic"],
        ["train", "--fusion-layers", "5"],
    ],
)
def test_configuration_problems_exit_2(argv, tmp_path, toy_dir, capsys):
    if "--annotations" not in argv:
        argv = [*argv, "--config", str(toy_dir / "toy.json")]
    assert main([*argv, "--out", str(tmp_path)]) == 2
    assert "consor: error[" in capsys.readouterr().err


def test_runtime_failures_exit_1(toy_dir, tmp_path, capsys):
    broken = tmp_path / "broken.fpk"
    broken.write_bytes(b"not a pack")
    args = ["eval", "--config", str(toy_dir / "toy.json"), "--checkpoint", str(broken)]
    assert main([*args, "--out", str(tmp_path / "out")]) == 1
    assert "error[pack-corrupt]" in capsys.readouterr().err


def test_missing_fixtures_exit_1(toy_dir, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    args = ["eval", "--config", str(toy_dir / "toy.json"), "--fixtures", str(empty), "--mode", "zeroshot"]
    assert main([*args, "--out", str(tmp_path / "out")]) == 1
    assert "error[missing-fixture]" in capsys.readouterr().err


def test_gen_toy_labels_per_pair(tmp_path):
    assert main(["gen-toy", "--images", "6", "--labels", "pair", "--out", str(tmp_path)]) == 0
    dataset = load_annotations(tmp_path / "annotations.json")
    assert any(len({s.label for s in samples}) > 1 for samples in dataset.samples_by_image().values())

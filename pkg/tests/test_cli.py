import json
import subprocess
import sys

import pytest

from ftlab import train as train_mod
from ftlab.cli import dispatch, split_extra, UsageError
from ftlab.data import load_dataset
from ftlab.errors import TrainingError
from ftlab.model import load_checkpoint


@pytest.fixture
def quick(tiny_preset):
    """Overrides that make any verb finish in about a second."""
    return [
        "--set", "data.sizes=[40, 10, 10]",
        "--set", "epochs=1",
        "--set", "batch_size=8",
        "--set", f"model_config_name={tiny_preset}",
        "--set", "n_values=[2, 4]",
        "--set", "trials_per_n=2",
    ]


def run(argv, capsys):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_selftest(capsys):
    code, out, _ = run(["selftest"], capsys)
    assert code == 0
    assert out.count("PASS") == 6 and "FAIL" not in out


def test_lora_rank_too_large(tmp_path, capsys):
    code, _, err = run(["train", "--strategy", "lora", "--lora.r", "128", "--out", tmp_path], capsys)
    assert code == 2
    assert "lora.r=128" in err and "r < min(m, n)" in err


def test_unknown_key(tmp_path, capsys):
    code, _, err = run(["sweep", "--set", "epoch=3", "--out", tmp_path], capsys)
    assert code == 2
    assert "'epoch'" in err and "train.epochs" in err


def test_unknown_flag_style_key(tmp_path, capsys):
    code, _, err = run(["sweep", "--trainn.epochs", "3", "--out", tmp_path], capsys)
    assert code == 2 and "trainn.epochs" in err


def test_distill_without_teacher(tmp_path, capsys, quick):
    code, _, err = run(["distill", *quick, "--out", tmp_path], capsys)
    assert code == 2 and "teacher_checkpoint" in err


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(["sweep", "--config", tmp_path / "nope.json"], capsys)
    assert code == 2 and "nope.json" in err


def test_bad_jobs(tmp_path, capsys, quick):
    code, _, err = run(["sweep", *quick, "--jobs", "0", "--out", tmp_path], capsys)
    assert code == 2 and "--jobs" in err


def test_report_needs_inputs(tmp_path, capsys):
    code, _, err = run(["report", "--out", tmp_path], capsys)
    assert code == 2


def test_trial_failure_exit_code(tmp_path, capsys, quick, monkeypatch):
    real = train_mod.run_training

    def flaky(model, strategy, episode, data, cfg, **kwargs):
        if kwargs.get("n_per_class") == 4:
            raise TrainingError("injected", 1, 0)
        return real(model, strategy, episode, data, cfg, **kwargs)

    monkeypatch.setattr(train_mod, "run_training", flaky)
    code, out, _ = run(["sweep", *quick, "--out", tmp_path], capsys)
    assert code == 1
    assert out.count("FAILED: injected") == 2
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["failed_trials"] == 2 and manifest["trials"] == 4


def test_gen_data(tmp_path, capsys, quick):
    code, out, _ = run(["gen-data", *quick, "--out", tmp_path], capsys)
    assert code == 0
    ds = load_dataset(tmp_path / "data")
    assert (len(ds.train), len(ds.eval_in), len(ds.eval_ood)) == (40, 10, 10)


def test_sweep_outputs_and_manifest(tmp_path, capsys, quick):
    code, out, _ = run(["sweep", *quick, "--out", tmp_path], capsys)
    assert code == 0
    assert "[4/4]" in out
    for name in ("config.json", "manifest.json", "trials.csv", "trials.jsonl", "results.json", "aggregate.csv", "tables.md"):
        assert (tmp_path / name).exists(), name
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {"config", "master_seed", "trial_seeds", "git_describe", "wall_time_s", "argv", "versions"} <= set(manifest)
    assert len(manifest["trial_seeds"]) == 4
    assert manifest["config"]["train"]["epochs"] == 1
    assert len((tmp_path / "trials.csv").read_text().splitlines()) == 5


def test_sweep_few_shot_restricts_n(tmp_path, capsys, quick):
    code, out, _ = run(["sweep", *quick, "--few-shot", "2", "--out", tmp_path], capsys)
    assert code == 0 and "[2/2]" in out


def test_lora_ranks_expand(tmp_path, capsys, quick):
    argv = ["sweep", *quick, "--strategy", "lora", "--set", "lora_ranks=[1, 2]", "--few-shot", "2", "--out", tmp_path]
    code, out, _ = run(argv, capsys)
    assert code == 0
    strategies = {line.split(",")[0] for line in (tmp_path / "trials.csv").read_text().splitlines()[1:]}
    assert strategies == {"lora_r1", "lora_r2"}


def test_train_checkpoint_then_distill(tmp_path, capsys, quick):
    ckpt = tmp_path / "teacher.ftlb"
    code, _, _ = run(["train", *quick, "--strategy", "pbft", "--save-checkpoint", ckpt, "--out", tmp_path / "t"], capsys)
    assert code == 0
    assert load_checkpoint(ckpt).cfg.name == "tiny"
    code, out, _ = run(["distill", *quick, "--teacher", ckpt, "--few-shot", "2", "--out", tmp_path / "d"], capsys)
    assert code == 0 and "few_shot_distill" in out
    code, out, _ = run(["distill", *quick, "--teacher", ckpt, "--out", tmp_path / "c"], capsys)
    assert code == 0 and "context_distill" in out and "n=full" in out


def test_patterned_self_distill(tmp_path, capsys, quick):
    code, _, _ = run(["distill", *quick, "--set", "distill.teacher=patterned_self", "--few-shot", "2", "--out", tmp_path], capsys)
    assert code == 0


def test_report(tmp_path, capsys, quick):
    for kind in ("vanilla", "pbft", "adaptive"):
        assert run(["sweep", *quick, "--strategy", kind, "--out", tmp_path / kind], capsys)[0] == 0
    dirs = [tmp_path / k for k in ("vanilla", "pbft", "adaptive")]
    code, out, _ = run(["report", *dirs, "--few-shot", "2", "--format", "json", "--out", tmp_path / "r"], capsys)
    assert code == 0
    assert "### OOD accuracy comparison b/w Vanilla and PBFT (N=2)" in out
    assert "### OOD delta b/w adaptive and base FT (N=2, model=tiny)" in out
    doc = json.loads((tmp_path / "r" / "report.json").read_text())
    assert len(doc["cells"]) == 6 and len(doc["trials"]) == 12
    assert doc["tables"][0]["reference"] == "adaptive"


def test_trials_csv_byte_identical(tmp_path, capsys, quick):
    for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
        assert run(["sweep", *quick, "--jobs", jobs, "--out", tmp_path / name], capsys)[0] == 0
    a = (tmp_path / "a" / "trials.csv").read_bytes()
    assert a == (tmp_path / "b" / "trials.csv").read_bytes() == (tmp_path / "c" / "trials.csv").read_bytes()


def test_split_extra():
    assert split_extra(["--lora.r", "4", "--epochs=2"]) == ["lora.r=4", "epochs=2"]
    with pytest.raises(UsageError):
        split_extra(["--lora.r"])
    with pytest.raises(UsageError):
        split_extra(["stray"])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ftlab", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr

import csv
import json

import numpy as np
import pytest

from spirl.cli import _apply_regime, _config, build_parser
from spirl.dataset import read_frames_raw
from spirl.images import SELECTED_COLOR, read_ppm

from golden_cases import CLI_GOLDEN, TINY_RUN, run_cli, tiny_pipeline
from helpers import golden_bytes


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    stdout = tiny_pipeline(root)
    return root, stdout


def test_collect(tiny, tmp_path):
    root, _ = tiny
    assert read_frames_raw(root / "frames.spfr").shape == (64, 48, 48, 3)
    code, _ = run_cli("collect", "--config", root / "tiny.json", "--frames", 64, "--seed", 3, "--out", tmp_path / "again.spfr")
    assert code == 0
    assert (tmp_path / "again.spfr").read_bytes() == (root / "frames.spfr").read_bytes()
    assert (tmp_path / "resolved_config.json").exists()


def test_collect_missing_directory(tmp_path, capsys):
    code, _ = run_cli("collect", "--frames", 4, "--out", tmp_path / "nope" / "f.spfr")
    assert code == 3
    assert "does not exist" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("collect", "--out", tmp_path / "f.spfr")
    assert exc.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"agent": {"epsilon": 1}}))
    assert run_cli("collect", "--config", bad, "--frames", 2, "--out", tmp_path / "f.spfr")[0] == 2


def test_pretrain_outputs(tiny):
    root, stdout = tiny
    rows = (root / "mae" / "loss.csv").read_text().splitlines()
    assert len(rows) == 1 + TINY_RUN["schedule"]["epochs"]
    manifest = json.loads((root / "mae" / "epoch_003.json").read_text())
    assert f"trainable scalars: {manifest['parameter_counts']['total']}" in stdout["pretrain"]
    assert (root / "mae" / "resolved_config.json").exists()


def test_pretrain_resume_cli(tiny, tmp_path):
    root, _ = tiny
    args = ("pretrain", "--config", root / "tiny.json", "--data", root / "frames.spfr", "--out", tmp_path)
    assert run_cli(*args, "--epochs", 1)[0] == 0
    assert run_cli(*args, "--resume")[0] == 0
    assert (tmp_path / "epoch_003.spnt").read_bytes() == (root / "mae" / "epoch_003.spnt").read_bytes()


def test_full_parameter_count_reported(tmp_path):
    frames = tmp_path / "f.spfr"
    assert run_cli("collect", "--preset", "full", "--frames", 1, "--out", frames)[0] == 0
    code, text = run_cli("pretrain", "--preset", "full", "--data", frames, "--out", tmp_path / "m", "--epochs", 1)
    assert code == 0 and "trainable scalars: 790784" in text
    assert json.loads((tmp_path / "m" / "epoch_001.json").read_text())["parameter_counts"]["total"] == 790784


def test_saliency_outputs(tiny):
    root, stdout = tiny
    out = root / "saliency"
    k = int(stdout["saliency"].split("K_t=")[1].split()[0])
    overlay = read_ppm(out / "selection.ppm")
    raw = read_frames_raw(root / "frames.spfr")[5]
    corners = sum(np.all(overlay[i * 8, j * 8] == SELECTED_COLOR) for i in range(6) for j in range(6))
    assert corners == k
    assert np.array_equal(overlay[3::8, 3::8], raw[3::8, 3::8])
    probes = {(out / f"probe_{m}.ppm").read_bytes() for m in ("pe_plus_mask", "pe_only", "mask_only")}
    assert len(probes) == 3
    errors = np.loadtxt(out / "errors.csv", delimiter=",")
    assert errors.shape == (6, 6) and int((errors > errors.mean()).sum()) <= k


@pytest.mark.parametrize("name", sorted(CLI_GOLDEN))
def test_cli_golden(tiny, name):
    root, _ = tiny
    assert (root / CLI_GOLDEN[name]).read_bytes() == golden_bytes(name)


def test_mr_estimate(tiny, tmp_path):
    root, _ = tiny
    code, text = run_cli("mr-estimate", "--config", root / "tiny.json", "--ckpt", root / "mae",
                         "--data", root / "frames.spfr", "--out", tmp_path)
    assert code == 0
    with open(tmp_path / "histogram.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(int(r["frames"]) for r in rows) == 64 and len(rows) == 37
    report = json.loads((tmp_path / "mr_report.json").read_text())
    star = report["mr_star_pct"]
    assert report["candidates_pct"] == [c for c in (star - 5, star, star + 5) if 5 <= c <= 100]
    assert f"mr*={star}%" in text


def test_train_and_eval(tiny, tmp_path):
    root, stdout = tiny
    agent = root / "agent"
    names = sorted(p.name for p in agent.glob("agent_*.spnt"))
    assert names == ["agent_final.spnt", "agent_step_0000150.spnt", "agent_step_0000300.spnt"]
    assert (agent / "train_log.csv").exists() and (agent / "resolved_config.json").exists()
    args = ("eval", "--config", root / "tiny.json", "--checkpoint", agent / "agent_final.spnt", "--episodes", 2)
    code, text = run_cli(*args, "--out", tmp_path)
    assert code == 0 and text.startswith("mean=") and "median=" in text and "std=" in text
    assert run_cli(*args)[1] == text
    assert json.loads((tmp_path / "eval.json").read_text())["returns"]


def test_eval_random(tiny):
    root, _ = tiny
    code, text = run_cli("eval", "--config", root / "tiny.json", "--random", "--episodes", 3)
    assert code == 0 and "episodes=3" in text


def test_regime_switch(tiny):
    root, _ = tiny
    args = build_parser().parse_args(["train", "--config", str(root / "tiny.json"), "--ckpt", "x", "--out", "y",
                                      "--regime", "400K"])
    cfg = _apply_regime(_config(args), args.regime)
    assert cfg.agent.steps_per_update == 4 and cfg.agent.buffer_capacity == 400_000
    assert cfg.agent.batch_size == TINY_RUN["agent"]["batch_size"]
    low = _apply_regime(_config(args), "100K").agent
    assert low.steps_per_update == 1 and low.buffer_capacity == 100_000
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--ckpt", "x", "--out", "y", "--regime", "1M"])


def test_ablate_fixed_k(tiny, tmp_path):
    root, _ = tiny
    cfg = json.loads((root / "tiny.json").read_text())
    cfg["agent"].update(total_steps=120, learning_starts=60, checkpoint_interval=120)
    small = tmp_path / "small.json"
    small.write_text(json.dumps(cfg))
    code, _ = run_cli("ablate", "--config", small, "--what", "fixed_k", "--x", "0.1,0.5", "--ckpt", root / "mae",
                      "--out", tmp_path / "ab", "--episodes", 1)
    assert code == 0
    with open(tmp_path / "ab" / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["what", "variant", "seed", "mean_return", "median_return", "std_return"]
    assert [r[1] for r in rows[1:]] == ["dynamic", "fixed_k:0.1", "fixed_k:0.5"]


def test_ablate_pad_modes(tiny, tmp_path):
    root, _ = tiny
    cfg = json.loads((root / "tiny.json").read_text())
    cfg["agent"].update(total_steps=60, learning_starts=30, checkpoint_interval=60)
    small = tmp_path / "small.json"
    small.write_text(json.dumps(cfg))
    code, _ = run_cli("ablate", "--config", small, "--what", "pad_mode", "--ckpt", root / "mae",
                      "--out", tmp_path / "ab", "--episodes", 1)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "ab" / "ablation.csv")))
    assert [r[1] for r in rows[1:]] == ["zero_pad", "trainable_pad", "masked_attention"]


def test_attn_viz(tiny):
    root, stdout = tiny
    fields = dict(kv.split("=") for kv in stdout["attn-viz"].split())
    assert float(fields["mass"]) >= 0.6
    assert int(fields["attended"]) <= int(fields["selected"])
    assert (root / "attn" / "attention.ppm").exists()


def test_missing_checkpoint_io_error(tmp_path):
    code, _ = run_cli("saliency", "--ckpt", tmp_path / "none.spnt", "--data", tmp_path / "x", "--frame", 0,
                      "--out", tmp_path / "o")
    assert code == 3

import csv
import json

import numpy as np
import pytest

from agentfuse import perturbations as pt
from agentfuse.cli import build_parser, main

SCENE = ["--scene-set", "frames=2", "--scene-set", "n_classes=4", "--scene-set", "n_persons=3"]
TRAIN = ["--set", "epochs=2", "--set", "frames=2", "--set", "n_tokens=4", "--set", "dim=8", "--set", "n_agents=2"]


def test_all_subcommands_registered():
    sub = build_parser()._subparsers._group_actions[0]
    assert set(sub.choices) == {"gen", "train", "eval", "ablate", "perturb", "robust-eval", "report"}


def test_pipeline_end_to_end(tmp_path, capsys):
    d = tmp_path
    assert main(["gen", "--out", str(d / "train"), "--n", "16", *SCENE]) == 0
    assert main(["gen", "--out", str(d / "test"), "--n", "8", "--first", "16", *SCENE]) == 0
    assert json.loads((d / "train" / "resolved.json").read_text())["scene"]["frames"] == 2

    assert main(["train", "--data", str(d / "train" / "dataset.npz"), "--out", str(d / "run"), *TRAIN]) == 0
    resolved = json.loads((d / "run" / "resolved.json").read_text())
    assert resolved["train"]["epochs"] == 2 and (d / "run" / "checkpoint" / "manifest.json").exists()

    ckpt, test = str(d / "run" / "checkpoint"), str(d / "test" / "dataset.npz")
    assert main(["eval", "--checkpoint", ckpt, "--data", test, "--out", str(d / "ev1")]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--data", test, "--out", str(d / "ev2")]) == 0
    assert (d / "ev1" / "report.json").read_bytes() == (d / "ev2" / "report.json").read_bytes()
    assert len((d / "ev1" / "predictions.jsonl").read_text().splitlines()) == 8

    assert main(["robust-eval", "--checkpoint", ckpt, "--data", test, "--kind", "gaussian",
                 "--set", "sigma=0.0", "--out", str(d / "rob")]) == 0
    body = json.loads((d / "rob" / "robustness.json").read_text())
    assert body["clean"] == body["corrupted"] and body["config"]["sigma"] == 0.0

    assert main(["report", str(d / "ev1"), str(d / "rob"), str(d / "run"), "--out", str(d / "rep")]) == 0
    rows = list(csv.DictReader(open(d / "rep" / "summary.csv")))
    assert [r["kind"] for r in rows] == ["eval", "gaussian:clean", "gaussian:corrupted"]


def test_eval_rejects_mismatched_data(tmp_path, capsys):
    main(["gen", "--out", str(tmp_path / "a"), "--n", "8", *SCENE])
    main(["gen", "--out", str(tmp_path / "b"), "--n", "2", *SCENE, "--scene-set", "frames=3"])
    main(["train", "--data", str(tmp_path / "a" / "dataset.npz"), "--out", str(tmp_path / "r"), *TRAIN])
    code = main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--data",
                 str(tmp_path / "b" / "dataset.npz"), "--out", str(tmp_path / "e")])
    assert code == 2 and "shapes" in capsys.readouterr().err


def test_train_from_stream_files(tmp_path):
    assert main(["gen", "--files", "--out", str(tmp_path / "files"), "--n", "6", *SCENE]) == 0
    assert main(["train", "--data", str(tmp_path / "files"), "--out", str(tmp_path / "r"), *TRAIN, *SCENE]) == 0


def test_ablate_writes_table(tmp_path):
    assert main(["ablate", "--axis", "fusion-mode", "--values", "ours,addition", "--n-train", "8",
                 "--n-test", "4", "--out", str(tmp_path), *TRAIN, *SCENE]) == 0
    rows = list(csv.DictReader(open(tmp_path / "table.csv")))
    assert [r["value"] for r in rows] == ["ours", "addition"]
    assert main(["ablate", "--axis", "agents", "--values", "1,0", "--out", str(tmp_path / "x")]) == 2


def test_perturb_command(tmp_path, rng):
    video = rng.integers(0, 256, (2, 6, 8, 3), dtype=np.uint8)
    pt.write_raw_video(tmp_path / "in.rgb", video)
    out = tmp_path / "out.rgb"
    assert main(["perturb", "--kind", "rain", "--seed", "3", "--in", str(tmp_path / "in.rgb"), "--out", str(out),
                 "--set", "beta_range=[0, 0]"]) == 0
    assert np.array_equal(pt.read_raw_video(out), video)
    resolved = json.loads((tmp_path / "out.rgb.resolved.json").read_text())
    assert resolved["config"]["seed"] == 3 and resolved["config"]["n_drops"] == 83
    assert main(["perturb", "--kind", "fog", "--in", str(tmp_path / "in.rgb"), "--out", str(out),
                 "--set", "sigma=1"]) == 2


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "agentfuse", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "robust-eval" in res.stdout

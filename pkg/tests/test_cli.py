import csv
import json

import pytest

from neoact.cli import MANIFEST, build_parser, dir_digest, main
from neoact.data import LABELS

SUBCOMMANDS = ("generate", "ingest", "train", "hpo", "zeroshot", "eval", "timeline")


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "--out" in capsys.readouterr().out


def test_parser_lists_every_subcommand():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == set(SUBCOMMANDS)


def test_bad_arguments_exit_two(tmp_path, capsys):
    assert main(["generate", "--episodes", "0", "--out", str(tmp_path / "d")]) == 2
    assert "--episodes" in capsys.readouterr().err
    assert main(["generate", "--out", str(tmp_path / "d"), "--no-such-flag"]) == 2
    assert main(["ingest", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "c")]) == 2
    assert main(["generate", "--frequencies", "0.1,0.2", "--out", str(tmp_path / "d")]) == 2
    assert main(["zeroshot", "--protocol", "zs-b", "--out", str(tmp_path / "z")]) == 2


def test_generate_is_deterministic_and_reruns_from_manifest(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["generate", "--episodes", "3", "--duration", "30", "--seed", "4", "--out", str(a)]) == 0
    assert main(["generate", "--episodes", "3", "--duration", "30", "--seed", "4", "--out", str(b),
                 "--jobs", "3"]) == 0
    assert dir_digest(a) == dir_digest(b)
    man = json.loads((a / MANIFEST).read_text())
    assert man["subcommand"] == "generate" and man["seed"] == 4 and man["outputs"]["digest"] == dir_digest(a)
    assert main(["generate", "--config", str(a / MANIFEST), "--out", str(c)]) == 0
    assert dir_digest(c) == dir_digest(a)
    other = tmp_path / "o"
    main(["generate", "--episodes", "3", "--duration", "30", "--seed", "5", "--out", str(other)])
    assert dir_digest(other) != dir_digest(a)


@pytest.fixture(scope="module")
def clips(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert main(["generate", "--episodes", "6", "--duration", "120", "--height", "32", "--width", "32",
                 "--out", str(root / "data")]) == 0
    assert main(["ingest", "--dataset", str(root / "data"), "--frames", "4", "--size", "16",
                 "--out", str(root / "clips")]) == 0
    return root


def test_ingest_outputs(clips):
    info = json.loads((clips / "clips" / "dataset.json").read_text())
    assert info["n_clips"] + info["n_conflicts"] == 6 * 40
    with open(clips / "clips" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == info["n_clips"]
    assert {r["source_id"] for r in rows} == {f"ep{i:03d}" for i in range(6)}


def test_train_eval_timeline(clips, capsys):
    run = clips / "run"
    assert main(["train", "--clips", str(clips / "clips"), "--dim", "16", "--depth", "1", "--heads", "2",
                 "--epochs", "2", "--batch-size", "16", "--test-fraction", "0.34", "--out", str(run)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert 0.0 <= metrics["test"]["macro_f1"] <= 1.0
    assert (run / "best.ckpt").exists() and (run / MANIFEST).exists()

    assert main(["eval", "--preds", str(run / "preds_test.csv"), "--method", "toy",
                 "--out", str(clips / "eval")]) == 0
    table = capsys.readouterr().out
    assert "| toy" in table and "mAv" in table
    assert len((clips / "eval" / "report.jsonl").read_text().splitlines()) == 1

    assert main(["timeline", "--preds", str(run / "preds_test.csv"), "--out", str(clips / "tl")]) == 0
    with open(clips / "tl" / "timeline.csv") as fh:
        segs = list(csv.DictReader(fh))
    assert all(s["activity"] in LABELS for s in segs)
    assert list((clips / "tl").glob("*.svg"))


def test_fusion_modes_train(clips):
    for mode in ("ft-lc", "ft-c-lora"):
        out = clips / mode
        assert main(["train", "--clips", str(clips / "clips"), "--model", "fusion", "--mode", mode,
                     "--dim", "16", "--depth", "1", "--heads", "2", "--lora-rank", "2", "--epochs", "1",
                     "--test-fraction", "0.34", "--out", str(out)]) == 0
    assert main(["train", "--clips", str(clips / "clips"), "--model", "fusion", "--out",
                 str(clips / "bad")]) == 2


def test_hpo_runs_and_resumes(clips):
    out = clips / "hpo"
    args = ["hpo", "--clips", str(clips / "clips"), "--dim", "16", "--depth", "1", "--heads", "2",
            "--epochs", "2", "--trials", "2", "--startup", "2", "--test-fraction", "0.34", "--out", str(out)]
    assert main(args) == 0
    assert main(args) == 0
    best = json.loads((out / "best_config.json").read_text())
    assert best["n_trials"] == 4
    lines = (out / "study.jsonl").read_text().splitlines()
    assert len(lines) == 5


def test_zeroshot_mock_script(tmp_path):
    script = {}
    for cid, answers in (("c1", ("Yes", "No", "No", "Yes")), ("c2", ("No", "Yes", "Yes", "Yes"))):
        script.update({f"{cid}::question:{lab}": a for lab, a in zip(LABELS, answers)})
    path = tmp_path / "script.json"
    path.write_text(json.dumps(script))
    out = tmp_path / "zs"
    assert main(["zeroshot", "--protocol", "zs-b", "--script", str(path), "--out", str(out)]) == 0
    with open(out / "labels.csv") as fh:
        rows = {r["clip_id"]: [int(r[lab]) for lab in LABELS] for r in csv.DictReader(fh)}
    assert rows == {"c1": [1, 0, 0, 1], "c2": [0, 1, 1, 1]}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_clips"] == 2 and summary["conflicts"] == 0
    first = (out / "transcript.jsonl").read_bytes()
    assert main(["zeroshot", "--protocol", "zs-b", "--script", str(path), "--out", str(out), "--jobs", "2"]) == 0
    assert (out / "transcript.jsonl").read_bytes() == first

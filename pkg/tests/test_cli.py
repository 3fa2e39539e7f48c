import json
import os

import pytest

from recmem import config as C
from recmem import container
from recmem.cli import main

SMALL = {
    "synthetic.n_users": 150, "synthetic.n_item_pairs": 5, "synthetic.n_filler": 20,
    "model.d_model": 16, "model.n_heads": 2, "model.ff_dim": 32,
    "backbone.max_epochs": 2, "retriever.max_epochs": 2, "retriever.hidden": 8,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text("# tiny run\n" + "".join(f"{k} = {v}\n" for k, v in SMALL.items()))
    return str(path)


def run_files(run):
    return {name: container.file_hash(os.path.join(run, name)) for name in ("events.jsonl", "split.json", "vocab.json")}


def test_config_dump_lists_every_default(capsys):
    assert main(["config", "--dump"]) == 0
    out = capsys.readouterr().out
    for key in C.DEFAULTS:
        assert f"{key} =" in out
    assert out.count("#") >= len(C.COMMENTS)


def test_config_dump_roundtrips(tmp_path, capsys):
    main(["config", "--dump", "--set", "seed=5"])
    path = tmp_path / "dumped.cfg"
    path.write_text(capsys.readouterr().out)
    assert C.resolve({}, str(path))["seed"] == 5


def test_prepare_data_smoke_and_rerun(tmp_path, small_config, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["prepare-data", "--synthetic", "--config", small_config, "--out", a]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert all(counts[k] > 0 for k in ("train", "val", "test"))
    assert main(["prepare-data", "--synthetic", "--config", small_config, "--out", b, "--workers", "3"]) == 0
    assert run_files(a) == run_files(b)


def test_prepare_data_source_flags(tmp_path, small_config, capsys):
    assert main(["prepare-data", "--out", str(tmp_path / "r")]) == 2
    events = tmp_path / "e.jsonl"
    events.write_text('{"user": "u", "item": "a", "ts": 1}\n')
    assert main(["prepare-data", "--synthetic", "--input", str(events), "--out", str(tmp_path / "r")]) == 2
    assert main(["prepare-data", "--input", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "r")]) == 2
    assert "missing.jsonl" in capsys.readouterr().err


def test_malformed_input_reports_line(tmp_path, capsys):
    events = tmp_path / "e.jsonl"
    events.write_text('{"user": "u", "item": "a", "ts": 1}\n{"user": "u", "item": \n')
    assert main(["prepare-data", "--input", str(events), "--out", str(tmp_path / "r")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_bad_settings_are_user_errors(tmp_path):
    assert main(["config", "--set", "nonsense.key=1"]) == 2
    assert main(["config", "--set", "seed"]) == 2
    assert main(["no-such-command"]) == 2


def test_stage_chain_and_staleness(tmp_path, small_config, monkeypatch, capsys):
    monkeypatch.setenv("MRGR_CACHE_DIR", str(tmp_path / "cache"))
    run = str(tmp_path / "run")
    assert main(["prepare-data", "--synthetic", "--config", small_config, "--out", run]) == 0
    assert main(["build-memory", "--run", run]) == 2  # no backbone yet
    assert "train-backbone" in capsys.readouterr().err
    for stage in ("train-backbone", "build-memory"):
        assert main([stage, "--run", run, "--workers", "2"]) == 0
    assert main(["evaluate", "--run", run, "--variant", "learned"]) == 2
    assert "train-retriever" in capsys.readouterr().err
    assert main(["evaluate", "--run", run, "--variant", "no_memory"]) == 0
    assert main(["verify", "--run", run]) == 0

    # retrain the backbone under a different seed without rebuilding memory
    cfg_path = os.path.join(run, "config.json")
    cfg = json.loads(open(cfg_path).read())
    cfg["seed"] = 1
    open(cfg_path, "w").write(json.dumps(cfg))
    assert main(["train-backbone", "--run", run]) == 0
    capsys.readouterr()
    assert main(["annotate", "--run", run]) == 2
    err = capsys.readouterr().err
    assert "stale" in err and "build-memory" in err
    assert main(["verify", "--run", run]) == 2

    assert main(["build-memory", "--run", run]) == 0
    assert main(["annotate", "--run", run]) == 0
    assert os.path.exists(tmp_path / "cache" / "annotations-cache.jsonl")
    assert not os.path.exists(os.path.join(run, "cache"))
    m = json.loads(open(os.path.join(run, "manifests", "annotate.json")).read())
    assert m["annotation_forward_passes"] > 0
    assert main(["train-retriever", "--run", run]) == 0
    for v in ("learned", "random"):
        assert main(["evaluate", "--run", run, "--variant", v]) == 0
    reports = [os.path.join(run, "reports", f"{v}.json") for v in ("no_memory", "learned")]
    assert main(["compare", reports[0], "--out", str(tmp_path / "cmp")]) == 2
    assert main(["compare", *reports, "--out", str(tmp_path / "cmp")]) == 0
    assert os.path.exists(tmp_path / "cmp" / "audit.csv")


def test_tampered_checkpoint_is_detected(tmp_path, small_config, capsys):
    run = str(tmp_path / "run")
    main(["prepare-data", "--synthetic", "--config", small_config, "--out", run])
    main(["train-backbone", "--run", run])
    with open(os.path.join(run, "backbone.ckpt"), "ab") as f:
        f.write(b"\0")
    capsys.readouterr()
    assert main(["build-memory", "--run", run]) == 2
    assert "rerun `train-backbone`" in capsys.readouterr().err

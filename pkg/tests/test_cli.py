import json

import pytest

from txalign.cli import main
from txalign.config import load_config
from txalign.pipeline import Context, run_command

SMALL = {
    "data": {"n_clients": 150},
    "encoder": {"d_emb": 4, "hidden": 8, "d_out": 8},
    "pretrain": {"epochs": 1, "batch_size": 32},
    "alignment": {"epochs": 1, "batch_size": 32},
    "embedding": {"dim": 32},
    "eval": {"k": 3},
    "benchmark": {"n_samples": 100, "warmup": 10},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def cli(config, root, *args):
    return main([*args, "--config", str(config), "--artifacts-dir", str(root)])


def test_unknown_key_is_a_config_error(capsys, tmp_path):
    assert main(["synth", "--set", "alignment.epoch=3", "--artifacts-dir", str(tmp_path)]) == 3
    assert "alignment.epoch" in capsys.readouterr().err


def test_malformed_set(capsys):
    assert main(["show-config", "--set", "noequals"]) == 3


def test_missing_upstream(capsys, small_config, tmp_path):
    assert cli(small_config, tmp_path / "a", "align") == 2
    err = capsys.readouterr().err
    assert "pretrain" in err and "run `pretrain` first" in err


def test_show_config(capsys):
    assert main(["show-config", "--seed", "7"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 7


def test_full_mock_run(capsys, small_config, tmp_path):
    root = tmp_path / "a"
    assert cli(small_config, root, "run", "--mock") == 0
    reports = json.loads((root / "evaluate" / "reports.json").read_text())
    tags = {r["variant"] for r in reports}
    assert {"agg", "coles", "latte-s[softmax]", "latte[ortho]"} <= tags
    assert (root / "fom" / "fom.csv").exists() and (root / "fom" / "fom.svg").exists()
    bench = {b["variant"]: b for b in json.loads((root / "benchmark" / "bench.json").read_text())}
    for head in ("softmax", "sigmoid", "ortho"):
        assert bench[f"latte-s[{head}]"]["samples_per_sec"] >= bench[f"latte[{head}]"]["samples_per_sec"]

    # nothing changed, so nothing reruns
    capsys.readouterr()
    assert cli(small_config, root, "align", "--mock") == 0
    assert "align: up to date" in capsys.readouterr().out

    # a forced regenerate is served entirely from the cache
    ctx = Context(load_config(small_config, {"generation.mock": True, "embedding.mock": True}), root)
    assert run_command(ctx, "generate", force=True)
    assert ctx.counters["generator"].calls == 0

    # an alignment change invalidates align and everything after it, not pretrain
    manifest = json.loads((root / "manifest.json").read_text())["stages"]
    ctx = Context(load_config(small_config, {"alignment.epochs": 2}), root)
    assert ctx.stage_hash("pretrain") == manifest["pretrain"]["stage_hash"]
    assert ctx.stage_hash("align") != manifest["align"]["stage_hash"]
    assert not run_command(ctx, "pretrain")
    assert run_command(ctx, "align")


def test_evaluate_variant_filter(capsys, small_config, tmp_path):
    root = tmp_path / "a"
    assert cli(small_config, root, "run", "--mock") == 0
    assert cli(small_config, root, "evaluate", "--variants", "coles,agg", "--k", "2") == 0
    reports = json.loads((root / "evaluate" / "reports.json").read_text())
    assert sorted(r["variant"] for r in reports) == ["agg", "coles"]
    assert all(len(r["fold_values"]) == 2 for r in reports)
    assert cli(small_config, root, "evaluate", "--variants", "nope") == 1


def test_ingest(tmp_path, capsys):
    csv_path = tmp_path / "ev.csv"
    rows = ["cid,ts,amt,code,kind,y"]
    for c in range(20):
        for t in range(5):
            rows.append(f"u{c},{t * 86400},{-10 - t},{(c + t) % 4},{t % 2},{c % 2}")
    csv_path.write_text("\n".join(rows) + "\n")
    schema = ["--schema", "client_id=cid", "--schema", "timestamp=ts", "--schema", "amount=amt",
              "--schema", "mcc=code", "--schema", "tx_type=kind", "--schema", "label=y"]
    assert main(["ingest", str(csv_path), *schema, "--artifacts-dir", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "data" / "events.csv").exists()
    assert main(["ingest", str(tmp_path / "missing.csv"), "--artifacts-dir", str(tmp_path / "b")]) == 1

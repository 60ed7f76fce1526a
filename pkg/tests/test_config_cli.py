import csv
import json

import numpy as np
import pytest

from conftest import small_config
from fedlora.cli import main
from fedlora.config import ConfigError, ExperimentConfig, parse_config, parse_override, set_path
from fedlora.data import load_dataset
from fedlora.federation import run_experiment
from fedlora.model import load_base
from fedlora.output import ROUNDS_HEADER, OutputError, emit_outputs, read_rounds, summary_from_rounds
from fedlora.presets import UnknownPreset, expand_preset, load_preset, preset_names

SMALL = ["data.per_class=60", "model.pretrain_epochs=5", "federation.rounds=2", "federation.local_epochs=1"]


def _sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


# --- config ----------------------------------------------------------------------

def test_defaults():
    cfg = parse_config(env={})
    assert cfg == ExperimentConfig()
    assert (cfg.adapter.rank, cfg.adapter.alpha, cfg.adapter.dropout) == (4, 8.0, 0.1)
    assert (cfg.federation.batch_size, cfg.federation.local_epochs, cfg.federation.rounds) == (16, 3, 5)
    assert cfg.federation.aggregator == "mean" and cfg.federation.participation == 1.0
    assert cfg.prox_mu == 0.0 and cfg.federation.prox_mu == 0.01
    assert cfg.data.eval_fraction == 0.2 and cfg.data.pretrain_fraction == 0.2
    assert cfg.model.hidden_dim == 64 and cfg.model.num_classes == 8


def test_file_and_override_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "federation": {"rounds": 7, "lr": 0.01}}))
    cfg = parse_config(path, ["federation.rounds=9"], env={"FEDLORA_SEED": "11"})
    assert (cfg.seed, cfg.federation.rounds, cfg.federation.lr) == (11, 9, 0.01)
    assert parse_config(path, ["seed=2"], env={"FEDLORA_SEED": "11"}).seed == 2


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"federation": {"round": 7}}))
    with pytest.raises(ConfigError, match="federation.round: unknown key"):
        parse_config(path, env={})
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(None, ["adapter.rnak=3"], env={})
    with pytest.raises(ConfigError):
        parse_config(None, ["bogus=1"], env={})


def test_rank_error_names_field():
    with pytest.raises(ConfigError) as exc:
        parse_config(None, ["adapter.rank=8"], env={})
    assert any(p.startswith("adapter.rank") for p in exc.value.problems)


def test_type_and_range_errors_name_fields():
    with pytest.raises(ConfigError, match="federation.rounds: expected an integer"):
        parse_config(None, ["federation.rounds=2.5"], env={})
    with pytest.raises(ConfigError) as exc:
        parse_config(None, ["adapter.dropout=1.5", "federation.lr=-1"], env={})
    assert {p.split(":")[0] for p in exc.value.problems} == {"adapter.dropout", "federation.lr"}
    with pytest.raises(ConfigError, match="seed"):
        parse_config(None, env={"FEDLORA_SEED": "abc"})


def test_parse_override():
    assert parse_override("federation.rounds=10") == ("federation.rounds", 10)
    assert parse_override("adapter.strategy=ffa_lora") == ("adapter.strategy", "ffa_lora")
    assert parse_override("federation.prox=true") == ("federation.prox", True)
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_direct_scale_mode():
    cfg = set_path(ExperimentConfig(), "adapter.scale_mode", "direct")
    assert cfg.effective_alpha / cfg.adapter.rank == cfg.adapter.alpha


def test_config_json_round_trip():
    cfg = small_config(**{"adapter.strategy": "ffa_lora"})
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg


# --- presets ---------------------------------------------------------------------

def test_preset_catalog():
    assert preset_names() == sorted(
        ["agg-compare", "central-vs-fed", "client-ablation", "rank-ablation", "scale-noniid", "sota-compare"]
    )
    with pytest.raises(UnknownPreset):
        load_preset("nope")


def test_rank_ablation_resolves():
    runs = expand_preset("rank-ablation")
    assert sorted({c.adapter.rank for _, _, c in runs}) == [2, 4, 8, 16]
    assert {(c.federation.clients, c.federation.rounds) for _, _, c in runs} == {(2, 10)}
    assert len({s for _, s, _ in runs}) == 5


def test_sota_compare_resolves():
    runs = expand_preset("sota-compare")
    assert {(c.federation.clients, c.federation.local_epochs, c.federation.rounds) for _, _, c in runs} == {(4, 3, 5)}
    assert [lab for lab, s, _ in runs if s == 0] == ["strategy=plora", "strategy=full_lora", "strategy=ffa_lora"]


def test_other_presets_resolve():
    assert sorted({c.federation.clients for _, _, c in expand_preset("client-ablation")}) == [2, 4, 6, 8]
    assert {c.prox_mu for _, _, c in expand_preset("agg-compare")} == {0.0, 0.01}
    assert {c.mode for _, _, c in expand_preset("central-vs-fed")} == {"centralized", "federated"}
    cfg = expand_preset("scale-noniid")[0][2]
    assert (cfg.federation.clients, cfg.data.num_shards, cfg.data.shards_per_client, cfg.federation.rounds) == (40, 80, 2, 30)


def test_preset_overrides_and_seeds():
    runs = expand_preset("sota-compare", ["federation.rounds=1"], seeds=[7])
    assert {(s, c.federation.rounds) for _, s, c in runs} == {(7, 1)}


# --- outputs ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_by_two():
    return run_experiment(small_config(**{"federation.clients": 2, "federation.save_adapters": True}))


def test_rounds_table_shape(tmp_path, two_by_two):
    b = emit_outputs(two_by_two, tmp_path)
    text = b.rounds.read_text()
    assert text.splitlines()[0] == ROUNDS_HEADER
    rows = read_rounds(b.rounds)
    assert len([r for r in rows if r["round"] != "0"]) == 8
    assert len(rows) == 12
    assert [(r["round"], r["client"], r["split"]) for r in rows[:4]] == [
        ("0", "0", "train"), ("0", "0", "eval"), ("0", "1", "train"), ("0", "1", "eval"),
    ]
    local = list(csv.DictReader(b.local_rounds.open()))
    assert {r["split"] for r in local} == {"local"} and len(local) == 4
    assert len(b.adapters) == 2


def test_six_significant_digits(tmp_path, two_by_two):
    rows = read_rounds(emit_outputs(two_by_two, tmp_path).rounds)
    for r in rows:
        for c in ("loss", "accuracy", "precision", "recall", "f1"):
            assert len(r[c].replace(".", "").replace("-", "").lstrip("0")) <= 6


def test_summary_mean_matches_clients(tmp_path, two_by_two):
    b = emit_outputs(two_by_two, tmp_path)
    s = json.loads(b.summary.read_text())
    accs = [c["accuracy"] for c in s["final_clients"]]
    assert abs(s["final_mean"]["accuracy"] - np.mean(accs)) <= 1e-5
    assert s["lr"] == two_by_two.config.federation.lr
    recomputed = summary_from_rounds(b.rounds)
    assert abs(recomputed["final_mean"]["accuracy"] - s["final_mean"]["accuracy"]) <= 1e-5
    assert recomputed["total_uplink_bytes"] == s["total_uplink_bytes"]


def test_unwritable_destination(tmp_path, two_by_two):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError, match=str(blocker)):
        emit_outputs(two_by_two, blocker / "sub")


def test_report_rejects_bad_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_rounds(p)


# --- cli -------------------------------------------------------------------------

def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_run_and_echo_rerun(tmp_path, capsys):
    out1 = tmp_path / "a"
    assert main(["run", *_sets(SMALL + ["federation.rounds=3"]), "--out", str(out1)], env={}) == 0
    echo = json.loads((out1 / "config.json").read_text())
    assert echo["federation"]["rounds"] == 3
    out2 = tmp_path / "b"
    assert main(["run", "--config", str(out1 / "config.json"), "--out", str(out2)], env={}) == 0
    assert _files(out1) == _files(out2)


def test_cli_env_seed(tmp_path):
    assert main(["run", *_sets(SMALL), "--out", str(tmp_path)], env={"FEDLORA_SEED": "5"}) == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 5


def test_cli_config_error_exit(tmp_path, capsys):
    assert main(["run", "--set", "adapter.rank=99", "--out", str(tmp_path / "x")], env={}) == 2
    assert "adapter.rank" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_cli_unknown_preset(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["preset", "no-such-preset", "--out", str(out)], env={}) == 2
    err = capsys.readouterr().err
    assert "usage" in err and "no-such-preset" in err
    assert not out.exists()


def test_cli_unknown_subcommand(capsys):
    assert main(["fly"], env={}) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_preset_runs(tmp_path):
    out = tmp_path / "p"
    args = ["preset", "sota-compare", "--seeds", "0", "--out", str(out), *_sets(SMALL + ["federation.rounds=1"])]
    assert main(args, env={}) == 0
    summary = (out / "preset_summary.csv").read_text().splitlines()
    assert summary[0].startswith("variant,seed,final_accuracy")
    assert [line.split(",")[:2] for line in summary[1:]] == [
        ["strategy=plora", "0"], ["strategy=full_lora", "0"], ["strategy=ffa_lora", "0"],
        ["strategy=plora", "mean"], ["strategy=full_lora", "mean"], ["strategy=ffa_lora", "mean"],
    ]
    assert (out / "strategy=ffa_lora" / "seed-0" / "rounds.csv").exists()


def test_cli_gen_data_and_pretrain(tmp_path):
    assert main(["gen-data", *_sets(["data.per_class=20"]), "--out", str(tmp_path)], env={}) == 0
    ds = load_dataset(tmp_path / "dataset.fvlm")
    assert len(ds) == 160
    assert main(["pretrain", *_sets(["data.per_class=60", "model.pretrain_epochs=5"]), "--out", str(tmp_path)], env={}) == 0
    base = load_base(tmp_path / "base.fvlm")
    meta = json.loads((tmp_path / "pretrain.json").read_text())
    assert meta["checksum"] == base.checksum() and meta["epochs"] == 5


def test_cli_report(tmp_path, capsys):
    assert main(["run", *_sets(SMALL), "--out", str(tmp_path)], env={}) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "rounds.csv")], env={}) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["final_round"] == 2 and len(out["final_clients"]) == 4
    assert main(["report", str(tmp_path / "missing.csv")], env={}) == 1

import json

import pytest

from fedgm.cli import (
    apply_overrides,
    cmd_grad_check,
    config_hash,
    main,
    parse_config,
    parse_config_dict,
)
from fedgm.errors import ParseError

BASE = {
    "experiment": "smoke",
    "mode": "dg",
    "data": {"kind": "rotated_moons", "angles": [0.0, 30.0, 60.0], "n_per_domain": 80, "noise_sigma": 0.1},
    "held_out": 2,
    "arch": [2, 8],
    "augmentation": {"kind": "gaussian_noise", "sigma": 0.1},
    "hp": {"rounds": 2, "lr0": 0.05, "lr1": 0.01},
    "seeds": [0],
}


def _write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def test_parse_minimal_config_defaults(tmp_path):
    payload = dict(BASE)
    del payload["hp"]
    del payload["augmentation"]
    cfg = parse_config(_write(tmp_path, payload))
    assert cfg.hp.lam == 0.5
    assert cfg.hp.rounds == 30
    assert cfg.hp.batch == 16
    assert cfg.hp.lr0 == 1e-3 and cfg.hp.lr1 == 1e-4
    assert cfg.hp.momentum == 0.9 and cfg.hp.weight_decay == 5e-4
    assert cfg.hp.local_epochs == 1
    assert cfg.hp.tau == 0.9
    assert cfg.hp.min_votes == 1  # two sources -> single vote suffices
    assert cfg.augmentation.kind == "identity"
    assert cfg.out_dir == "runs/smoke"


def test_parse_min_votes_default_with_three_sources(tmp_path):
    payload = dict(BASE)
    payload["data"] = dict(payload["data"], angles=[0.0, 20.0, 40.0, 60.0])
    cfg = parse_config(_write(tmp_path, payload))
    assert cfg.hp.min_votes == 2


def test_parse_lambda_range_error(tmp_path):
    payload = dict(BASE, hp={"lambda": 1.5})
    with pytest.raises(ParseError, match=r"lambda.*\[0, 1\]"):
        parse_config(_write(tmp_path, payload))


def test_parse_unknown_key_named(tmp_path):
    payload = dict(BASE, hp={"lamda": 0.3})
    with pytest.raises(ParseError, match="hp.lamda"):
        parse_config(_write(tmp_path, payload))
    payload = dict(BASE, lamda=0.3)
    with pytest.raises(ParseError, match="config.lamda"):
        parse_config(_write(tmp_path, payload))


def test_parse_missing_required_key(tmp_path):
    payload = dict(BASE)
    del payload["held_out"]
    with pytest.raises(ParseError, match="held_out"):
        parse_config(_write(tmp_path, payload))


def test_parse_type_mismatch(tmp_path):
    payload = dict(BASE, held_out="two")
    with pytest.raises(ParseError, match="held_out"):
        parse_config(_write(tmp_path, payload))


def test_parse_arch_width_checked(tmp_path):
    payload = dict(BASE, arch=[3, 8])
    with pytest.raises(ParseError, match="arch"):
        parse_config(_write(tmp_path, payload))


def test_overrides_dotted_paths():
    raw = apply_overrides(BASE, ["hp.lambda=0.3", "experiment=other"])
    assert raw["hp"]["lambda"] == 0.3
    assert raw["experiment"] == "other"
    assert BASE["hp"].get("lambda") is None  # original untouched


def test_config_hash_stable_and_sensitive():
    a = parse_config_dict(json.loads(json.dumps(BASE)))
    b = parse_config_dict(json.loads(json.dumps(BASE)))
    assert config_hash(a) == config_hash(b)
    c = parse_config_dict(apply_overrides(BASE, ["hp.lambda=0.25"]))
    assert config_hash(c) != config_hash(a)


def test_run_dg_writes_expected_files(tmp_path):
    payload = dict(BASE, seeds=[0, 1], out_dir=str(tmp_path / "out"))
    cfg_path = _write(tmp_path, payload)
    assert main(["run-dg", "--config", str(cfg_path)]) == 0
    out = tmp_path / "out"
    assert (out / "seed_0.csv").exists() and (out / "seed_1.csv").exists()
    assert (out / "model_seed_0.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) >= {"config_hash", "final", "per_round_rows"}
    assert len(summary["final"]["per_seed"]) == 2
    header = (out / "seed_0.csv").read_text().splitlines()[0]
    assert header == "round,phase,domain_id,metric,value"


def test_run_dg_identical_invocations_identical_bytes(tmp_path):
    p1 = dict(BASE, out_dir=str(tmp_path / "a"))
    p2 = dict(BASE, out_dir=str(tmp_path / "b"))
    assert main(["run-dg", "--config", str(_write(tmp_path, p1, "a.json"))]) == 0
    assert main(["run-dg", "--config", str(_write(tmp_path, p2, "b.json"))]) == 0
    csv_a = (tmp_path / "a" / "seed_0.csv").read_bytes()
    csv_b = (tmp_path / "b" / "seed_0.csv").read_bytes()
    assert csv_a == csv_b


def test_run_dg_override_recorded_in_summary(tmp_path):
    payload = dict(BASE, out_dir=str(tmp_path / "out"))
    cfg_path = _write(tmp_path, payload)
    assert main(["run-dg", "--config", str(cfg_path), "--override", "hp.lambda=0.3"]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["config"]["hp"]["lambda"] == 0.3


def test_run_dg_seed_flag_appends(tmp_path):
    payload = dict(BASE, out_dir=str(tmp_path / "out"))
    cfg_path = _write(tmp_path, payload)
    assert main(["run-dg", "--config", str(cfg_path), "--seed", "7"]) == 0
    assert (tmp_path / "out" / "seed_7.csv").exists()


def test_run_bad_config_exit_code(tmp_path):
    payload = dict(BASE, hp={"lambda": 2.0})
    assert main(["run-dg", "--config", str(_write(tmp_path, payload))]) == 1


def test_run_mode_mismatch(tmp_path):
    assert main(["run-da", "--config", str(_write(tmp_path, BASE))]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_divergence_exit_code(tmp_path):
    payload = dict(
        BASE,
        out_dir=str(tmp_path / "out"),
        hp={"rounds": 2, "lr0": 1e200, "lr1": 1e199},
    )
    assert main(["run-dg", "--config", str(_write(tmp_path, payload))]) == 2


def test_run_da_smoke(tmp_path):
    payload = dict(
        BASE,
        mode="da",
        out_dir=str(tmp_path / "out"),
        hp={"rounds": 2, "lr0": 0.05, "lr1": 0.01, "tau": 0.7, "min_votes": 1},
        data={"kind": "rotated_moons", "angles": [0.0, 30.0, 60.0], "n_per_domain": 150, "noise_sigma": 0.1},
    )
    assert main(["run-da", "--config", str(_write(tmp_path, payload))]) == 0
    rows = (tmp_path / "out" / "seed_0.csv").read_text().splitlines()
    assert any(",pseudo," in r for r in rows)
    assert any(",eval_target," in r for r in rows)


def test_grad_check_default_passes():
    assert cmd_grad_check([6, 8, 5], trials=5, tolerance=1e-5, seed=0) == 0


def test_grad_check_impossible_tolerance():
    assert cmd_grad_check([6, 8, 5], trials=2, tolerance=0.0, seed=0) == 3


def test_grad_check_cli_reproducible(capsys):
    assert main(["grad-check", "--trials", "2", "--seed", "5"]) == 0
    first = capsys.readouterr().out
    assert main(["grad-check", "--trials", "2", "--seed", "5"]) == 0
    second = capsys.readouterr().out
    assert first == second


def test_gen_data_writes_csvs(tmp_path):
    cfg_path = _write(tmp_path, BASE)
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.glob("*.csv"))
    assert files == ["domain_0.csv", "domain_1.csv", "domain_2.csv"]
    lines = (out / "domain_0.csv").read_text().splitlines()
    assert lines[0] == "domain_id,y,x0,x1"
    assert len(lines) == 81


def test_gen_data_rerun_identical(tmp_path):
    cfg_path = _write(tmp_path, BASE)
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d1")]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d2")]) == 0
    assert (tmp_path / "d1" / "domain_1.csv").read_bytes() == (tmp_path / "d2" / "domain_1.csv").read_bytes()


def test_gen_data_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1

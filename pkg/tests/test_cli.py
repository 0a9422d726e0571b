import json

import pytest
from pipeline_helpers import make_workspace, run_pipeline

from measure import cli
from measure.cli import UsageError, apply_overrides, parse_overrides, resolve_config
from measure.data import Dataset, SynthConfig, synth_generate, write_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return make_workspace(tmp_path_factory.mktemp("cli"))


def test_parse_overrides():
    got = parse_overrides(["--loss.alpha=0.01", "--optim.steps", "7", "--out-dir-ish.x", "abc"])
    assert got == {"loss.alpha": 0.01, "optim.steps": 7, "out_dir_ish.x": "abc"}
    with pytest.raises(UsageError):
        parse_overrides(["--loss.alpha"])
    with pytest.raises(UsageError):
        parse_overrides(["stray"])


def test_apply_overrides_rejects_non_sections():
    with pytest.raises(UsageError):
        apply_overrides({"seed": 0}, {"seed.x": 1})


def test_flags_override_the_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"loss": {"alpha": 0.5}, "optim": {"steps": 9}}))
    cfg = resolve_config(str(path), {"optim.steps": 3})
    assert cfg.loss.alpha == 0.5 and cfg.optim.steps == 3
    assert cfg.optim.lr == 3e-4  # untouched defaults survive


def test_gen_data_provenance(workspace):
    prov = json.loads((workspace / "provenance.json").read_text())
    assert prov["command"] == "gen-data" and prov["seed"] == 0
    assert set(prov["derived_seeds"]) >= {"encoder", "sampler", "augment"}
    cfg = json.loads((workspace / "config.json").read_text())
    assert cfg["synth"]["n_domains"] == 4


def test_pipeline_is_deterministic(workspace):
    first, second = run_pipeline(workspace, "a"), run_pipeline(workspace, "b")
    for name in first:
        assert first[name] == second[name], name
    prov = json.loads((workspace / "a" / "eval" / "provenance.json").read_text())
    assert set(prov["inputs"]) == {"data", "encoder", "staging"}
    assert len(prov["inputs"]["encoder"]["sha256"]) == 64
    assert first["eval/metrics.csv"].splitlines()[0].startswith(b"fold,kappa,acc,f1_macro")


def test_info_command(workspace):
    run_pipeline(workspace, "c")
    enc = workspace / "c" / "pre" / "encoder.ckpt"
    out = workspace / "info"
    assert cli.main(["info", "--config", str(workspace / "small.json"), "--data", str(workspace / "data.msd"),
                     "--encoder", str(enc), "--out-dir", str(out)]) == 0
    rep = json.loads((out / "info.json").read_text())
    assert {"I_zd", "superfluous_proxy", "I_zd_vmf"} <= set(rep)


def test_eval_rejects_a_mismatched_encoder(workspace, tmp_path):
    run_pipeline(workspace, "d")
    other = tmp_path / "other"
    assert cli.main(["pretrain", "--config", str(workspace / "small.json"), "--data", str(workspace / "data.msd"),
                     "--out-dir", str(other), "--seed", "5"]) == 0
    code = cli.main(["eval", "--config", str(workspace / "small.json"), "--data", str(workspace / "data.msd"),
                     "--encoder", str(other / "encoder.ckpt"), "--staging", str(workspace / "d/stage/staging.ckpt"),
                     "--out-dir", str(tmp_path / "e")])
    assert code == 2


@pytest.mark.parametrize("argv", [
    ["pretrain"],
    ["pretrain", "--data", "/nonexistent.msd"],
    ["gen-data", "--optim.nope", "1"],
    ["gen-data", "--optim.steps", "many"],
    ["gen-data", "--config", "/nonexistent.json"],
])
def test_bad_input_exits_2(argv, tmp_path):
    assert cli.main(argv + ["--out-dir", str(tmp_path)]) == 2


def test_corrupt_dataset_exits_2(tmp_path):
    (tmp_path / "bad.msd").write_bytes(b"NOPE" + bytes(60))
    assert cli.main(["pretrain", "--data", str(tmp_path / "bad.msd"), "--out-dir", str(tmp_path)]) == 2


def test_divergence_exits_1(workspace, tmp_path):
    code = cli.main(["pretrain", "--config", str(workspace / "small.json"), "--data", str(workspace / "data.msd"),
                     "--optim.lr", "1e300", "--out-dir", str(tmp_path)])
    assert code == 1


def test_ablate_refuses_a_single_domain(tmp_path, capsys):
    full = synth_generate(SynthConfig(n_domains=2, epochs_per_domain=20))
    keep = full.d == full.domain_ids[0]
    data = tmp_path / "one.msd"
    write_dataset(Dataset(full.signals[keep], full.y[keep], full.d[keep], full.k[keep]), data)
    assert cli.main(["ablate", "--data", str(data), "--out-dir", str(tmp_path / "abl")]) == 2
    assert "need ≥ 2 domains" in capsys.readouterr().err


def test_gradcheck_command(capsys, tmp_path):
    assert cli.main(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)

import csv
import json

import numpy as np
import pytest

from modalign import cli, config as C, experiments as X
from modalign.fileformat import load_params
from modalign.models import blocks_equal

TINY = dict(n_source=400, n_target=200, noise=0.1, probe_size=400, surrogate_size=100,
            stage1_steps=3, stage2_steps=5, trials=200)


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "exp.cfg"
    lines = [f"{k}={v}" for k, v in TINY.items()]
    path.write_text("# tiny run\n" + "\n".join(lines) + "\n\nmethods=finetune,mona\n")
    return path


# --- config -----------------------------------------------------------------

def test_config_parses_types_and_lists(cfg_file):
    cfg = C.load_config(cfg_file)
    assert cfg.n_source == 400 and cfg.noise == 0.1 and cfg.methods == ["finetune", "mona"]
    assert C.load_config(cfg_file, {"lam": "0.25", "seeds": "1,2"}).seeds == [1, 2]


def test_config_round_trips_through_text(tmp_path):
    cfg = C.ExperimentConfig(**TINY, lambdas=[0.0, 0.4], literal_eq5_signs=True)
    C.write_config(tmp_path / "c.txt", cfg)
    assert C.load_config(tmp_path / "c.txt") == cfg


@pytest.mark.parametrize("text, match", [
    ("bogus=1\n", "unknown config keys"),
    ("lam=abc\n", "cannot parse"),
    ("lam=-1\n", "lam"),
    ("methods=finetune,sgd\n", "unknown method"),
    ("just a line\n", "key=value"),
    ("delta=2\n", "delta"),
])
def test_config_rejections(tmp_path, text, match):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(C.ConfigError, match=match):
        C.load_config(path)


def test_cli_flags_override_file(cfg_file, tmp_path):
    args = cli.build_parser().parse_args(
        ["train", "--config", str(cfg_file), "--lambda", "0.3", "--seed", "4", "--method", "emb",
         "--out", str(tmp_path / "o")])
    cfg = cli._config(args)
    assert cfg.lam == 0.3 and cfg.seeds == [4] and cfg.methods == ["emb"]
    assert cfg.n_source == 400


# --- commands ---------------------------------------------------------------

def test_emb_leaves_encoder_bytes_unchanged_end_to_end(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_file), "--method", "emb", "--seed", "0",
                     "--out", str(out)]) == 0
    assert cli.main(["pretrain", "--config", str(cfg_file), "--seed", "0", "--out", str(out)]) == 0
    assert (out / "config.txt").read_text().startswith("source_classes=")
    source = load_params(out / "source_model_s0.mkat")
    (cell,) = list((out / "cells").iterdir())
    warmed = load_params(cell / "stage1.mkat")
    final = load_params(cell / "checkpoint.mkat")
    for key in source.encoder:
        assert warmed.encoder[key].tobytes() == source.encoder[key].tobytes()
    assert not blocks_equal(final.encoder, source.encoder)


def test_emb_warmup_only_touches_embedder(cfg_file):
    from modalign.training import embedder_warmup, fresh_target_model

    cfg = C.load_config(cfg_file)
    bundle = X.prepare_source(cfg, 0)
    _, train, _ = X.target_split(cfg, bundle, cfg.delta, 0)
    init = fresh_target_model(bundle.model, train, 0)
    warm = embedder_warmup(init, train, cfg.train_config(method="emb"))
    assert blocks_equal(warm.encoder, bundle.model.encoder)
    assert blocks_equal(warm.predictor, init.predictor)


def test_report_rows_per_method_and_seed(cfg_file, tmp_path):
    out = tmp_path / "rep"
    seeds = "0,1,2,3,4"
    cfg = C.load_config(cfg_file, {"seeds": seeds, "out": str(out)})
    X.run_grid(cfg)
    assert cli.main(["report", str(out)]) == 0
    with (out / "report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    cells = [r for r in rows if r["kind"] == "cell"]
    assert len(cells) == 10
    assert {(r["method"], r["seed"]) for r in cells} == {(m, str(s)) for m in ("finetune", "mona")
                                                        for s in range(5)}
    for kind in ("mean", "sd"):
        assert sorted(r["method"] for r in rows if r["kind"] == kind) == ["finetune", "mona"]
    summary = json.loads((out / "summary.json").read_text())
    mean = next(r for r in summary["rows"] if r["kind"] == "mean" and r["method"] == "mona")
    vals = [float(r["target_test_error"]) for r in cells if r["method"] == "mona"]
    assert mean["target_test_error"] == pytest.approx(np.mean(vals))


def test_report_schema_mismatch(tmp_path):
    d = tmp_path / "cells" / "x"
    d.mkdir(parents=True)
    (d / "metrics.json").write_text(json.dumps({"schema": 99}))
    assert cli.main(["report", str(tmp_path)]) == 2


def test_synth_probe_and_discrepancy_commands(cfg_file, tmp_path, capsys):
    out = tmp_path / "s"
    args = ["--config", str(cfg_file), "--seed", "0", "--out", str(out)]
    assert cli.main(["synth", *args]) == 0
    assert cli.main(["pretrain", *args]) == 0
    ckpt = str(out / "source_model_s0.mkat")
    capsys.readouterr()
    assert cli.main(["probe", "--checkpoint", ckpt, "--data", str(out / "probe_s0.mkat")]) == 0
    row = json.loads(capsys.readouterr().out)
    assert 0 <= row["probe_error"] <= 0.2
    # target lives in a different raw space: asking for discrepancy directly is an error
    assert cli.main(["discrepancy", "--checkpoint", ckpt, "--data", str(out / "target_s0.mkat")]) == 2
    assert "input features" in capsys.readouterr().err
    capsys.readouterr()
    assert cli.main(["discrepancy", "--checkpoint", ckpt, "--data", str(out / "surrogate_s0.mkat"),
                     "--mode", "mc", "--trials", "50", "--out", str(out)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["mode"] == "mc" and rec["trials"] == 50
    assert json.loads((out / "discrepancy.json").read_text()) == rec


def test_command_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["probe", "--checkpoint", str(tmp_path / "none.mkat"),
                     "--data", str(tmp_path / "none.mkat")]) == 2
    assert "no such file" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["train", "--method", "nope"])


def test_commands_are_idempotent(cfg_file, tmp_path):
    out = tmp_path / "idem"
    args = ["train", "--config", str(cfg_file), "--seed", "1", "--method", "mona", "--out", str(out)]
    assert cli.main(args) == 0
    first = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert cli.main(args) == 0
    second = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second

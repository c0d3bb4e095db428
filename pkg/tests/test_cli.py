import io
import json
import subprocess
import sys

import pytest

from dsp.cli import main
from dsp.data import dump_sessions
from dsp.nn.checkpoint import save_checkpoint
from dsp.nn.train import TrainConfig, train
from dsp.nn.vocab import make_examples
from dsp.synth import SynthGrammar, generate_synthetic


@pytest.fixture
def synth_file(tmp_path):
    p = tmp_path / "s.jsonl"
    assert main(["synth", "-n", "20", "--seed", "3", "-o", str(p)]) == 0
    return p


def test_synth_deterministic(tmp_path, synth_file):
    other = tmp_path / "t.jsonl"
    main(["synth", "-n", "20", "--seed", "3", "-o", str(other)])
    assert other.read_bytes() == synth_file.read_bytes()


def test_synth_validates(synth_file, capsys):
    assert main(["validate", str(synth_file)]) == 0
    assert "20/20" in capsys.readouterr().out


def test_validate_malformed_line(tmp_path, synth_file, capsys):
    bad = tmp_path / "bad.jsonl"
    lines = synth_file.read_text().splitlines()
    lines.insert(2, '{"id": "x", "turns": [{"role": "user", "text": "a", "parse": "[IN:A a"}]}')
    bad.write_text("\n".join(lines) + "\n")
    assert main(["validate", str(bad)]) == 2
    assert f"{bad}:3:" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as info:
        main(["nope"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["convert", "--from", "flat"])
    assert info.value.code == 1


def test_convert_round_trip(tmp_path, capsys):
    top = tmp_path / "t.tsv"
    top.write_text("call John now\t[IN:CREATE_CALL [SL:METHOD call ] [SL:CONTACT John ] now ]\n")
    dec = tmp_path / "d.jsonl"
    assert main(["convert", "--from", "compositional", "--to", "decoupled", str(top), "-o", str(dec)]) == 0
    capsys.readouterr()
    assert main(["convert", "--from", "decoupled", "--to", "compositional", str(dec)]) == 0
    out = capsys.readouterr()
    assert out.out == top.read_text()
    assert json.loads(out.err.strip().splitlines()[-1])["not_recoverable"] == 0


def test_convert_counts_not_recoverable(tmp_path, capsys):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps({"id": "a", "turns": [
        {"role": "user", "text": "On Monday set an alarm for 8am",
         "parse": "[IN:CREATE_ALARM [SL:DATETIME 8am on Monday ] ]"}]}) + "\n")
    assert main(["convert", "--from", "decoupled", "--to", "compositional", str(p)]) == 0
    assert json.loads(capsys.readouterr().err.strip())["not_recoverable"] == 1


def test_eval_oracle_predictions(tmp_path, synth_file, capsys):
    report = tmp_path / "r.json"
    assert main(["eval", "--data", str(synth_file), "--predictions", str(synth_file), "--beam", "1",
                 "--json", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["beams"][0]["frame_acc"] == 1.0
    assert "Oracle@Beam" in capsys.readouterr().out


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    sessions = generate_synthetic(SynthGrammar(seed=3, max_turns=2), 20)
    dump_sessions(sessions, d / "train.jsonl")
    cfg = TrainConfig(emb_dim=16, hidden=16, layers=1, heads=2, epochs=2)
    res = train(make_examples(sessions), cfg)
    save_checkpoint(d / "m.ckpt", res.model, cfg)
    return d


def test_predict_and_eval_with_checkpoint(tiny_checkpoint, monkeypatch, capsys):
    ckpt = str(tiny_checkpoint / "m.ckpt")
    monkeypatch.setattr(sys, "stdin", io.StringIO("will it rain in boston\n"))
    assert main(["predict", "--checkpoint", ckpt]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("[IN:") and out.endswith("]")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tiny_checkpoint / "train.jsonl"),
                 "--beam", "1", "2"]) == 0


def test_train_command(tmp_path, synth_file):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"emb_dim": 8, "hidden": 8, "layers": 1, "heads": 2}))
    ckpt = tmp_path / "m.ckpt"
    hist = tmp_path / "h.json"
    assert main(["train", "--train", str(synth_file), "--config", str(cfg), "--epochs", "1",
                 "--checkpoint", str(ckpt), "--history", str(hist)]) == 0
    assert ckpt.exists() and len(json.loads(hist.read_text())) == 1


def test_gradcheck_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"emb_dim": 8, "hidden": 8, "layers": 1, "heads": 2}))
    assert main(["gradcheck", "--config", str(cfg)]) == 0
    # an impossible tolerance is a check failure
    assert main(["gradcheck", "--config", str(cfg), "--tol", "0"]) == 3


def test_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "dsp.cli", "synth", "-n", "1"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith('{"id"')


def test_missing_file_is_data_error():
    assert main(["validate", "/nonexistent/file.jsonl"]) == 2

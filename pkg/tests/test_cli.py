import json
import subprocess
import sys

import numpy as np
import pytest

from cdseunet.cli import build_parser, main, parse_config_text
from cdseunet.data_io import read_pgm, write_pgm
from cdseunet.edges import canny
from cdseunet.errors import ConfigError

COMMANDS = ["edges", "synth", "train", "eval", "predict", "ablate", "gradcheck"]

TINY_CONFIG = """\
# tiny model for quick runs
[model]
base_width = 4
input_size = 16
senet_reduction = 2

[train]
epochs = 2
seed = 3

[data]
train_fraction = 0.75
"""


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def last_line(text):
    return text.strip().splitlines()[-1]


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


@pytest.mark.parametrize("command", COMMANDS)
def test_help_documents_every_flag(command):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            assert action.help, f"{command} {action.option_strings} lacks help"


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "cdseunet", "--help"], capture_output=True, text=True)
    assert result.returncode == 0 and "gradcheck" in result.stdout


def test_edges_black_image(tmp_path, capsys):
    write_pgm(np.zeros((16, 16), np.uint8), tmp_path / "black.pgm")
    code, out, _ = run(["edges", "--input", str(tmp_path / "black.pgm"), "--out", str(tmp_path / "e.pgm")], capsys)
    assert code == 0
    line = last_line(out)
    assert line.startswith("edges ") and line.endswith(" OK")
    assert "edge_pixels=0" in line and "low=0.1" in line and "high=0.2" in line
    assert not read_pgm(tmp_path / "e.pgm").any()


def test_edges_matches_canny(tmp_path, capsys):
    img = np.random.default_rng(0).integers(0, 256, (24, 24), dtype=np.uint8)
    write_pgm(img, tmp_path / "r.pgm")
    code, out, _ = run(["edges", "--input", str(tmp_path / "r.pgm"), "--out", str(tmp_path / "e.pgm")], capsys)
    assert code == 0
    np.testing.assert_array_equal(read_pgm(tmp_path / "e.pgm") // 255, canny(img))
    assert f"edge_pixels={int(canny(img).sum())}" in out


def test_edges_prewitt(tmp_path, capsys):
    img = np.zeros((8, 8), np.uint8)
    img[:, 4:] = 255
    write_pgm(img, tmp_path / "s.pgm")
    code, out, _ = run(["edges", "--input", str(tmp_path / "s.pgm"), "--out", str(tmp_path / "e.pgm"),
                        "--operator", "prewitt", "--tfrac", "0.2"], capsys)
    assert code == 0 and "operator=prewitt" in out and "tfrac=0.2" in out and "edge_pixels=16" in out


def test_edges_parse_error_exit_2(tmp_path, capsys):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    code, out, err = run(["edges", "--input", str(tmp_path / "bad.pgm"), "--out", str(tmp_path / "e.pgm")], capsys)
    assert code == 2 and last_line(out).endswith("FAIL") and "error" in err


def test_edges_bad_tfrac_exit_2(tmp_path, capsys):
    write_pgm(np.zeros((8, 8), np.uint8), tmp_path / "z.pgm")
    code, _, _ = run(["edges", "--input", str(tmp_path / "z.pgm"), "--out", str(tmp_path / "e.pgm"),
                      "--operator", "sobel", "--tfrac", "1.5"], capsys)
    assert code == 2


def test_missing_input_exit_1(tmp_path, capsys):
    code, out, _ = run(["edges", "--input", str(tmp_path / "nope.pgm"), "--out", str(tmp_path / "e.pgm")], capsys)
    assert code == 1 and last_line(out).endswith("FAIL")


def test_unknown_flag_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 2


def test_config_parsing():
    cfg = parse_config_text(TINY_CONFIG + "\n[canny]\nsigma = 2.0\nrelative = off\n")
    assert cfg.train.model.base_width == 4 and cfg.train.epochs == 2 and cfg.data.train_fraction == 0.75
    assert cfg.train.edges.sigma == 2.0 and cfg.train.edges.relative is False
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("[model]\nwidth = 4\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[optim]\nlr = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[train]\nepochs = many\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("[train]\nmodel = x\n")


def test_readme_config_example_parses():
    import re
    from pathlib import Path

    readme = (Path(__file__).parents[1] / "README.md").read_text()
    block = re.search(r"```\n(\[model\].*?)```", readme, re.S).group(1)
    cfg = parse_config_text(block)
    assert cfg.train.model.base_width == 8 and cfg.train.model.fusion_variant == "double"
    assert cfg.train.edges.operator == "canny" and cfg.data.train_fraction == 0.9


def test_bad_config_exit_2(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[model]\nbogus = 1\n")
    code, out, _ = run(["train", "--data-dir", str(tmp_path), "--config", str(tmp_path / "c.ini"),
                        "--out-ckpt", str(tmp_path / "m.ckpt")], capsys)
    assert code == 2 and "FAIL" in out


def test_train_requires_data(tmp_path, capsys):
    code, _, err = run(["train", "--out-ckpt", str(tmp_path / "m.ckpt")], capsys)
    assert code == 2 and "--manifest" in err


def test_pipeline_smoke(tmp_path, capsys):
    data, cfg = tmp_path / "data", tmp_path / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    code, out, _ = run(["synth", "--out-dir", str(data), "--count", "4", "--size", "16", "--seed", "1"], capsys)
    assert code == 0 and last_line(out).endswith("OK")
    ckpt, log, report = tmp_path / "m.ckpt", tmp_path / "log.jsonl", tmp_path / "r.json"
    code, out, _ = run(["train", "--data-dir", str(data), "--config", str(cfg), "--out-ckpt", str(ckpt),
                        "--log", str(log)], capsys)
    assert code == 0 and "train=3" in out and "test=1" in out
    assert len(log.read_text().splitlines()) == 2
    code, out, _ = run(["eval", "--data-dir", str(data), "--config", str(cfg), "--ckpt", str(ckpt),
                        "--report", str(report)], capsys)
    assert code == 0 and last_line(out).endswith("OK")
    assert set(json.loads(report.read_text())) == {"accuracy", "precision", "recall", "dsc", "counts", "aggregation"}
    code, out, _ = run(["predict", "--image", str(data / "images" / "img_0000.pgm"), "--ckpt", str(ckpt),
                        "--out-mask", str(tmp_path / "p.pgm")], capsys)
    assert code == 0
    assert set(np.unique(read_pgm(tmp_path / "p.pgm"))) <= {0, 255}


def test_train_idempotent(tmp_path, capsys):
    data, cfg = tmp_path / "data", tmp_path / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    run(["synth", "--out-dir", str(data), "--count", "4", "--size", "16"], capsys)
    outs = []
    for name in ("a", "b"):
        run(["train", "--data-dir", str(data), "--config", str(cfg), "--out-ckpt", str(tmp_path / f"{name}.ckpt"),
             "--log", str(tmp_path / f"{name}.jsonl")], capsys)
        outs.append(((tmp_path / f"{name}.ckpt").read_bytes(), (tmp_path / f"{name}.jsonl").read_bytes()))
    assert outs[0] == outs[1]


def test_predict_wrong_size_exit_1(tmp_path, capsys):
    data, cfg = tmp_path / "data", tmp_path / "tiny.ini"
    cfg.write_text(TINY_CONFIG.replace("epochs = 2", "epochs = 1"))
    run(["synth", "--out-dir", str(data), "--count", "4", "--size", "16"], capsys)
    run(["train", "--data-dir", str(data), "--config", str(cfg), "--out-ckpt", str(tmp_path / "m.ckpt")], capsys)
    write_pgm(np.zeros((32, 32), np.uint8), tmp_path / "big.pgm")
    code, _, _ = run(["predict", "--image", str(tmp_path / "big.pgm"), "--ckpt", str(tmp_path / "m.ckpt"),
                      "--out-mask", str(tmp_path / "p.pgm")], capsys)
    assert code == 1


def test_corrupt_checkpoint_exit_1(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    write_pgm(np.zeros((16, 16), np.uint8), tmp_path / "i.pgm")
    code, _, _ = run(["predict", "--image", str(tmp_path / "i.pgm"), "--ckpt", str(tmp_path / "bad.ckpt"),
                      "--out-mask", str(tmp_path / "p.pgm")], capsys)
    assert code == 1


def test_gradcheck_command(capsys):
    code, out, _ = run(["gradcheck", "--seed", "1"], capsys)
    assert code == 0
    assert last_line(out).startswith("gradcheck seed=1") and last_line(out).endswith("OK")
    assert "FAIL " not in out

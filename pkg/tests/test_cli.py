from pathlib import Path

import numpy as np
import pytest

from lkreg.cli import main, parse_extents
from lkreg.errors import ConfigError
from lkreg.io import read_tns, write_tns

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TRAIN_CFG = """[train]
iterations = 3
seed = 1

[net]
dims = 2
C = 2
k = 5
levels = 3
lk_block_count = 2

[loss]
ncc_window = 5
"""


def test_analyze_unet4(tmp_path, capsys):
    assert main(["analyze", "--net-config", str(CONFIGS / "unet4.net"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "279086, 58.73 G"
    assert "receptive field: 157x157x157" in out
    assert (tmp_path / "complexity.csv").read_text().startswith("layer,kind,")


def test_analyze_lku85(tmp_path, capsys):
    assert main(["analyze", "--net-config", str(CONFIGS / "lkunet8_5.net"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "2086342, 272.09 G"


def test_analyze_doubled_extents(tmp_path, capsys):
    main(["analyze", "--net-config", str(CONFIGS / "unet4.net"), "--extents", "80x96x112", "--out", str(tmp_path)])
    small = capsys.readouterr().out
    main(["analyze", "--net-config", str(CONFIGS / "unet4.net"), "--extents", "160x192x224", "--out", str(tmp_path)])
    big = capsys.readouterr().out

    def raw(text):
        line = next(l for l in text.splitlines() if l.startswith("mult-adds (raw)"))
        return int(line.split(":")[1])

    assert raw(big) == 8 * raw(small)
    assert small.split(",")[0] == big.split(",")[0]


def test_parse_extents():
    assert parse_extents("160x192x224") == (160, 192, 224)
    for bad in ("160x", "0x4", "1x2x3x4", "axb"):
        with pytest.raises(ConfigError):
            parse_extents(bad)


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.net"
    bad.write_text("k=4\n")
    assert main(["analyze", "--net-config", str(bad)]) == 2
    assert main(["analyze", "--net-config", str(tmp_path / "missing.net")]) == 2
    assert main(["analyze", "--net-config", str(CONFIGS / "unet4.net"), "--extents", "64x64"]) == 2
    assert "config error" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 3


def _synth(tmp_path, count=2, extents="32x32"):
    d = tmp_path / "data"
    assert main(["synth", "--count", str(count), "--extents", extents, "--max-disp", "3", "--seed", "4",
                 "--out", str(d)]) == 0
    return d


def test_numerical_error_exit_code(tmp_path):
    d = _synth(tmp_path)
    mov = d / "pair_0000" / "moving.tns"
    arr = read_tns(mov)
    arr[0, 0, 5, 5] = np.nan
    write_tns(mov, arr)
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TRAIN_CFG)
    code = main(["train", "--config", str(cfg), "--data", str(d), "--out", str(tmp_path / "r"), "--sequential"])
    assert code == 4
    assert (tmp_path / "r" / "last_good").is_dir()


def test_end_to_end(tmp_path, capsys):
    d = _synth(tmp_path)
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TRAIN_CFG)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(d), "--iters", "4", "--checkpoint-every", "2",
                 "--out", str(run), "--sequential"]) == 0
    assert "trained 4 iterations" in capsys.readouterr().out
    assert sorted(p.name for p in run.iterdir() if p.is_dir()) == ["ckpt_000002", "ckpt_000004", "final"]
    assert len((run / "loss_log.csv").read_text().splitlines()) == 5

    pair = d / "pair_0001"
    assert main(["register", "--fixed", str(pair / "fixed.tns"), "--moving", str(pair / "moving.tns"),
                 "--checkpoint", str(run / "final"), "--out", str(tmp_path / "reg")]) == 0
    out = capsys.readouterr().out
    assert "fold_fraction" in out and "runtime" in out
    assert read_tns(tmp_path / "reg" / "disp.tns").shape == (1, 2, 32, 32)

    csv_path = tmp_path / "m.csv"
    assert main(["evaluate", "--data", str(d), "--checkpoint", str(run / "final"), "--metrics-csv", str(csv_path),
                 "--out", str(tmp_path / "ev"), "--quiver-stride", "8"]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("pair_id,dice_mean,dice_1,")
    assert len(lines) == 3
    assert len((tmp_path / "ev" / "quiver.txt").read_text().splitlines()) == 1 + 16


def test_register_diffeomorphic_prints_zero_folds(tmp_path, capsys):
    d = _synth(tmp_path, count=1)
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TRAIN_CFG.replace("lk_block_count = 2", "lk_block_count = 2\ndiffeomorphic = true"))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(d), "--out", str(run), "--sequential"]) == 0
    pair = d / "pair_0000"
    assert main(["register", "--fixed", str(pair / "fixed.tns"), "--moving", str(pair / "moving.tns"),
                 "--checkpoint", str(run / "final"), "--out", str(tmp_path / "reg")]) == 0
    assert "fold_fraction 0.000000 %" in capsys.readouterr().out

import numpy as np
import pytest

from deepregionlets.cli import EXIT_OK, EXIT_USAGE, main
from deepregionlets.tensorfile import read_tensor

TINY_CFG = """\
grid_rows = 1
grid_cols = 2
H = 2
W = 2
backbone_channels = 2
roi_pool_size = 2
head_hidden = 6
epochs = 1
train_scenes = 6
test_scenes = 4
proposals_per_scene = 4
batch_scenes = 2
"""


def test_dumpgrid_identity_is_lattice(tmp_path):
    out = tmp_path / "g.rglt"
    assert main(["dumpgrid", "--theta", "1,0,0,0,1,0,0,0", "--roi", "0,0,5,5",
                 "--hw", "5x5", "--out", str(out)]) == EXIT_OK
    g = read_tensor(out)
    assert g.shape == (5, 5, 2) and g.dtype == np.float64
    xx, yy = np.meshgrid(np.arange(5.0), np.arange(5.0))
    assert np.array_equal(g[..., 0], xx) and np.array_equal(g[..., 1], yy)


def test_dumpgrid_top_left_cell_stays_in_top_left_ninth(tmp_path):
    out = tmp_path / "g.rglt"
    theta = f"{1/3!r},0,{-2/3!r},0,{1/3!r},{2/3!r},0,0"
    assert main(["dumpgrid", "--theta", theta, "--roi", "0,0,10,10", "--hw", "4x6",
                 "--out", str(out)]) == EXIT_OK
    g = read_tensor(out)
    third = (10 - 1) / 3
    assert np.all((g >= -1e-12) & (g <= third + 1e-12))


@pytest.mark.parametrize("argv", [
    ["dumpgrid", "--theta", "1,0,x", "--roi", "0,0,5,5", "--hw", "5x5"],
    ["dumpgrid", "--theta", "1,0,0,0,1,0,0,0", "--roi", "0,0,-5,5", "--hw", "5x5"],
    ["dumpgrid", "--theta", "1,0,0,0,1,0,0,0", "--roi", "0,0,5,5", "--hw", "5by5"],
    ["dumpgrid", "--theta", "1,0,0,0,1,0,0,nan", "--roi", "0,0,5,5", "--hw", "5x5"],
    ["gradcheck", "--precision", "f16"],
    ["gradcheck", "--cases", "0"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_2(argv, tmp_path):
    if argv and argv[0] == "dumpgrid":
        argv = argv + ["--out", str(tmp_path / "g.rglt")]
    assert main(argv) == EXIT_USAGE


def test_gradcheck_prints_one_line_per_op(capsys):
    assert main(["gradcheck", "--cases", "1", "--seed", "7"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    ops = [ln.split()[1] for ln in lines[:-1]]
    assert len(ops) == len(set(ops)) == 11
    assert all(ln.startswith("PASS") for ln in lines[:-1])
    assert "sampler.theta" in ops and "regionlet.stack.max" in ops


def test_gradcheck_f32(capsys):
    assert main(["gradcheck", "--cases", "2", "--precision", "f32"]) == EXIT_OK
    assert "tol=1e-02" in capsys.readouterr().out


def test_train_writes_artifacts(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    text = (out / "report.txt").read_text()
    assert "final_accuracy" in text and "config.grid_cols = 2" in text
    curve = read_tensor(out / "loss_curve.rglt")
    assert curve.shape == (3,) and np.all(np.isfinite(curve))
    assert read_tensor(out / "metrics.rglt").shape == (3,)
    assert read_tensor(out / "params" / "rsn01.w1.rglt").shape == (8, 256)


def test_train_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "unknown key" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg"),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_ablation_table(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert main(["ablation", "--config", str(cfg), "--out", str(tmp_path / "ab")]) == EXIT_OK
    table = (tmp_path / "ab" / "ablation.txt").read_text().strip().splitlines()
    assert [row.split()[0] for row in table[1:]] == ["global", "offset_only", "non_gating", "full"]
    assert table[0].split()[0] == "variant"

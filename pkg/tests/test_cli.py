import json
import subprocess
import sys

import numpy as np
import pytest

from tpsreg import pipeline
from tpsreg.cli import main
from tpsreg.segment import read_mask
from tpsreg.volume import read_metaimage, read_metaimage_array


@pytest.fixture(scope="module")
def cli_init(small_case, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_init")
    assert main(["init", "--config", str(small_case), "--output-dir", str(out)]) == 0
    return out


def test_init_via_cli(cli_init, capsys):
    assert (cli_init / "field_init.mhd").is_file()
    assert json.loads((cli_init / "timing.json").read_text())["tps_fit"] > 0


def test_stage_commands_reproduce_init(cli_init, tmp_path):
    """Feeding persisted intermediates back through the stage commands gives the same bytes."""
    out = cli_init
    names = ["brainstem", "parotid_l", "parotid_r", "mandible_body", "bone", "envelope"]
    # meshes from the persisted masks
    for name in ("brainstem", "bone"):
        for side in ("moving", "fixed"):
            assert main(["mesh", "--mask", str(out / "masks" / side / f"{name}.mhd"),
                         "--out", str(tmp_path / f"{side}_{name}.ply")]) == 0
            assert (tmp_path / f"{side}_{name}.ply").read_bytes() == \
                (out / "meshes" / side / f"{name}.ply").read_bytes()
    # correspondences from the persisted meshes
    pairs = []
    for name in names:
        pairs += ["--pair", str(out / "meshes" / "moving" / f"{name}.ply"),
                  str(out / "meshes" / "fixed" / f"{name}.ply")]
    assert main(["correspond", *pairs, "--out", str(tmp_path / "corr.csv")]) == 0
    assert (tmp_path / "corr.csv").read_bytes() == (out / "correspondences.csv").read_bytes()
    # fit + field from the persisted correspondences
    assert main(["tps-fit", "--correspondences", str(out / "correspondences.csv"), "--out", str(tmp_path / "m.tps"),
                 "--controls-out", str(tmp_path / "cp.csv"), "--grid", str(out / "moving.mhd"),
                 "--field", str(tmp_path / "field.mhd")]) == 0
    assert (tmp_path / "m.tps").read_bytes() == (out / "tps_model.tps").read_bytes()
    assert (tmp_path / "cp.csv").read_bytes() == (out / "control_points.csv").read_bytes()
    assert (tmp_path / "field.raw").read_bytes() == (out / "field_init.raw").read_bytes()
    # warp from the persisted field
    assert main(["warp", "--field", str(out / "field_init.mhd"), "--image", str(out / "fixed.mhd"),
                 "--out", str(tmp_path / "w.mhd")]) == 0
    assert (tmp_path / "w.raw").read_bytes() == (out / "warped_init.raw").read_bytes()
    assert main(["warp", "--mask", "--field", str(out / "field_init.mhd"),
                 "--image", str(out / "masks" / "fixed" / "parotid_l.mhd"), "--out", str(tmp_path / "p.mhd")]) == 0
    assert np.array_equal(read_mask(tmp_path / "p.mhd").bits,
                          read_mask(out / "warped_masks" / "init" / "parotid_l.mhd").bits)


def test_segment_command(cli_init, tmp_path):
    assert main(["segment", "--volume", str(cli_init / "fixed.mhd"), "--out-dir", str(tmp_path)]) == 0
    for name in ("envelope", "bone"):
        assert np.array_equal(read_mask(tmp_path / f"{name}.mhd").bits,
                              read_mask(cli_init / "masks" / "fixed" / f"{name}.mhd").bits)


def test_warp_nearest_keeps_dtype(cli_init, tmp_path):
    assert main(["warp", "--nearest", "--field", str(cli_init / "field_init.mhd"),
                 "--image", str(cli_init / "fixed.mhd"), "--out", str(tmp_path / "n.mhd")]) == 0
    assert read_metaimage(tmp_path / "n.mhd").values.dtype == read_metaimage(cli_init / "fixed.mhd").values.dtype


def test_register_evaluate_report(small_case, tmp_path, capsys):
    for i in range(5):
        assert main(["register", "--config", str(small_case), "--output-dir", str(tmp_path / "runs" / f"p{i}"),
                     "--set", "tps.max_controls=" + str(400 + 100 * i)]) == 0
    assert main(["evaluate", "--results", str(tmp_path / "runs"), "--baseline", str(tmp_path / "runs"),
                 "--pipeline", "init", "--baseline-pipeline", "rigid", "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert rep["n_tests"] == 6 and len(rep["rows"]) == 6
    capsys.readouterr()
    assert main(["report", str(tmp_path / "runs"), str(tmp_path / "ev")]) == 0
    text = capsys.readouterr().out
    assert "init vs rigid" in text and "mean" in text


def test_phantom_command(tmp_path):
    assert main(["phantom", "--out-dir", str(tmp_path), "--dims", "24,48,64", "--spacing", "4,4,4",
                 "--organs", "2"]) == 0
    cfg = pipeline.load_config(tmp_path / "config.toml")
    assert [s.name for s in cfg.structures] == ["brainstem", "parotid_l"]
    g, _, _ = read_metaimage_array(tmp_path / "fixed.mhd")
    assert g.dims == (24, 48, 64)


def test_config_error_exit_code(small_case, tmp_path, capsys):
    assert main(["init", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["init", "--config", str(small_case), "--set", "tps.lambda=-3"]) == 2
    assert main(["mesh", "--mask", str(tmp_path / "missing.mhd"), "--out", str(tmp_path / "x.ply")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["tps-fit"])
    assert exc.value.code == 2


def test_stage_failure_exit_code(small_case, tmp_path, capsys):
    # a readable volume whose grid does not match the structure masks
    bad = tmp_path / "bad.mhd"
    bad.write_text("NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = bad.raw\n")
    (tmp_path / "bad.raw").write_bytes(b"\0" * 16)
    code = main(["init", "--config", str(small_case), "--set", f'fixed="{bad}"',
                 "--output-dir", str(tmp_path / "out")])
    assert code == 3 and "stage failed: preprocess" in capsys.readouterr().err


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "tpsreg.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("segment", "mesh", "correspond", "tps-fit", "warp", "init", "register", "evaluate", "report"):
        assert cmd in r.stdout

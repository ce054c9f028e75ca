import json
import shutil

import numpy as np
import pytest

from dpm import pipeline
from dpm.cli import EXIT_CONFIG, EXIT_NUMERICAL, main
from dpm.config import parse_config
from dpm.io import read_snapshot
from dpm.network import load_model

TINY = """
[grid]
dns_n = 16
[physics]
peak_wavenumber = 3
[cases]
train = 1.0
test = 1.5
heldout = 1.5
[dns]
duration = 0.6
[filter]
ratio = 2
[model]
hidden = 2
derivative_set = paper_text
[training]
iterations = 3
window_steps = 2
apriori_iterations = 5
checkpoint_every = 2
[evaluation]
closures = no_model, smagorinsky, dpm, dpm_nodiv, dpm_apriori
spectrum_every = 2
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    base = ["--config", str(cfg), "--out", str(root / "out")]
    assert main(["dns", *base]) == 0
    assert main(["filter", *base]) == 0
    assert main(["train", *base]) == 0
    assert main(["train", *base, "--divfree", "off"]) == 0
    assert main(["train", *base, "--mode", "apriori"]) == 0
    assert main(["les", *base, "--closure", "smagorinsky"]) == 0
    assert main(["compare", *base]) == 0
    return root, base


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error code=")
    return err


class TestStages:
    def test_artifacts(self, run_dir):
        root, _ = run_dir
        out = root / "out"
        assert sorted(p.name for p in (out / "models").iterdir()) == ["dpm.dpmm", "dpm_apriori.dpmm",
                                                                        "dpm_nodiv.dpmm"]
        assert (out / "checkpoints" / "dpm.dpmc").is_file()
        summary = json.loads((out / "compare" / "summary.json").read_text())
        rows = summary["cases"]["mu1p500"]
        assert set(rows) == {"no_model", "smagorinsky", "dpm", "dpm_nodiv", "dpm_apriori"}
        assert rows["dpm_nodiv"]["reference"] == "unprojected"
        assert (out / "les" / "smagorinsky" / "decay.csv").is_file()
        assert "window_loss" in (out / "compare" / "report.txt").read_text()

    def test_dns_snapshot_reload(self, run_dir):
        root, _ = run_dir
        files = sorted((root / "out" / "dns" / "mu1p000").glob("*.dpms"))
        snap = read_snapshot(files[0])
        assert snap.kind == "dns" and snap.grid.n == 16
        assert snap.to_bytes() == files[0].read_bytes()
        targets = read_snapshot(root / "out" / "targets" / "mu1p000" / files[0].name)
        assert set(targets.arrays) == {"U_bar", "w", "sgs_forcing"}

    def test_model_metadata(self, run_dir):
        root, _ = run_dir
        m = load_model(root / "out" / "models" / "dpm.dpmm")
        assert m.params.dims == (147, 2, 18)

    def test_rerun_is_bitwise(self, run_dir, tmp_path):
        root, base = run_dir
        other = ["--config", base[1], "--out", str(tmp_path)]
        for argv in (["dns"], ["filter"], ["train"]):
            assert main(argv + other) == 0
        for rel in ("dns/mu1p500/snap_00002.dpms", "targets/mu1p000/snap_00001.dpms", "models/dpm.dpmm",
                    "checkpoints/dpm.dpmc"):
            assert (tmp_path / rel).read_bytes() == (root / "out" / rel).read_bytes(), rel

    def test_resume(self, run_dir, tmp_path):
        root, base = run_dir
        text = TINY.replace("iterations = 3", "iterations = 5")
        cfg = tmp_path / "longer.ini"
        cfg.write_text(text)
        shutil.copytree(root / "out", tmp_path / "out")
        argv = ["train", "--config", str(cfg), "--out", str(tmp_path / "out"), "--resume"]
        assert main(argv) == 0
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "fresh")]) == 2  # no data there
        resumed = load_model(tmp_path / "out" / "models" / "dpm.dpmm")
        c = parse_config(text)
        straight, _ = pipeline.train_model(c, pipeline.load_cases(c, "train", tmp_path / "out"), "adjoint", True)
        assert np.array_equal(resumed.theta, straight.theta)

    def test_diagnose(self, run_dir, capsys, tmp_path):
        root, _ = run_dir
        snap = next((root / "out" / "dns" / "mu1p000").glob("*.dpms"))
        assert main(["diagnose", "--snapshot", str(snap), "--ratios", "2,4", "--explicit", "4,2",
                     "--csv", str(tmp_path / "t.csv")]) == 0
        out = capsys.readouterr().out
        assert "delta_ratio" in out and "explicit" in out
        assert (tmp_path / "t.csv").is_file()


class TestErrors:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[grid]\nsize = 3\n")
        assert main(["dns", "--config", str(cfg)]) == EXIT_CONFIG
        line = error_line(capsys)
        assert "kind=config" in line and "'size'" in line

    def test_missing_inputs(self, tmp_path, capsys):
        assert main(["filter", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "kind=data" in error_line(capsys)
        assert main(["diagnose", "--snapshot", str(tmp_path / "none.dpms")]) == EXIT_CONFIG

    def test_bad_ratio(self, run_dir, capsys):
        root, _ = run_dir
        snap = next((root / "out" / "dns" / "mu1p000").glob("*.dpms"))
        assert main(["diagnose", "--snapshot", str(snap), "--ratios", "3"]) == EXIT_CONFIG
        assert main(["diagnose", "--snapshot", str(snap), "--explicit", "4"]) == EXIT_CONFIG

    def test_usage(self, capsys):
        assert main(["nonsense"]) == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_data_hash_mismatch(self, run_dir, tmp_path, capsys):
        root, base = run_dir
        cfg = tmp_path / "other.ini"
        cfg.write_text(TINY.replace("duration = 0.6", "duration = 0.7"))
        assert main(["filter", "--config", str(cfg), "--out", str(root / "out")]) == EXIT_CONFIG
        assert "data config" in error_line(capsys)

    def test_blowup_is_numerical(self, tmp_path, capsys):
        cfg = tmp_path / "hot.ini"
        cfg.write_text(TINY + "[les]\nblowup_factor = 0.5\n")
        assert main(["dns", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_NUMERICAL
        assert "kind=blowup" in error_line(capsys)


class TestGradcheck:
    def test_burgers(self, capsys):
        assert main(["gradcheck", "--burgers"]) == 0
        out = capsys.readouterr().out
        best = float(out.split("best_rel_error=")[1].split()[0])
        assert best <= 1e-9

    def test_les3d(self, capsys):
        assert main(["gradcheck", "--les3d"]) == 0
        assert "transpose" in capsys.readouterr().out

    def test_alias(self):
        assert main(["burgers-gradcheck"]) == 0

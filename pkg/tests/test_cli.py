import json
import subprocess
import sys

import pytest

from invoxel import trainer as T
from invoxel.cli import main

SMALL = dict(V=4, R=4, iters=5, depth=2, width=16, skip=1, color_width=8, pos_freqs=2,
             dir_freqs=1, cvt_pos_freqs=2, n_coarse=8, n_fine=8, S=4, P=3, num_blocks=1,
             log_every=0, toy={"H": 16, "W": 16, "test_views": 2})


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(T.toy_config(**SMALL).to_json())
    return p


def run(*args):
    return subprocess.run([sys.executable, "-m", "invoxel.cli", *map(str, args)],
                          capture_output=True, text=True, timeout=600)


def test_train_twice_same_losses(tmp_path, config):
    for name in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "losses.csv").read_text()
    assert a == (tmp_path / "b" / "losses.csv").read_text()
    assert len(a.splitlines()) == 6
    assert T.load_checkpoint(tmp_path / "a" / "final.bin").iteration == 5


def test_flag_implications(tmp_path, config):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r"),
                 "--no-voxel-sampling", "--iters", "2"]) == 0
    cfg = T.TrainConfig.from_json_file(tmp_path / "r" / "config.json")
    assert not (cfg.voxel_sampling_enabled or cfg.cvt_enabled or cfg.contrastive_enabled)
    assert cfg.iters == 2


def test_eval_ground_truth_against_itself(tmp_path, config):
    data = tmp_path / "toy"
    assert main(["make-toy", "--config", str(config), "--out", str(data)]) == 0
    cfg = json.loads(config.read_text())
    cfg["data"] = str(data)
    (tmp_path / "d.json").write_text(json.dumps(cfg))
    out = tmp_path / "m.json"
    assert main(["eval", "--pred", str(data / "test"), "--config", str(tmp_path / "d.json"),
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["mean_psnr"] == 99.0 and rep["mean_ssim"] == pytest.approx(1.0)
    assert len(rep["views"]) == 2


def test_render_eval_and_export_from_checkpoint(tmp_path, config):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r")]) == 0
    ck = tmp_path / "r" / "final.bin"
    assert main(["render", "--ckpt", str(ck), "--out", str(tmp_path / "png")]) == 0
    assert len(list((tmp_path / "png").glob("*.png"))) == 2
    assert main(["eval", "--ckpt", str(ck), "--out", str(tmp_path / "m.json")]) == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    assert rep["iteration"] == 5 and rep["config_digest"] == T.toy_config(**SMALL).digest().hex()
    assert main(["export-cloud", "--ckpt", str(ck), "--out", str(tmp_path / "c.ply"),
                 "--threshold", "0"]) == 0
    lines = (tmp_path / "c.ply").read_text().splitlines()
    n = int(lines[2].split()[-1])
    assert n == 2 * 16 * 16 * 16            # every fine sample kept at threshold 0
    assert len(lines) == lines.index("end_header") + 1 + n


def test_usage_and_input_errors(tmp_path):
    r = run("train", "--bogus-flag")
    assert r.returncode == 2 and "unrecognized arguments" in r.stderr
    bad = tmp_path / "bad.json"
    bad.write_text('{"V": 4, "warp": 9}')
    r = run("train", "--config", bad, "--out", tmp_path / "x")
    assert r.returncode == 1 and "unknown config keys" in r.stderr
    r = run("eval", "--ckpt", tmp_path / "missing.bin")
    assert r.returncode == 1 and "missing.bin" in r.stderr

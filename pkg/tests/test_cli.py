import json
import math

import numpy as np
import pytest

from fetomosaic.cli import main
from fetomosaic.config import PipelineConfig, dump_config, load_config
from fetomosaic.errors import ConfigError
from fetomosaic.imaging import load_png, save_png
from fetomosaic.registration import load_trace


def test_config_defaults_and_round_trip(tmp_path):
    cfg = load_config()
    assert cfg == PipelineConfig()
    assert cfg.filter.max_abs_theta == pytest.approx(math.radians(15))
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(str(tmp_path / "c.ini")) == cfg


def test_config_overrides(tmp_path):
    (tmp_path / "c.ini").write_text("[ransac]\nseed = 7\n\n[eval.ssim]\nmode = global\n\n[pipeline]\nmax_skip = 3\n")
    cfg = load_config(str(tmp_path / "c.ini"), {"ransac.seed": "9", "fusion.pyramid_levels": "4",
                                                "synth.path.smoothing": "0.5"})
    assert cfg.ransac.seed == 9 and cfg.eval.ssim.mode == "global" and cfg.max_skip == 3
    assert cfg.fusion.pyramid_levels == 4 and cfg.synth.path.smoothing == 0.5
    assert load_config(None, {"fusion.pyramid_levels": "auto"}).fusion.pyramid_levels is None
    again = load_config(None, {"lm.huber": "yes"})
    assert again.lm.huber is True
    reg = cfg.registration()
    assert reg.max_skip == 3 and reg.ransac.seed == 9


@pytest.mark.parametrize("overrides", [
    {"nosuch.key": "1"},
    {"ransac.nosuch": "1"},
    {"ransac.seed": "abc"},
    {"ransac.min_inliers": "2"},
    {"filter.scale_min": "1.5"},
    {"lm.huber": "maybe"},
    {"eval.ssim.window": "10"},
])
def test_config_errors(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.ini"))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "4", "--set", "synth.frames=8"]) == 0
    return out


def test_synth_outputs(synth_dir):
    assert len(list((synth_dir / "frames").glob("*.png"))) == 8
    assert (synth_dir / "fov.png").is_file() and (synth_dir / "gt_trace.json").is_file()
    assert load_config(str(synth_dir / "effective_config.ini")).synth.seed == 4


def test_run_clean(synth_dir, tmp_path, capsys):
    code = main(["run", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path)])
    assert code == 0
    trace = load_trace(tmp_path / "trace.json")
    assert len(trace.accepted()) == 7 and trace.terminated_at is None
    for name in ["mosaic.png", "coverage.png", "layout.json", "metrics.csv", "aggregates.json", "quantiles.csv",
                 "gt_corner_error.csv", "effective_config.ini", "fusion_stats.json"]:
        assert (tmp_path / name).is_file(), name
    stats = json.loads((tmp_path / "fusion_stats.json").read_text())
    assert abs(stats["weight_sum_min"] - 1) < 1e-6 and abs(stats["weight_sum_max"] - 1) < 1e-6
    err = [float(r.split(",")[1]) for r in (tmp_path / "gt_corner_error.csv").read_text().splitlines()[1:]]
    assert len(err) == 8 and err[0] == 0.0 and max(err) < 1.0
    agg = json.loads((tmp_path / "aggregates.json").read_text())
    assert [a["n"] for a in agg] == [1, 2, 3, 4, 5]
    out = capsys.readouterr().out
    assert "accepted 7 of 7" in out and "gt_corner_error final" in out


def test_run_terminated(synth_dir, tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    for p in sorted((synth_dir / "frames").glob("*.png")):
        img = load_png(p)
        if p.stem in {f"{k:06d}" for k in range(2, 7)}:
            img = np.zeros_like(img)
        save_png(frames / p.name, img)
    code = main(["register", "--frames", str(frames), "--out", str(tmp_path / "out"),
                 "--fov", str(synth_dir / "fov.png")])
    assert code == 3
    assert load_trace(tmp_path / "out" / "trace.json").terminated_at == 1
    assert "terminated_at 1" in capsys.readouterr().out


def test_usage_errors(tmp_path, synth_dir):
    assert main(["run", "--frames", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path / "o"),
                 "--set", "ransac.min_inliers=1"]) == 2
    assert main(["run", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path / "o"),
                 "--set", "garbage"]) == 2
    assert main(["mosaic", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path / "o"),
                 "--trace", str(tmp_path / "none.json")]) == 2
    (tmp_path / "bad.json").write_text("{}")
    assert main(["eval", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path / "o"),
                 "--trace", str(tmp_path / "bad.json")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path / "o"), "--n", "9",
              "--trace", "x"])
    assert exc.value.code == 2


def test_detect_register_mosaic_eval(synth_dir, tmp_path):
    frames = str(synth_dir / "frames")
    assert main(["detect", "--frames", frames, "--out", str(tmp_path / "kp")]) == 0
    assert len(list((tmp_path / "kp").glob("*.json"))) == 8
    assert main(["register", "--frames", frames, "--keypoints", str(tmp_path / "kp"),
                 "--out", str(tmp_path / "r1")]) == 0
    assert main(["register", "--frames", frames, "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1" / "trace.json").read_bytes() == (tmp_path / "r2" / "trace.json").read_bytes()
    trace = str(tmp_path / "r1" / "trace.json")
    assert main(["mosaic", "--frames", frames, "--trace", trace, "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "mosaic.png").is_file()
    assert main(["eval", "--frames", frames, "--trace", trace, "--n", "2", "--no-identity-substitution",
                 "--out", str(tmp_path / "e")]) == 0
    rows = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 6 and all(r.split(",")[1] == "2" for r in rows[1:])
    assert load_config(str(tmp_path / "e" / "effective_config.ini")).eval.identity_substitution is False


def test_masks_flag(synth_dir, tmp_path):
    code = main(["register", "--frames", str(synth_dir / "frames"), "--masks", str(synth_dir / "masks"),
                 "--out", str(tmp_path)])
    assert code == 0


def test_log_env(synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("MOSAIC_LOG", "debug")
    assert main(["register", "--frames", str(synth_dir / "frames"), "--out", str(tmp_path)]) == 0


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "fetomosaic", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout

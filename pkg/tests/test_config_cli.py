import numpy as np
import pytest
import yaml

from splatslam.cli import EXIT_CONFIG, EXIT_DATASET, EXIT_OK, main
from splatslam.config import ConfigError, RunConfig, config_from_dict, load_config
from splatslam.datasets import Trajectory, load_tum_rgbd
from splatslam.slam import read_metrics

SMALL = {
    "synthetic": {"scene": {"n_gaussians": 400, "width": 32, "height": 24},
                  "trajectory": {"n_frames": 3}},
    "mapper": {"iterations": 4},
    "tracker": {"iterations": 3},
}


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def test_round_trip():
    c = RunConfig()
    assert config_from_dict(c.to_dict()) == c
    assert config_from_dict(yaml.safe_load(c.dump())) == c


def test_partial_override(small_cfg):
    c = load_config(small_cfg)
    assert c.mapper.iterations == 4 and c.synthetic.scene.width == 32
    assert c.tracker.lr_t == RunConfig().tracker.lr_t
    assert isinstance(c.synthetic.scene.room_half_extent, tuple)


@pytest.mark.parametrize("bad", [
    {"mapper": {"iteratons": 3}},
    {"dataset": {"kind": "kitti"}},
    {"tracker": {"iterations": "many"}},
    {"dataset": {"downscale": 0}},
    {"nonsense": 1},
])
def test_bad_configs(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_print_config(capsys):
    assert main(["print-config"]) == EXIT_OK
    assert config_from_dict(yaml.safe_load(capsys.readouterr().out)) == RunConfig()


def test_usage_errors():
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["run", "--bogus"]) == EXIT_CONFIG
    assert main(["synth"]) == EXIT_CONFIG


def test_config_error_exit(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("mapper: {iteratons: 3}\n")
    assert main(["run", "--config", str(p)]) == EXIT_CONFIG
    assert main(["print-config", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_dataset_error_exit(tmp_path):
    assert main(["run", "--dataset", str(tmp_path / "nowhere")]) == EXIT_DATASET
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "rgb.txt").write_text("")
    assert main(["run", "--dataset", str(tmp_path / "empty")]) == EXIT_DATASET


def test_synth_run_eval_render(tmp_path, small_cfg):
    data, run, views = tmp_path / "data", tmp_path / "run", tmp_path / "views"
    assert main(["synth", "--config", str(small_cfg), "--output", str(data), "--seed", "4"]) == EXIT_OK
    assert len(load_tum_rgbd(data)) == 3
    cam = (data / "camera.txt").read_text().strip()
    cfg = dict(SMALL, dataset={"camera": cam})
    (tmp_path / "tum.yaml").write_text(yaml.safe_dump(cfg))
    rc = main(["run", "--config", str(tmp_path / "tum.yaml"), "--dataset", str(data),
               "--output", str(run), "--max-frames", "3"])
    assert rc == EXIT_OK
    for name in ("config.yaml", "frames.csv", "trajectory.txt", "groundtruth.txt", "map.gsmp", "metrics.txt"):
        assert (run / name).is_file(), name
    assert len(Trajectory.load_tum(run / "trajectory.txt")) == 3
    m = read_metrics(run / "metrics.txt")
    assert m["n_frames"] == 3 and m["psnr_db"] > 10
    (run / "metrics.txt").unlink()
    assert main(["eval", "--output", str(run)]) == EXIT_OK
    assert read_metrics(run / "metrics.txt")["psnr_db"] == pytest.approx(m["psnr_db"])
    rc = main(["render", "--config", str(tmp_path / "tum.yaml"), "--map", str(run / "map.gsmp"),
               "--poses", str(run / "trajectory.txt"), "--shift", "0.05,0,0", "--output", str(views)])
    assert rc == EXIT_OK
    assert len(list(views.glob("view_*_color.png"))) == 3


def test_eval_missing_files(tmp_path):
    assert main(["eval", "--output", str(tmp_path)]) == EXIT_DATASET


def test_downscale_flag(tmp_path, small_cfg):
    data = tmp_path / "d"
    assert main(["synth", "--config", str(small_cfg), "--output", str(data), "--downscale", "2"]) == EXIT_OK
    f = load_tum_rgbd(data).frame(0)
    assert f.rgb.shape == (12, 16, 3)
    assert np.all(np.isfinite(f.depth))

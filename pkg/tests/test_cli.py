"""CLI subcommands, config handling, and exit codes."""

import pytest

from dynodetect.cli import main
from dynodetect.cloud import read_scored_cloud, write_cloud
from dynodetect.config import RunConfig
from dynodetect.errors import ConfigError
from dynodetect.synthetic import generate, load_scene


SMALL_SCENE = """
frames = 7
rate = 10
points = 1500
noise = 0.0
seed = 5
static.0 = plane 0 0 0 0 0 1 3 3
mover.0 = box -1 0 1.4 0.8 0.8 0.8 vel 1 0 0
"""

DETECT_FLAGS = ["--N", "2", "--radius", "0.3", "--voxel", "0.05",
                "--thr", "0.25", "--min-neighbors", "4"]


@pytest.fixture()
def scene_file(tmp_path):
    path = tmp_path / "small.scene"
    path.write_text(SMALL_SCENE)
    return path


@pytest.fixture()
def frames_dir(tmp_path, scene_file):
    out = tmp_path / "frames"
    rc = main(["synth", "--scene", str(scene_file), "--output", str(out)])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_frames_and_labels(self, frames_dir):
        files = sorted(frames_dir.glob("frame_*.csv"))
        assert len(files) == 7
        labels = (frames_dir / "labels.csv").read_text().splitlines()
        assert labels[0] == "frame,point_index,label"
        assert len(labels) == 1 + 7 * 1500

    def test_seed_repeatable_byte_identical(self, tmp_path, scene_file):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--scene", str(scene_file), "--output", str(out1),
                     "--seed", "7"]) == 0
        assert main(["synth", "--scene", str(scene_file), "--output", str(out2),
                     "--seed", "7"]) == 0
        for f1 in sorted(out1.iterdir()):
            f2 = out2 / f1.name
            assert f1.read_bytes() == f2.read_bytes()

    def test_warns_when_window_cannot_fill(self, tmp_path, scene_file, capsys):
        out = tmp_path / "w"
        assert main(["synth", "--scene", str(scene_file), "--output", str(out),
                     "--N", "10"]) == 0
        assert "fewer than" in capsys.readouterr().err

    def test_bundled_scene_by_name(self, tmp_path):
        out = tmp_path / "room"
        assert main(["synth", "--scene", "static_room", "--output", str(out)]) == 0
        assert len(list(out.glob("frame_*.csv"))) == 21

    def test_missing_scene_is_config_error(self):
        assert main(["synth"]) == 2


class TestDetect:
    def test_writes_partitioned_outputs(self, tmp_path, frames_dir, capsys):
        out = tmp_path / "det"
        rc = main(["detect", "--input", str(frames_dir), "--output", str(out),
                   *DETECT_FLAGS])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "latency: N/f = 0.200 s" in printed
        # window 5 over 7 frames classifies frames 2..4 (0-based)
        dyn = sorted(out.glob("*_dynamic.csv"))
        sta = sorted(out.glob("*_static.csv"))
        assert len(dyn) == 3 and len(sta) == 3
        cloud, scores, labels = read_scored_cloud(dyn[0])
        assert labels.all()
        assert (scores > 0.25).all()

    def test_window_never_filled_warning(self, tmp_path, frames_dir, capsys):
        out = tmp_path / "det2"
        rc = main(["detect", "--input", str(frames_dir), "--output", str(out),
                   "--N", "10", "--voxel", "0.05"])
        assert rc == 0
        assert "window never filled" in capsys.readouterr().err
        assert not list(out.glob("*_dynamic.csv"))

    def test_missing_input_dir(self, tmp_path):
        assert main(["detect", "--input", str(tmp_path / "nope")]) == 3

    def test_conflicting_voxel_flags(self, frames_dir):
        rc = main(["detect", "--input", str(frames_dir), "--voxel", "0.1",
                   "--auto-voxel-divisor", "600"])
        assert rc == 2

    def test_ply_flow_and_empty_partition(self, tmp_path):
        from dynodetect.errors import EmptyCloudError

        scene = tmp_path / "static.scene"
        scene.write_text("frames = 5\nrate = 10\npoints = 900\nseed = 2\n"
                         "static.0 = plane 0 0 0 0 0 1 2 2\n")
        frames = tmp_path / "ply_frames"
        assert main(["synth", "--scene", str(scene), "--output", str(frames),
                     "--format", "ply"]) == 0
        out = tmp_path / "ply_det"
        rc = main(["detect", "--input", str(frames), "--output", str(out),
                   *DETECT_FLAGS])
        assert rc == 0
        static_files = sorted(out.glob("*_static.ply"))
        dynamic_files = sorted(out.glob("*_dynamic.ply"))
        assert len(static_files) == 1 and len(dynamic_files) == 1
        cloud, scores, labels = read_scored_cloud(static_files[0])
        assert not labels.any() and (scores <= 0.25).all()
        # all-static frame still writes the dynamic output, as an empty cloud
        with pytest.raises(EmptyCloudError):
            read_scored_cloud(dynamic_files[0])

    def test_per_frame_stamp_fills_missing_t(self, tmp_path):
        in_dir = tmp_path / "no_t"
        in_dir.mkdir()
        rows = "\n".join(f"{x/10},{y/10},0" for x in range(20) for y in range(20))
        for k in range(5):
            (in_dir / f"frame_{k:03d}.csv").write_text("x,y,z\n" + rows + "\n")
        out = tmp_path / "det_nt"
        assert main(["detect", "--input", str(in_dir), "--output", str(out),
                     *DETECT_FLAGS]) == 3  # t column required by default
        rc = main(["detect", "--input", str(in_dir), "--output", str(out),
                   "--per-frame-stamp", *DETECT_FLAGS])
        assert rc == 0
        assert len(list(out.glob("*_static.csv"))) == 1

    def test_follow_mode_processes_late_files(self, tmp_path, scene_file):
        import threading

        frames = generate(load_scene(scene_file))
        in_dir = tmp_path / "stream"
        in_dir.mkdir()
        for lc in frames[:4]:
            write_cloud(lc.cloud, in_dir / f"frame_{lc.cloud.frame_index:06d}.csv")

        def feed():
            for lc in frames[4:]:
                write_cloud(lc.cloud, in_dir / f"frame_{lc.cloud.frame_index:06d}.csv")

        timer = threading.Timer(0.5, feed)
        timer.start()
        out = tmp_path / "followed"
        rc = main(["detect", "--input", str(in_dir), "--output", str(out),
                   "--follow", "--follow-idle-timeout", "2.0", *DETECT_FLAGS])
        timer.join()
        assert rc == 0
        assert len(list(out.glob("*_dynamic.csv"))) == 3


class TestEval:
    def test_report_and_iou(self, tmp_path, frames_dir, capsys):
        report_path = tmp_path / "report.kv"
        rc = main(["eval", "--input", str(frames_dir), "--output", str(report_path),
                   *DETECT_FLAGS])
        assert rc == 0
        out = capsys.readouterr().out
        assert "iou=" in out
        text = report_path.read_text()
        assert "iou=" in text and "config_N=2" in text
        iou = float([l for l in text.splitlines() if l.startswith("iou=")][0].split("=")[1])
        assert iou >= 0.9

    def test_missing_labels_exit_3(self, tmp_path, frames_dir, capsys):
        (frames_dir / "labels.csv").unlink()
        rc = main(["eval", "--input", str(frames_dir), *DETECT_FLAGS])
        assert rc == 3
        assert "labels.csv" in capsys.readouterr().err

    def test_range_limit_honored(self, tmp_path, frames_dir):
        report_path = tmp_path / "r.kv"
        rc = main(["eval", "--input", str(frames_dir), "--output", str(report_path),
                   "--range-limit", "20", *DETECT_FLAGS])
        assert rc == 0
        assert "range_limit=20.0" in report_path.read_text()


class TestBenchCmd:
    def test_bench_from_scene(self, tmp_path, scene_file, capsys):
        out = tmp_path / "bench.kv"
        rc = main(["bench", "--scene", str(scene_file), "--output", str(out),
                   "--repetitions", "2", *DETECT_FLAGS])
        assert rc == 0
        text = out.read_text()
        assert "total_median_ms=" in text
        assert "repetitions=2" in text
        assert "config_N=2" in text  # effective config echoed for reruns
        assert "frame period" in capsys.readouterr().out

    def test_bench_needs_source(self):
        assert main(["bench"]) == 2


class TestConfigFile:
    def test_file_values_and_cli_override(self, tmp_path, frames_dir):
        cfg = tmp_path / "run.conf"
        cfg.write_text("N = 2\nradius = 0.3\nvoxel = 0.05\nthr = 0.9\n"
                       "min_neighbors = 4\n")
        report_path = tmp_path / "rep.kv"
        rc = main(["eval", "--input", str(frames_dir), "--config", str(cfg),
                   "--output", str(report_path), "--thr", "0.25"])
        assert rc == 0
        text = report_path.read_text()
        assert "config_thr=0.25" in text  # CLI wins over file
        assert "config_N=2" in text

    def test_unknown_key_exit_2(self, tmp_path, frames_dir):
        cfg = tmp_path / "bad.conf"
        cfg.write_text("frobnicate = yes\n")
        assert main(["eval", "--input", str(frames_dir), "--config", str(cfg)]) == 2

    def test_runconfig_load_defaults(self):
        cfg = RunConfig.load(None, {"N": 4})
        assert cfg.N == 4
        params = cfg.params()
        assert params.voxel_divisor == 600.0  # lidar default when unset
        with pytest.raises(ConfigError):
            RunConfig.load(None, {"voxel": 0.1, "auto_voxel_divisor": 500.0})

    def test_depth_camera_parameter_set(self):
        # close-range camera setup: N=4, thr=0.01, voxel = scale/100
        cfg = RunConfig.load(None, {"N": 4, "radius": 0.3, "thr": 0.01,
                                    "auto_voxel_divisor": 100.0, "rate": 30.0})
        params = cfg.params()
        assert params.half_window == 4
        assert params.threshold == 0.01
        assert params.voxel_divisor == 100.0
        from dynodetect.core import latency
        assert latency(params, cfg.rate) == pytest.approx(4 / 30)

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import scene_keypoints, scene_pairs

from sfmkit import io_files
from sfmkit.cli import main
from sfmkit.errors import CorruptFileError, EmptyCloudError
from sfmkit.matching import Match
from sfmkit.pipeline import PairResult, PipelineConfig, Track, reconstruct
from sfmkit.report import render_figures
from sfmkit.sift import Keypoint
from sfmkit.twoview import CameraIntrinsics


class TestPly:
    def test_single_vertex_line(self, tmp_path):
        path = str(tmp_path / "one.ply")
        track = Track(observations=[(0, 0), (1, 0)],
                      point3d=np.array([1.0, 2.0, 3.0]),
                      status="triangulated", intensity=0.5)
        io_files.export_ply([track], path)
        lines = open(path).read().splitlines()
        assert lines[0] == "ply"
        assert lines[1] == "format ascii 1.0"
        assert lines[2] == "element vertex 1"
        assert lines[3:9] == ["property float x", "property float y",
                              "property float z", "property uchar red",
                              "property uchar green", "property uchar blue"]
        assert lines[9] == "end_header"
        assert lines[10] == "1 2 3 127 127 127"

    def test_empty_cloud(self, tmp_path):
        with pytest.raises(EmptyCloudError):
            io_files.export_ply([], str(tmp_path / "x.ply"))
        with pytest.raises(EmptyCloudError):
            io_files.export_ply([Track(observations=[], status="candidate")],
                                str(tmp_path / "y.ply"))

    def test_round_trip_parse(self, tmp_path):
        rng = np.random.default_rng(0)
        tracks = [Track(observations=[(0, i)],
                        point3d=rng.normal(size=3),
                        status="triangulated",
                        intensity=float(rng.uniform()))
                  for i in range(50)]
        path = str(tmp_path / "cloud.ply")
        io_files.export_ply(tracks, path)
        props, verts = io_files.parse_ply(path)
        assert props == ["x", "y", "z", "red", "green", "blue"]
        assert verts.shape == (50, 6)
        pts = np.array([t.point3d for t in tracks])
        assert np.abs(verts[:, :3] - pts).max() < 1e-6
        assert (verts[:, 3] == verts[:, 4]).all()
        assert (verts[:, 3] >= 0).all() and (verts[:, 3] <= 255).all()

    def test_bad_file_rejected(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(CorruptFileError):
            io_files.parse_ply(str(p))


class TestBinaryContainers:
    def test_features_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        features = []
        names = []
        for i in range(3):
            n = int(rng.integers(0, 20))
            kps = [Keypoint(x=float(rng.uniform(0, 640)),
                            y=float(rng.uniform(0, 480)),
                            sigma=float(rng.uniform(1, 8)),
                            octave=int(rng.integers(0, 5)),
                            layer=int(rng.integers(1, 4)),
                            orientation=float(rng.uniform(0, 6.2)),
                            response=float(rng.normal()))
                   for _ in range(n)]
            desc = rng.normal(size=(n, 128)).astype(np.float32)
            features.append((kps, desc))
            names.append(f"img_{i:02d}.png")
        path = str(tmp_path / "features.bin")
        io_files.save_features(features, names, path)
        loaded, loaded_names = io_files.load_features(path)
        assert loaded_names == names
        for (k1, d1), (k2, d2) in zip(features, loaded):
            assert np.array_equal(d1, d2)
            assert len(k1) == len(k2)
            for a, b in zip(k1, k2):
                assert (a.x, a.y, a.sigma, a.orientation, a.response,
                        a.octave, a.layer) == \
                       (b.x, b.y, b.sigma, b.orientation, b.response,
                        b.octave, b.layer)

    def test_matches_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        pairwise = {}
        for (i, j) in [(0, 1), (0, 2), (1, 2)]:
            n = int(rng.integers(0, 30))
            matches = [Match(int(rng.integers(0, 100)),
                             int(rng.integers(0, 100)),
                             float(rng.uniform())) for _ in range(n)]
            inl = sorted(rng.choice(n, size=n // 2, replace=False).tolist()) \
                if n else []
            F = rng.normal(size=(3, 3)) if n >= 8 else None
            pairwise[(i, j)] = PairResult(matches, [int(v) for v in inl], F,
                                          n + 5)
        path = str(tmp_path / "matches.bin")
        io_files.save_matches(pairwise, path)
        loaded = io_files.load_matches(path)
        assert set(loaded) == set(pairwise)
        for key, pr in pairwise.items():
            lp = loaded[key]
            assert lp.ratio_matches == pr.ratio_matches
            assert lp.inlier_idx == pr.inlier_idx
            assert [(m.idx_left, m.idx_right, m.distance) for m in lp.matches] \
                == [(m.idx_left, m.idx_right, m.distance) for m in pr.matches]
            if pr.F is None:
                assert lp.F is None
            else:
                assert np.array_equal(lp.F, pr.F)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CorruptFileError):
            io_files.load_features(str(p))
        with pytest.raises(CorruptFileError):
            io_files.load_matches(str(p))


class TestIntrinsicsFile:
    def test_round_trip(self, tmp_path):
        p = str(tmp_path / "K.json")
        intr = CameraIntrinsics(fx=1520.4, fy=1525.9, cx=302.32, cy=246.87)
        io_files.save_intrinsics(intr, p)
        back = io_files.load_intrinsics(p)
        assert back == intr

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"fx": 100.0}')
        with pytest.raises(CorruptFileError):
            io_files.load_intrinsics(str(p))


@pytest.fixture(scope="module")
def ring_state(ring_scene, ring_intrinsics):
    kps = scene_keypoints(ring_scene)
    pairs = scene_pairs(ring_scene, kps)
    state, reports = reconstruct(kps, pairs, ring_intrinsics,
                                 PipelineConfig())
    return state, reports


class TestStateExports:
    def test_poses_json(self, ring_state, tmp_path):
        state, _ = ring_state
        summary = io_files.state_summary(state)
        path = str(tmp_path / "poses.json")
        io_files.export_poses(summary["poses"], path)
        records = json.load(open(path))
        assert len(records) == 10
        names = [r["name"] for r in records]
        assert names == sorted(names)
        first = min(state.registered)
        rec0 = [r for r in records if r["index"] == state.registered[0]][0]
        assert rec0["center"] == [0.0, 0.0, 0.0]
        for r in records:
            R = np.array(r["rotation"]).reshape(3, 3)
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6

    def test_poses_json_full_precision(self, ring_state, tmp_path):
        state, _ = ring_state
        summary = io_files.state_summary(state)
        path = str(tmp_path / "poses.json")
        io_files.export_poses(summary["poses"], path)
        records = json.load(open(path))
        for rec in records:
            pose = state.poses[rec["index"]]
            assert np.array_equal(np.array(rec["rotation"]).reshape(3, 3),
                                  pose.R)
            assert np.array_equal(np.array(rec["translation"]), pose.t)

    def test_report_csvs(self, ring_state, tmp_path):
        state, _ = ring_state
        summary = io_files.state_summary(state)
        paths = io_files.export_report(summary, str(tmp_path))
        kp_rows = open(paths[0]).read().splitlines()
        assert kp_rows[0] == "image,count"
        assert len(kp_rows) == 1 + 10
        match_rows = open(paths[1]).read().splitlines()
        assert match_rows[0] == "i,j,putative,inliers"
        assert len(match_rows) == 1 + 45
        err_rows = open(paths[2]).read().splitlines()
        assert err_rows[0] == "image,before_px,after_px"
        assert len(err_rows) == 1 + 10
        for row in err_rows[1:]:
            _, before, after = row.split(",")
            assert float(after) <= float(before) + 1e-9

    def test_empty_stats_header_only(self, tmp_path):
        summary = {"images": [], "pairs": [], "per_view_errors": []}
        paths = io_files.export_report(summary, str(tmp_path))
        for p in paths:
            rows = open(p).read().splitlines()
            assert len(rows) == 1

    def test_state_round_trip(self, ring_state, tmp_path):
        state, _ = ring_state
        summary = io_files.state_summary(state)
        path = str(tmp_path / "reconstruction.json")
        io_files.save_state(summary, path)
        assert io_files.load_state(path) == summary

    def test_figures_render(self, ring_state, tmp_path):
        state, _ = ring_state
        summary = io_files.state_summary(state)
        paths = render_figures(summary, str(tmp_path / "figures"))
        assert len(paths) == 5
        for p in paths:
            assert os.path.getsize(p) > 1000


def write_pgm(path, img):
    data = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory, corner_dataset):
    root = tmp_path_factory.mktemp("cli_data")
    data = corner_dataset
    img_dir = root / "images"
    img_dir.mkdir()
    for i, img in enumerate(data["images"]):
        write_pgm(str(img_dir / f"view_{i:02d}.pgm"), img)
    k_path = root / "K.json"
    io_files.save_intrinsics(
        CameraIntrinsics(fx=data["fx"], fy=data["fy"],
                         cx=data["cx"], cy=data["cy"]), str(k_path))
    return str(img_dir), str(k_path), root


ARTIFACTS = ["cloud.ply", "poses.json", "keypoints_per_image.csv",
             "matches.csv", "reproj_error.csv", "reconstruction.json"]


@pytest.fixture(scope="module")
def mono_out(cli_dataset):
    img_dir, k_path, root = cli_dataset
    out = str(root / "out_mono")
    rc = main(["reconstruct", "--images", img_dir,
               "--intrinsics", k_path, "--out", out])
    assert rc == 0
    return out


class TestCli:
    def test_reconstruct_writes_all_artifacts(self, mono_out):
        for name in ARTIFACTS:
            assert os.path.isfile(os.path.join(mono_out, name)), name
        assert os.path.isdir(os.path.join(mono_out, "figures"))
        props, verts = io_files.parse_ply(os.path.join(mono_out, "cloud.ply"))
        assert verts.shape[0] >= 100

    def test_staged_equals_monolithic(self, cli_dataset, mono_out):
        img_dir, k_path, root = cli_dataset
        staged = str(root / "out_staged")
        rc = main(["detect", "--images", img_dir, "--out", staged])
        assert rc == 0
        rc = main(["match", "--features", os.path.join(staged, "features.bin"),
                   "--out", staged])
        assert rc == 0
        rc = main(["reconstruct", "--images", img_dir, "--intrinsics", k_path,
                   "--out", staged, "--resume"])
        assert rc == 0
        for name in ARTIFACTS:
            a = open(os.path.join(mono_out, name), "rb").read()
            b = open(os.path.join(staged, name), "rb").read()
            assert a == b, f"{name} differs between staged and monolithic runs"

    def test_determinism_across_runs(self, cli_dataset, mono_out):
        img_dir, k_path, root = cli_dataset
        out2 = str(root / "out_again")
        rc = main(["reconstruct", "--images", img_dir,
                   "--intrinsics", k_path, "--out", out2, "--seed", "0"])
        assert rc == 0
        for name in ARTIFACTS:
            a = open(os.path.join(mono_out, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b, f"{name} differs between identical runs"

    def test_export_and_report_from_state(self, cli_dataset, mono_out):
        img_dir, k_path, root = cli_dataset
        mono = mono_out
        out = str(root / "out_export")
        rc = main(["export", "--state",
                   os.path.join(mono, "reconstruction.json"), "--out", out])
        assert rc == 0
        assert open(os.path.join(out, "cloud.ply"), "rb").read() == \
            open(os.path.join(mono, "cloud.ply"), "rb").read()
        assert open(os.path.join(out, "poses.json"), "rb").read() == \
            open(os.path.join(mono, "poses.json"), "rb").read()
        rep = str(root / "out_report")
        rc = main(["report", "--state",
                   os.path.join(mono, "reconstruction.json"), "--out", rep])
        assert rc == 0
        for name in ARTIFACTS[2:5]:
            assert open(os.path.join(rep, name), "rb").read() == \
                open(os.path.join(mono, name), "rb").read()
        assert len(os.listdir(os.path.join(rep, "figures"))) == 5

    def test_missing_intrinsics_exit_2(self, cli_dataset, tmp_path):
        img_dir, _, _ = cli_dataset
        rc = main(["reconstruct", "--images", img_dir,
                   "--intrinsics", "/nonexistent/K.json",
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["reconstruct"])   # missing required args
        assert exc.value.code == 2

    def test_unknown_subcommand_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_config_file_option(self, cli_dataset, tmp_path):
        img_dir, k_path, root = cli_dataset
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"ratio": 0.8, "seed": 0}))
        out = str(tmp_path / "out_cfg")
        rc = main(["detect", "--images", img_dir, "--out", out,
                   "--config", str(cfg_path)])
        assert rc == 0
        assert os.path.isfile(os.path.join(out, "features.bin"))

    def test_toml_config_changes_detection(self, cli_dataset, tmp_path):
        img_dir, _, _ = cli_dataset
        cfg_path = tmp_path / "cfg.toml"
        cfg_path.write_text("contrast_threshold = 0.2\n")
        strict = str(tmp_path / "strict")
        default = str(tmp_path / "default")
        assert main(["detect", "--images", img_dir, "--out", strict,
                     "--config", str(cfg_path)]) == 0
        assert main(["detect", "--images", img_dir, "--out", default]) == 0
        n_strict = sum(len(k) for k, _ in
                       io_files.load_features(
                           os.path.join(strict, "features.bin"))[0])
        n_default = sum(len(k) for k, _ in
                        io_files.load_features(
                            os.path.join(default, "features.bin"))[0])
        assert n_strict < n_default

    def test_detect_on_png_images(self, corner_dataset, tmp_path):
        from PIL import Image

        img_dir = tmp_path / "png_images"
        img_dir.mkdir()
        for i, img in enumerate(corner_dataset["images"][:3]):
            arr = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(
                str(img_dir / f"view_{i:02d}.png"))
        out = str(tmp_path / "out_png")
        rc = main(["detect", "--images", str(img_dir), "--out", out])
        assert rc == 0
        features, names = io_files.load_features(
            os.path.join(out, "features.bin"))
        assert names == [f"view_{i:02d}.png" for i in range(3)]
        assert all(len(kps) > 100 for kps, _ in features)

    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "sfmkit.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "reconstruct" in proc.stdout

    def test_dump_keypoints(self, cli_dataset, tmp_path):
        img_dir, _, _ = cli_dataset
        out = str(tmp_path / "dump")
        rc = main(["detect", "--images", img_dir, "--out", out,
                   "--dump-keypoints"])
        assert rc == 0
        csvs = sorted(n for n in os.listdir(out) if n.startswith("keypoints_"))
        assert len(csvs) == 8
        rows = open(os.path.join(out, csvs[0])).read().splitlines()
        assert rows[0] == "x,y,sigma,orientation,response"
        assert len(rows) > 50

    def test_fatal_pipeline_error_exit_1(self, tmp_path):
        # two identical images: no valid bootstrap pair -> exit code 1
        rng = np.random.default_rng(9)
        from sfmkit.image import gaussian_blur

        img = gaussian_blur(rng.uniform(size=(128, 128)), 2.0)
        img = (img - img.min()) / (img.max() - img.min())
        img_dir = tmp_path / "twins"
        img_dir.mkdir()
        write_pgm(str(img_dir / "a.pgm"), img)
        write_pgm(str(img_dir / "b.pgm"), img)
        k_path = str(tmp_path / "K.json")
        io_files.save_intrinsics(CameraIntrinsics(600, 600, 64, 64), k_path)
        rc = main(["reconstruct", "--images", str(img_dir),
                   "--intrinsics", k_path, "--out", str(tmp_path / "o")])
        assert rc == 1

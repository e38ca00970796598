import numpy as np
import pytest

from roverscape import camera, pipeline
from roverscape.cli import build_parser, main
from roverscape.formats import read_poses
from roverscape.geometry import load_ply
from roverscape.trajectory import load_trajectory


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    return pipeline.write_oracle_scene(tmp_path_factory.mktemp("cli_scene"), 8, size=64)


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_synth_scene_prints_manifest(tmp_path, capsys):
    assert main(["synth", "--size", "64", "--seed", "5", "--out", str(tmp_path / "s")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "s" / "scene.manifest")
    assert pipeline.read_scene_manifest(tmp_path / "s" / "scene.manifest").scene_id == "scene005"


def test_synth_perturbation(tmp_path):
    assert main(["synth", "--size", "64", "--out", str(tmp_path), "--perturb", "kind=depth_affine", "s=2",
                 "b=0.5"]) == 0
    assert "kind=depth_affine" in (tmp_path / "truth" / "perturbations.txt").read_text()


def test_synth_sequence(tmp_path):
    out = tmp_path / "seq"
    assert main(["synth", "--mode", "sequence", "--size", "64", "--frames", "3", "--out", str(out)]) == 0
    assert len(read_poses(out / "poses.txt")) == 3


def test_reconstruct(scene, tmp_path, capsys):
    out = tmp_path / "rec"
    assert main(["reconstruct", "--manifest", str(scene), "--stride", "2", "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("scene_id\tscene008")
    assert len(load_ply(out / "cloud.ply")) > 0


def test_reconstruct_missing_input(tmp_path, capsys):
    assert main(["reconstruct", "--manifest", str(tmp_path / "nope.manifest"), "--out", str(tmp_path)]) == 1
    assert "MissingInput" in capsys.readouterr().err


def test_filter(scene, tmp_path, capsys):
    manifest = scene.parent / "images.txt"
    manifest.write_text("left.png\nright.png\n")
    report = tmp_path / "report.tsv"
    assert main(["filter", "--manifest", str(manifest), "--out", str(report)]) == 0
    # the right view is a near-duplicate of the left one
    assert capsys.readouterr().out.strip() == "1/2 images kept"
    assert "right.png\treject\tdedup\tsize=" in report.read_text()
    assert main(["filter", "--manifest", str(manifest), "--min-dim", "128", "--out", str(report)]) == 0
    assert "0/2" in capsys.readouterr().out
    assert report.read_text().count("\treject\tsize") == 2


def test_missing_out(scene):
    with pytest.raises(SystemExit, match="--out"):
        main(["reconstruct", "--manifest", str(scene)])


def test_convert_camera_round_trip(tmp_path):
    intr = camera.Intrinsics(800, 800, 320, 240, 640, 480)
    camera.save_intrinsics(tmp_path / "in.txt", intr)
    assert main(["convert-camera", "--intrinsics", str(tmp_path / "in.txt"), "--out", str(tmp_path / "c.cahvor")]) == 0
    assert main(["convert-camera", "--cahvor", str(tmp_path / "c.cahvor"), "--pose-out", str(tmp_path / "p.txt"),
                 "--out", str(tmp_path / "out.txt")]) == 0
    back = camera.load_intrinsics(tmp_path / "out.txt")
    assert np.allclose([back.fx, back.fy, back.cx, back.cy], [800, 800, 320, 240], atol=1e-9)
    assert read_poses(tmp_path / "p.txt")[0].angle_to(camera.Pose.identity()) < 1e-12


def test_convert_camera_needs_source(tmp_path):
    with pytest.raises(SystemExit):
        main(["convert-camera", "--out", str(tmp_path / "x")])


def test_trajectory_and_render(scene, tmp_path, capsys):
    traj = tmp_path / "traj.txt"
    assert main(["trajectory", "--kind", "dolly", "--extent", "0.5", "--frames", "3", "--out", str(traj)]) == 0
    assert capsys.readouterr().out.strip() == "The camera moves forward."
    assert len(load_trajectory(traj).poses) == 3

    rec = tmp_path / "rec"
    main(["reconstruct", "--manifest", str(scene), "--out", str(rec)])
    out = tmp_path / "seq"
    assert main(["render", "--cloud", str(rec / "cloud.ply"), "--trajectory", str(traj), "--intrinsics",
                 str(scene.parent / "intrinsics.txt"), "--workers", "2", "--out", str(out)]) == 0
    assert len(list((out / "frames").glob("*.png"))) == 3
    assert (out / "caption.txt").read_text().strip() == "The camera moves forward."

    metrics = tmp_path / "metrics.tsv"
    assert main(["evaluate", "--sequence", str(out), "--out", str(metrics)]) == 0
    assert metrics.read_text().startswith("kind\ta\tb\tmetric\tvalue\n")


def test_trajectory_depth_adaptive(scene, tmp_path):
    out = tmp_path / "t.txt"
    assert main(["trajectory", "--kind", "truck", "--extent", "1", "--frames", "2", "--depth-map",
                 str(scene.parent / "left_depth.pfm"), "--out", str(out)]) == 0
    step = load_trajectory(out).poses[1].translation[0]
    assert 0 < step != 1.0


def test_evaluate_layout_error(tmp_path, capsys):
    assert main(["evaluate", "--sequence", str(tmp_path)]) == 1
    assert "LayoutError" in capsys.readouterr().err


def test_pipeline_exit_codes(tmp_path, capsys):
    good = pipeline.write_oracle_scene(tmp_path / "a", 20, size=64)
    batch = tmp_path / "batch.manifest"
    pipeline.write_batch_manifest(batch, [good], [pipeline.TrajectorySpec("dolly", 0.5, 3)])
    assert main(["pipeline", "--manifest", str(batch), "--out", str(tmp_path / "out")]) == 0
    assert "1 rows, exit 0" in capsys.readouterr().out
    (tmp_path / "a" / "left_depth.pfm").unlink()
    assert main(["pipeline", "--manifest", str(batch), "--out", str(tmp_path / "out2")]) == 1

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from roverscape import trajectory as tr
from roverscape.camera import Pose, matrix_to_rotvec, rotvec_to_matrix
from roverscape.errors import BadParams, FormatError, OutOfRange, UnknownKind


def yaw_of(pose):
    return float(matrix_to_rotvec(pose.rotation)[1])


def stats(median):
    return tr.DepthStats(median, median, median)


class TestCanonical:
    def test_dolly_example(self):
        t = tr.canonical_trajectory("dolly", 0.4, 5)
        assert len(t) == 5 and t.timestamps == (1.0, 2.0, 3.0, 4.0, 5.0)
        for p, z in zip(t.poses, [0, 0.1, 0.2, 0.3, 0.4]):
            assert np.array_equal(p.rotation, np.eye(3))
            assert p.translation == pytest.approx([0, 0, z], abs=1e-15)

    def test_pan_example(self):
        t = tr.canonical_trajectory("pan", math.pi / 2, 3)
        assert [yaw_of(p) for p in t.poses] == pytest.approx([0, math.pi / 4, math.pi / 2], abs=1e-12)
        assert all(np.array_equal(p.translation, np.zeros(3)) for p in t.poses)

    @pytest.mark.parametrize("kind,axis,sign", [("truck", 0, 1), ("boom", 1, -1), ("dolly", 2, 1)])
    def test_translation_axes(self, kind, axis, sign):
        last = tr.canonical_trajectory(kind, 0.5, 4).poses[-1].translation
        expect = np.zeros(3)
        expect[axis] = sign * 0.5
        assert np.array_equal(last, expect)

    @pytest.mark.parametrize("kind", ["orbit", "spiral"])
    def test_orbit_keeps_pivot_on_axis(self, kind):
        r = 7.0
        anchor = Pose(rotvec_to_matrix([0.1, -0.3, 0.05]), [1.0, 2.0, -0.5])
        t = tr.canonical_trajectory(kind, 0.6, 9, anchor, radius=r)
        pivot = anchor.apply([[0.0, 0.0, r]])
        for p in t.poses:
            q = p.inverse().apply(pivot)[0]
            assert abs(q[0]) < 1e-9 and abs(q[1]) < 1e-9 and q[2] > 0

    def test_orbit_radius_constant(self):
        t = tr.canonical_trajectory("orbit", 1.0, 7, radius=5.0)
        d = [np.linalg.norm(p.translation - [0, 0, 5.0]) for p in t.poses]
        assert np.allclose(d, 5.0, atol=1e-12)

    def test_spiral_closes_in(self):
        t = tr.canonical_trajectory("spiral", 0.5, 5, radius=10.0, spiral_dolly=0.5)
        d = [np.linalg.norm(p.translation - [0, 0, 10.0]) for p in t.poses]
        assert np.allclose(d, [10, 8.75, 7.5, 6.25, 5.0], atol=1e-12)

    def test_starts_at_anchor(self):
        anchor = Pose(rotvec_to_matrix([0.2, 0.1, 0.0]), [3, 4, 5])
        for kind in tr.KINDS:
            p0 = tr.canonical_trajectory(kind, 0.3, 4, anchor).poses[0]
            assert np.abs(p0.matrix34() - anchor.matrix34()).max() < 1e-12

    @pytest.mark.parametrize("kind", tr.KINDS)
    def test_poses_orthonormal(self, kind):
        for p in tr.canonical_trajectory(kind, 1.3, 49).poses:
            assert np.abs(p.rotation.T @ p.rotation - np.eye(3)).max() < 1e-9

    def test_errors(self):
        with pytest.raises(UnknownKind):
            tr.canonical_trajectory("zoom", 1.0)
        with pytest.raises(BadParams):
            tr.canonical_trajectory("dolly", 0.0)
        with pytest.raises(BadParams):
            tr.canonical_trajectory("dolly", 1.0, 1)


class TestTrajectoryType:
    def test_needs_two_poses(self):
        with pytest.raises(BadParams):
            tr.Trajectory((Pose.identity(),), "dolly")

    def test_timestamps_increasing(self):
        with pytest.raises(BadParams):
            tr.Trajectory((Pose.identity(), Pose.identity()), "dolly", timestamps=(2.0, 2.0))

    def test_depth_stats_order(self):
        with pytest.raises(BadParams):
            tr.DepthStats(5.0, 6.0, 7.0)

    def test_depth_stats_from_depth(self):
        d = np.arange(1, 102, dtype=float).reshape(1, -1)
        s = tr.DepthStats.from_depth(d)
        assert (s.p10_depth, s.median_depth, s.p90_depth) == (11.0, 51.0, 91.0)


class TestDepthAdaptive:
    def test_factor_one(self):
        t = tr.canonical_trajectory("truck", 0.5, 5)
        s = tr.depth_adaptive_scale(t, stats(10.0), 10.0)
        assert all(np.array_equal(a.matrix34(), b.matrix34()) for a, b in zip(t.poses, s.poses))
        assert s.scale_factor == 1.0

    def test_contracts(self):
        t = tr.canonical_trajectory("orbit", 0.5, 5)
        s = tr.depth_adaptive_scale(t, stats(2.0), 10.0)
        for a, b in zip(t.poses, s.poses):
            assert np.linalg.norm(b.translation) == pytest.approx(0.2 * np.linalg.norm(a.translation), rel=1e-12)
            assert np.array_equal(a.rotation, b.rotation)
        assert s.kind == "orbit" and s.scale_factor == pytest.approx(0.2)

    def test_clamped(self):
        t = tr.canonical_trajectory("dolly", 1.0, 3)
        assert tr.depth_adaptive_scale(t, stats(1000.0), 10.0).scale_factor == 20.0
        assert tr.depth_adaptive_scale(t, stats(0.01), 10.0).scale_factor == 0.05

    @given(st.floats(1.0, 90.0), st.sampled_from(tr.KINDS))
    def test_homogeneous(self, median, kind):
        t = tr.canonical_trajectory(kind, 0.7, 6)
        a = tr.depth_adaptive_scale(t, stats(median))
        b = tr.depth_adaptive_scale(t, stats(2 * median))
        for pa, pb in zip(a.poses, b.poses):
            assert np.linalg.norm(pb.translation) == pytest.approx(2 * np.linalg.norm(pa.translation),
                                                                   rel=1e-12, abs=1e-15)


class TestInterpolate:
    def test_keys_exact(self):
        t = tr.canonical_trajectory("spiral", 0.8, 6)
        for ts, p in zip(t.timestamps, t.poses):
            assert tr.interpolate_pose(t, ts) is p

    def test_identical_poses(self):
        p = Pose(rotvec_to_matrix([0.3, 0.2, 0.1]), [1, 2, 3])
        q = tr.interpolate_pose(tr.Trajectory((p, p), "dolly"), 1.5)
        assert np.abs(q.matrix34() - p.matrix34()).max() < 1e-12

    def test_slerp_midpoint(self):
        t = tr.Trajectory((Pose.identity(), Pose(rotvec_to_matrix([0, math.pi / 2, 0]))), "pan")
        assert yaw_of(tr.interpolate_pose(t, 1.5)) == pytest.approx(math.pi / 4, abs=1e-12)

    def test_out_of_range(self):
        t = tr.canonical_trajectory("dolly", 1.0, 3)
        with pytest.raises(OutOfRange):
            tr.interpolate_pose(t, 0.5)
        with pytest.raises(OutOfRange):
            tr.interpolate_pose(t, 3.01)

    @given(st.floats(1.0, 5.0))
    def test_stays_on_unit_quaternions(self, t):
        traj = tr.canonical_trajectory("orbit", 2.5, 5, Pose(rotvec_to_matrix([0.4, -0.2, 0.9])))
        q = Rotation.from_matrix(tr.interpolate_pose(traj, t).rotation).as_quat()
        assert abs(np.linalg.norm(q) - 1) < 1e-12


class TestCaptions:
    @pytest.mark.parametrize("kind,extent,text", [
        ("dolly", 0.5, "The camera moves forward."),
        ("truck", 0.5, "The camera moves right."),
        ("boom", 0.5, "The camera moves up."),
        ("pan", math.pi / 2, "The camera pans right."),
        ("orbit", 0.4, "The camera orbits."),
        ("spiral", 0.4, "The camera orbits while moving forward."),
    ])
    def test_rule_table(self, kind, extent, text):
        assert tr.describe_motion(tr.canonical_trajectory(kind, extent, 49)) == text

    def test_reverse_directions(self):
        base = tr.canonical_trajectory("dolly", 0.5, 5)
        back = tr.Trajectory(tuple(reversed(base.poses)), "dolly")
        assert tr.describe_motion(back) == "The camera moves backward."
        pan = tr.canonical_trajectory("pan", 0.5, 5)
        assert tr.describe_motion(tr.Trajectory(tuple(reversed(pan.poses)), "pan")) == "The camera pans left."

    def test_small_and_still(self):
        assert tr.describe_motion(tr.canonical_trajectory("dolly", 0.05, 3)) == "The camera moves slightly forward."
        still = tr.Trajectory((Pose.identity(), Pose.identity()), "dolly")
        assert tr.describe_motion(still) == "The camera remains still."

    def test_tilt(self):
        t = tr.Trajectory((Pose.identity(), Pose(rotvec_to_matrix([0.5, 0, 0]))), "pan")
        assert tr.describe_motion(t) == "The camera tilts up."

    def test_composite(self):
        t = tr.Trajectory((Pose.identity(), Pose(rotvec_to_matrix([0, 0.5, 0]), [0, 0, 1.0])), "dolly")
        assert tr.describe_motion(t) == "The camera moves forward and pans right."

    def test_anchor_frame(self):
        anchor = Pose(rotvec_to_matrix([0, 1.2, 0]), [4, 0, 1])
        assert tr.describe_motion(tr.canonical_trajectory("dolly", 0.5, 5, anchor)) == "The camera moves forward."

    @given(st.sampled_from(tr.KINDS), st.integers(2, 97))
    def test_resampling_invariant(self, kind, n):
        t = tr.canonical_trajectory(kind, 0.4, 49)
        assert tr.describe_motion(tr.resample(t, n)) == tr.describe_motion(t)


class TestFiles:
    def test_text_round_trip(self):
        t = tr.depth_adaptive_scale(tr.canonical_trajectory("orbit", 0.3, 7), stats(3.3))
        text = tr.trajectory_to_text(t)
        assert text.splitlines()[0] == f"orbit 7 {t.scale_factor!r}"
        back = tr.trajectory_from_text(text)
        assert tr.trajectory_to_text(back) == text
        assert back.kind == "orbit" and back.scale_factor == t.scale_factor

    def test_bad_header(self):
        with pytest.raises(FormatError):
            tr.trajectory_from_text("orbit 3\n")
        with pytest.raises(FormatError):
            tr.trajectory_from_text("orbit 3 1.0\n" + "1 0 0 0 0 1 0 0 0 0 1 0\n")

    def test_save_writes_caption(self, tmp_path):
        t = tr.canonical_trajectory("truck", 0.5, 5)
        tr.save_trajectory(tmp_path / "t.txt", t)
        assert (tmp_path / "t.caption.txt").read_text() == "The camera moves right.\n"
        assert tr.trajectory_to_text(tr.load_trajectory(tmp_path / "t.txt")) == tr.trajectory_to_text(t)

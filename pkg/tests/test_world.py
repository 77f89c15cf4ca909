import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinaema.dataset import read_dataset, read_manifest, write_dataset
from kinaema.errors import (
    ChecksumError, ConfigError, DomainError, InputError, TruncatedFileError, VersionMismatchError,
)
from kinaema.world import (
    ACTION_PROFILES, Pose, Scene, WorldConfig, contributing_landmarks, generate_dataset,
    generate_episode, make_scene, perturb_pose, relpose, render, step, wrap_angle,
)


def se2(x, y, th):
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def se2_of(pose):
    return se2(*pose)


def one_landmark_scene(pos, feature=(1.0, 0, 0, 0, 0, 0, 0, 0), size=6.0):
    f = np.array([feature], dtype=float)
    return Scene("one", size, size, np.array([pos], dtype=float), f / np.linalg.norm(f), 0)


class TestScene:
    def test_same_seed_same_scene(self):
        a, b = make_scene(0), make_scene(0)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.features, b.features)
        assert not np.array_equal(make_scene(1).positions, a.positions)

    def test_default_scene_invariants(self):
        cfg = WorldConfig(landmarks=32, feature_dim=8)
        sc = make_scene(3, cfg)
        assert sc.positions.shape == (32, 2) and sc.features.shape == (32, 8)
        assert np.all((sc.positions >= 0) & (sc.positions <= [cfg.arena_width, cfg.arena_height]))
        np.testing.assert_allclose(np.linalg.norm(sc.features, axis=1), 1.0, atol=1e-12)

    def test_zero_landmarks_rejected(self):
        with pytest.raises(ConfigError):
            make_scene(0, WorldConfig(landmarks=0))

    def test_single_landmark_observations_are_scaled_copies(self):
        cfg = WorldConfig(landmarks=1)
        sc = make_scene(5, cfg)
        ep = generate_episode(sc, 1, 400, "eval", cfg)
        feat = sc.features[0]
        for retina in ep.retinas:
            cells = retina.reshape(cfg.bins, cfg.feature_dim)
            for cell in cells[np.abs(cells).sum(1) > 0]:
                scale = cell @ feat
                np.testing.assert_allclose(cell, scale * feat, atol=1e-12)
        assert np.abs(ep.retinas).sum() > 0


class TestRender:
    cfg = WorldConfig()

    def _bin_center_heading(self, b):
        # heading that puts a landmark straight ahead of the origin into bin b
        width = math.radians(self.cfg.fov_deg) / self.cfg.bins
        bearing = -math.radians(self.cfg.fov_deg) / 2 + (b + 0.5) * width
        return -bearing

    def test_rotation_by_one_bin_shifts_one_bin(self):
        sc = one_landmark_scene((4.0, 3.0))
        width = math.radians(self.cfg.fov_deg) / self.cfg.bins
        h = self._bin_center_heading(7)
        r0 = render(sc, Pose(2.0, 3.0, h), self.cfg).reshape(self.cfg.bins, -1)
        r1 = render(sc, Pose(2.0, 3.0, h + width), self.cfg).reshape(self.cfg.bins, -1)
        assert np.flatnonzero(r0.any(1)).tolist() == [7]
        np.testing.assert_allclose(r1[6], r0[7], atol=1e-12)
        assert np.flatnonzero(r1.any(1)).tolist() == [6]

    def test_landmark_behind_contributes_nothing(self):
        sc = one_landmark_scene((1.0, 3.0))
        assert not render(sc, Pose(3.0, 3.0, 0.0), self.cfg).any()

    def test_contribution_magnitude(self):
        sc = one_landmark_scene((4.0, 3.0))
        r = render(sc, Pose(2.0, 3.0, 0.0), self.cfg)
        assert np.linalg.norm(r) == pytest.approx(1.0 / 3.0)

    def test_two_landmarks_render_linearly(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(2, 8))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        pos = np.array([[4.0, 3.5], [3.5, 2.0]])
        both = Scene("two", 6, 6, pos, f, 0)
        single = [Scene(f"s{i}", 6, 6, pos[i:i + 1], f[i:i + 1], 0) for i in range(2)]
        for _ in range(20):
            pose = Pose(rng.uniform(0, 6), rng.uniform(0, 6), rng.uniform(-math.pi, math.pi))
            np.testing.assert_allclose(render(both, pose), render(single[0], pose) + render(single[1], pose),
                                       atol=1e-12)

    def test_pose_outside_arena(self):
        with pytest.raises(DomainError):
            render(make_scene(0), Pose(-0.1, 1.0, 0.0))

    def test_out_of_range_invisible(self):
        sc = one_landmark_scene((5.9, 0.1), size=6.0)
        assert not render(sc, Pose(0.1, 5.9, -math.pi / 4), WorldConfig(max_range=5.0)).any()

    def test_disjoint_neighborhoods_share_no_landmarks(self):
        cfg = WorldConfig(arena_width=30.0, max_range=5.0)
        rng = np.random.default_rng(1)
        left = np.column_stack([rng.uniform(0, 4, 10), rng.uniform(0, 6, 10)])
        right = np.column_stack([rng.uniform(26, 30, 10), rng.uniform(0, 6, 10)])
        f = rng.normal(size=(20, 8))
        sc = Scene("wide", 30.0, 6.0, np.vstack([left, right]), f / np.linalg.norm(f, axis=1, keepdims=True), 0)
        a = contributing_landmarks(sc, Pose(2.0, 3.0, math.pi), cfg)
        b = contributing_landmarks(sc, Pose(28.0, 3.0, 0.0), cfg)
        assert set(a).isdisjoint(b)
        sub = Scene("left", 30.0, 6.0, sc.positions[:10], sc.features[:10], 0)
        np.testing.assert_array_equal(render(sc, Pose(2.0, 3.0, math.pi), cfg),
                                      render(sub, Pose(2.0, 3.0, math.pi), cfg))


class TestStep:
    def test_forward_eval(self):
        p = step(Pose(0.0, 0.0, 0.0), "forward", "eval")
        assert (p.x, p.y, p.heading) == pytest.approx((0.25, 0.0, 0.0))

    def test_forward_train(self):
        p = step(Pose(1.0, 1.0, math.pi / 2), "forward", "train")
        assert (p.x, p.y) == pytest.approx((1.0, 1.1))

    @pytest.mark.parametrize("profile", ["train", "eval"])
    def test_left_then_right_restores_heading(self, profile):
        for h in np.linspace(-math.pi, math.pi, 37):
            p = Pose(1.0, 1.0, h)
            back = step(step(p, "left", profile), "right", profile)
            assert abs(wrap_angle(back.heading - p.heading)) < 1e-12

    def test_full_circle_of_left_turns(self):
        p = Pose(1.0, 1.0, 0.3)
        q = p
        for _ in range(36):
            q = step(q, "left", "eval")
        assert abs(wrap_angle(q.heading - p.heading)) < 1e-9

    def test_forward_clipped_to_arena(self):
        p = step(Pose(5.9, 3.0, 0.0), "forward", "eval")
        assert p.x == 6.0

    def test_unknown_action(self):
        with pytest.raises(InputError):
            step(Pose(0, 0, 0), "jump")

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-50, 50, allow_nan=False))
    def test_heading_normalized(self, h):
        p = Pose(0, 0, h)
        assert -math.pi < p.heading <= math.pi
        assert math.cos(p.heading) == pytest.approx(math.cos(h), abs=1e-9)

    def test_eval_step_not_a_multiple_of_train_step(self):
        train_fwd, eval_fwd = ACTION_PROFILES["train"][0], ACTION_PROFILES["eval"][0]
        assert all(abs(n * train_fwd - eval_fwd) > 1e-3 for n in range(10))
        # a straight run of train steps from the start never lands on the eval pose
        start = Pose(1.0, 1.0, 0.0)
        target = step(start, "forward", "eval")
        p = start
        for _ in range(5):
            p = step(p, "forward", "train")
            assert math.hypot(p.x - target.x, p.y - target.y) > 1e-3


@pytest.fixture(scope="module", params=["train", "eval"])
def episode(request):
    return generate_episode(make_scene(11), 21, 120, request.param)


@pytest.fixture(scope="module")
def records():
    return generate_dataset(5, 10, 30, "train", WorldConfig(), episodes_per_scene=4)


class TestEpisodes:
    cfg = WorldConfig()

    def test_shapes(self, episode):
        t = 120
        assert episode.poses.shape == (t + 1, 3)
        assert episode.retinas.shape == (t, self.cfg.retina_dim)
        assert episode.odometry.shape == (t, 4)
        assert episode.alt_poses.shape == (t, 3) and episode.alt_retinas.shape == (t, self.cfg.retina_dim)

    def test_first_odometry_is_zero_motion(self, episode):
        np.testing.assert_array_equal(episode.odometry[0], [0.0, 0.0, 1.0, 0.0])

    def test_odometry_recomposes_poses(self, episode):
        acc = se2_of(episode.poses[0])
        for t in range(episode.length):
            dx, dy, c, s = episode.odometry[t]
            acc = acc @ np.array([[c, -s, dx], [s, c, dy], [0, 0, 1]])
            truth = se2_of(episode.poses[t + 1])
            np.testing.assert_allclose(acc, truth, atol=1e-6)

    def test_consecutive_poses_follow_actions(self, episode):
        profile = episode.profile
        for t in range(1, episode.length):
            p = Pose(*episode.poses[t])
            for a in episode.actions[t]:
                p = step(p, a, profile, self.cfg)
            np.testing.assert_allclose(p.as_array(), episode.poses[t + 1], atol=1e-12)
            n = len(episode.actions[t])
            assert n == 1 if profile == "eval" else 1 <= n <= 8

    def test_greedy_forward_steps_approach_goal(self):
        ep = generate_episode(make_scene(12), 3, 400, "eval")
        for t in range(1, ep.length):
            if ep.actions[t] == ["forward"]:
                g = ep.goals[t]
                before = math.hypot(g[0] - ep.poses[t][0], g[1] - ep.poses[t][1])
                after = math.hypot(g[0] - ep.poses[t + 1][0], g[1] - ep.poses[t + 1][1])
                assert after <= before + 1e-12

    def test_alt_poses_within_perturbation_bounds(self, episode):
        off = episode.alt_poses[:, :2] - episode.poses[1:, :2]
        assert np.all(np.abs(off) <= 0.5 + 1e-12)
        dh = np.array([wrap_angle(a - b) for a, b in zip(episode.alt_poses[:, 2], episode.poses[1:, 2])])
        assert np.all(np.abs(dh) <= math.radians(50) + 1e-12)

    def test_alt_retinas_match_alt_poses(self, episode):
        sc = make_scene(11, self.cfg)
        for t in (0, 37, 119):
            np.testing.assert_allclose(episode.alt_retinas[t], render(sc, Pose(*episode.alt_poses[t]), self.cfg))

    def test_train_profile_uses_random_intervals(self):
        ep = generate_episode(make_scene(13), 4, 300, "train")
        sizes = {len(a) for a in ep.actions[1:]}
        assert sizes == set(range(1, 9))

    def test_deterministic(self):
        a = generate_episode(make_scene(7), 9, 50, "train")
        b = generate_episode(make_scene(7), 9, 50, "train")
        for f in ("poses", "retinas", "odometry", "alt_poses", "alt_retinas"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_length_must_be_positive(self):
        with pytest.raises(InputError):
            generate_episode(make_scene(0), 0, 0)

    def test_slice_resets_first_odometry_and_keeps_composition(self, episode):
        sl = episode.slice(30, 20)
        np.testing.assert_array_equal(sl.odometry[0], [0, 0, 1, 0])
        acc = se2_of(sl.poses[0])
        for t in range(sl.length):
            dx, dy, c, s = sl.odometry[t]
            acc = acc @ np.array([[c, -s, dx], [s, c, dy], [0, 0, 1]])
        np.testing.assert_allclose(acc, se2_of(episode.poses[50]), atol=1e-6)

    def test_noise_flags(self):
        cfg = WorldConfig(retina_noise=0.1, odometry_noise=0.01)
        a = generate_episode(make_scene(2, cfg), 1, 10, "eval", cfg)
        b = generate_episode(make_scene(2), 1, 10, "eval")
        assert not np.allclose(a.retinas, b.retinas)
        np.testing.assert_array_equal(a.odometry[0], [0, 0, 1, 0])


class TestRelPose:
    def test_axis_aligned(self):
        r = relpose(Pose(0, 0, 0), Pose(2, 0, 0))
        assert (r.distance, r.bearing) == pytest.approx((2.0, 0.0))
        assert r.rotation == pytest.approx((1.0, 0.0))

    def test_rotated_frame(self):
        r = relpose(Pose(0, 0, math.pi / 2), Pose(0, 3, math.pi / 2))
        assert (r.distance, r.bearing) == pytest.approx((3.0, 0.0), abs=1e-12)
        assert r.rotation == pytest.approx((1.0, 0.0))

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.floats(-5, 5)] * 2, st.floats(-3.1, 3.1)),
           st.tuples(*[st.floats(-5, 5)] * 2, st.floats(-3.1, 3.1)))
    def test_matches_se2_composition_and_frame_swap(self, a, g):
        ag, ga = relpose(Pose(*a), Pose(*g)), relpose(Pose(*g), Pose(*a))
        rel = np.linalg.inv(se2(*a)) @ se2(*g)
        assert ag.distance == pytest.approx(math.hypot(rel[0, 2], rel[1, 2]), abs=1e-9)
        assert ag.rotation == pytest.approx((rel[0, 0], rel[1, 0]), abs=1e-9)
        assert ag.distance == pytest.approx(ga.distance, abs=1e-9)
        if ag.distance > 1e-6:
            assert math.cos(ag.bearing) * ag.distance == pytest.approx(rel[0, 2], abs=1e-9)
            # seen from the goal, the agent lies at bearing b + pi - (goal heading - agent heading)
            phi = math.atan2(ag.rotation[1], ag.rotation[0])
            assert abs(wrap_angle(ga.bearing - (ag.bearing + math.pi - phi))) < 1e-7
        assert ga.rotation == pytest.approx((ag.rotation[0], -ag.rotation[1]), abs=1e-9)


class TestDataset:
    cfg = WorldConfig()

    def test_roundtrip_bit_exact(self, records, tmp_path):
        scenes, recs = records
        write_dataset(recs, tmp_path / "d", self.cfg, scenes)
        back = read_dataset(tmp_path / "d")
        assert len(back) == 10
        for a, b in zip(recs, back):
            assert a.scene_id == b.scene_id and a.profile == b.profile
            for f in ("poses", "retinas", "odometry", "alt_poses", "alt_retinas"):
                np.testing.assert_array_equal(getattr(a, f).astype(np.float32), getattr(b, f))
        write_dataset(back, tmp_path / "e", self.cfg, scenes)
        assert (tmp_path / "d" / "episodes.bin").read_bytes() == (tmp_path / "e" / "episodes.bin").read_bytes()
        assert (tmp_path / "d" / "manifest.json").read_bytes() == (tmp_path / "e" / "manifest.json").read_bytes()

    def test_corrupt_byte_names_episode(self, records, tmp_path):
        _, recs = records
        manifest = write_dataset(recs, tmp_path, self.cfg)
        blob = bytearray((tmp_path / "episodes.bin").read_bytes())
        blob[manifest["episodes"][3]["offset"] + 17] ^= 0xFF
        (tmp_path / "episodes.bin").write_bytes(bytes(blob))
        with pytest.raises(ChecksumError, match="episode 3"):
            read_dataset(tmp_path)

    def test_truncated_file(self, records, tmp_path):
        _, recs = records
        write_dataset(recs, tmp_path, self.cfg)
        blob = (tmp_path / "episodes.bin").read_bytes()
        (tmp_path / "episodes.bin").write_bytes(blob[:-10])
        with pytest.raises(TruncatedFileError, match="episode 9"):
            read_dataset(tmp_path)

    def test_version_mismatch(self, records, tmp_path):
        _, recs = records
        write_dataset(recs[:1], tmp_path, self.cfg)
        text = (tmp_path / "manifest.json").read_text().replace('"format_version": 1', '"format_version": 2')
        (tmp_path / "manifest.json").write_text(text)
        with pytest.raises(VersionMismatchError):
            read_dataset(tmp_path)

    def test_empty_dataset(self, tmp_path):
        write_dataset([], tmp_path, self.cfg)
        assert read_dataset(tmp_path) == []
        assert read_manifest(tmp_path)["episodes"] == []

    def test_generation_is_deterministic(self):
        _, a = generate_dataset(8, 3, 12, "eval")
        _, b = generate_dataset(8, 3, 12, "eval")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.retinas, y.retinas)


def test_perturb_pose_clips_into_arena():
    rng = np.random.default_rng(0)
    cfg = WorldConfig()
    for _ in range(200):
        p = perturb_pose(Pose(0.05, 5.95, 0.0), rng, cfg)
        assert 0 <= p.x <= cfg.arena_width and 0 <= p.y <= cfg.arena_height

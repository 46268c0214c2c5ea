from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from berrypick.cli.commands import bundled_stream_path
from berrypick.config import PerceptionConfig
from berrypick.core.models import DetectionRecord
from berrypick.core.perception import (
    CameraIntrinsics,
    ExtrinsicCalibration,
    GateReason,
    SyntheticScene,
    TargetTracker,
    Track,
    associate,
    backproject,
    gate_detection,
    latest_targets,
    process_stream,
    project,
    push_and_smooth,
    synthesize_stream,
    to_robot_frame,
)
from berrypick.errors import ConfigError, StreamError
from berrypick.utils.io import read_detections

CONFIG = PerceptionConfig()
INTR = CameraIntrinsics.from_config(CONFIG)
CALIB = ExtrinsicCalibration.from_config(CONFIG)


def _det(frame_id=0, stamp=0.0, u=320.0, v=240.0, depth=0.5, quality=0.9):
    return DetectionRecord(frame_id, stamp, u, v, depth, quality)


def test_principal_point_backprojects_onto_axis():
    np.testing.assert_allclose(backproject(INTR, 320.0, 240.0, 0.7), [0.0, 0.0, 0.7])


@pytest.mark.parametrize("depth", [0.0, -0.1, np.nan, np.inf])
def test_invalid_depth_has_no_point(depth):
    assert backproject(INTR, 300.0, 200.0, depth) is None


@given(
    st.floats(0, 639, allow_nan=False),
    st.floats(0, 479, allow_nan=False),
    st.floats(0.1, 2.0, allow_nan=False),
)
def test_projection_round_trip(u, v, depth):
    p = backproject(INTR, u, v, depth)
    u2, v2 = project(INTR, p)
    assert abs(u2 - u) < 1e-9 and abs(v2 - v) < 1e-9


def test_non_positive_focal_length_is_a_config_error():
    with pytest.raises(ConfigError):
        CameraIntrinsics(0.0, 600.0, 320.0, 240.0)


def test_extrinsic_must_be_rigid():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ConfigError):
        ExtrinsicCalibration(bad)
    mirrored = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(ConfigError, match="determinant"):
        ExtrinsicCalibration(mirrored)


@pytest.mark.parametrize(
    "det, reason",
    [
        (_det(quality=0.75), GateReason.LOW_QUALITY),
        (_det(quality=0.5, depth=0.0), GateReason.LOW_QUALITY),
        (_det(depth=0.0), GateReason.INVALID_DEPTH),
        (_det(depth=2.5), GateReason.INVALID_DEPTH),
        (_det(u=700.0), GateReason.OUT_OF_IMAGE),
    ],
)
def test_gate_rejections(det, reason):
    decision = gate_detection(det, 0.75, (0.1, 2.0), INTR)
    assert not decision.accepted
    assert decision.reason is reason


def test_gate_accepts_good_detection():
    assert gate_detection(_det(quality=0.76), 0.75, (0.1, 2.0), INTR).accepted


def test_association_prefers_nearest_then_lower_id():
    tracks = [Track(2, (100.0, 100.0)), Track(1, (120.0, 100.0)), Track(0, (300.0, 300.0))]
    track, dist = associate(tracks, _det(u=110.0, v=100.0), 40.0)
    assert track.id == 1 and dist == pytest.approx(10.0)
    track, _ = associate(tracks, _det(u=104.0, v=100.0), 40.0)
    assert track.id == 2


def test_association_outside_threshold_starts_nothing():
    track, dist = associate([Track(0, (0.0, 0.0))], _det(u=40.0, v=0.0), 40.0)
    assert track is None and dist == pytest.approx(40.0)
    assert associate([], _det(), 40.0) == (None, np.inf)


def test_sliding_window_mean():
    track = Track(0, (0.0, 0.0), buffer=deque(maxlen=3))
    outputs = [push_and_smooth(track, [float(i), 0.0, 0.0], 3) for i in range(5)]
    assert outputs[:2] == [None, None]
    np.testing.assert_allclose(outputs[2], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(outputs[4], [3.0, 0.0, 0.0])


def test_robot_frame_mapping():
    T = np.eye(4)
    T[:3, 3] = [1.0, 2.0, 3.0]
    np.testing.assert_allclose(to_robot_frame(ExtrinsicCalibration(T), [0.5, 0.0, 0.0]), [1.5, 2.0, 3.0])


def test_bundled_stream_yields_three_targets():
    detections = read_detections(bundled_stream_path())
    tracker = TargetTracker(INTR, CALIB, CONFIG)
    targets = list(tracker.process(detections))
    first_stamp = min(t.stamp for t in targets)
    first_frame = next(d.frame_id for d in detections if d.stamp == first_stamp)
    assert first_frame == 15
    assert sorted({t.track_id for t in targets}) == [0, 1, 2]
    assert tracker.rejected[GateReason.LOW_QUALITY] == 1
    assert tracker.rejected[GateReason.INVALID_DEPTH] == 1

    latest = latest_targets(targets)
    assert [t.track_id for t in latest] == [0, 1, 2]
    expected = np.array([[-0.63, -0.19, 0.60], [-0.725, -0.175 + 0.05 / 1.2, 0.55], [-0.675 + 0.04 / 3, -0.235, 0.65]])
    np.testing.assert_allclose(np.stack([t.position for t in latest]), expected, atol=1e-9)


def test_buffer_size_one_emits_every_accepted_detection():
    detections = read_detections(bundled_stream_path())
    config = PerceptionConfig(buffer_size=1)
    targets = process_stream(detections, INTR, CALIB, config)
    assert len(targets) == 60


def test_out_of_order_stamps_raise():
    records = [_det(0, 0.1), _det(1, 0.0)]
    with pytest.raises(StreamError):
        list(TargetTracker(INTR, CALIB, CONFIG).process(records))


def test_tracks_retire_after_misses():
    config = PerceptionConfig(max_misses=2)
    tracker = TargetTracker(INTR, CALIB, config)
    list(tracker.process([_det(0, 0.0, u=100.0), _det(1, 0.1, u=500.0), _det(2, 0.2, u=500.0)]))
    assert list(tracker.tracks) == [1]


def test_synthetic_scene_recovers_berries():
    berries = ((-0.65, -0.15, 0.55), (-0.7, -0.25, 0.62))
    scene = SyntheticScene(berries=berries, frames=30, pixel_noise=0.5, depth_noise=0.002,
                           spurious_per_frame=1.0)
    detections = synthesize_stream(scene, INTR, CALIB, np.random.default_rng(0))
    latest = latest_targets(process_stream(detections, INTR, CALIB, CONFIG))
    assert len(latest) == 2
    for target, berry in zip(latest, berries):
        assert np.linalg.norm(target.position - berry) < 0.01


@given(
    centers=st.lists(
        st.tuples(st.floats(0.0, 640.0), st.floats(0.0, 480.0)), min_size=1, max_size=8
    ),
    u=st.floats(0.0, 640.0),
    v=st.floats(0.0, 480.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_association_ignores_track_order(centers, u, v, seed):
    tracks = [Track(i, c) for i, c in enumerate(centers)]
    shuffled = [tracks[i] for i in np.random.default_rng(seed).permutation(len(tracks))]
    det = _det(u=u, v=v)
    track, dist = associate(tracks, det, 40.0)
    other, other_dist = associate(shuffled, det, 40.0)
    assert (track is None and other is None) or track.id == other.id
    assert dist == other_dist


@given(
    points=st.lists(
        st.tuples(*[st.floats(-10.0, 10.0)] * 3), min_size=15, max_size=15
    ),
    seed=st.integers(0, 2**32 - 1),
)
def test_full_window_mean_ignores_point_order(points, seed):
    order = np.random.default_rng(seed).permutation(15)
    first, second = Track(0, (0.0, 0.0)), Track(1, (0.0, 0.0))
    for p in points:
        mean = push_and_smooth(first, p, 15)
    for k in order:
        shuffled_mean = push_and_smooth(second, points[k], 15)
    np.testing.assert_allclose(mean, shuffled_mean, atol=1e-9)


def test_noisy_window_averages_down():
    rng = np.random.default_rng(8)
    p, s, trials = np.array([0.1, -0.2, 0.6]), 0.01, 400
    hits = 0
    for _ in range(trials):
        track = Track(0, (0.0, 0.0))
        for _ in range(15):
            mean = push_and_smooth(track, p + rng.normal(0.0, s, size=3), 15)
        hits += np.linalg.norm(mean - p) <= 4 * s / np.sqrt(15)
    assert hits / trials >= 0.99


def _rigid(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = q, rng.normal(size=3)
    return T


@given(seed=st.integers(0, 2**32 - 1))
def test_robot_frame_mapping_is_a_proper_isometry(seed):
    rng = np.random.default_rng(seed)
    calib = ExtrinsicCalibration(_rigid(rng))
    points = rng.normal(size=(4, 3))
    mapped = np.stack([to_robot_frame(calib, p) for p in points])
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(mapped[i] - mapped[j]) == pytest.approx(
                np.linalg.norm(points[i] - points[j]), abs=1e-9
            )
    # signed volume keeps its sign under a proper rotation
    volume = np.linalg.det(points[1:] - points[0])
    assert np.linalg.det(mapped[1:] - mapped[0]) == pytest.approx(volume, abs=1e-9)


@given(seed=st.integers(0, 2**32 - 1))
def test_track_count_is_bounded_by_sources(seed):
    berries = ((-0.55, -0.10, 0.58), (-0.72, -0.30, 0.62))
    scene = SyntheticScene(berries=berries, frames=30, pixel_noise=1.0, spurious_per_frame=0.5)
    detections = synthesize_stream(scene, INTR, CALIB, np.random.default_rng(seed))
    # let spurious detections through the gate
    tracker = TargetTracker(INTR, CALIB, PerceptionConfig(min_quality=0.05))
    list(tracker.process(detections))
    spurious = sum(d.quality < 0.5 for d in detections)
    assert tracker.next_id <= len(berries) + spurious

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flow4d.synthetic import (SHAPES, ArticulatedDumbbell, BreathingSphere, TranslatingSphere, correspondence_displacement,
                              frame_times, generate_dataset, ground_truth_flow, load_dataset, load_sequence,
                              make_shape, random_shape, sample_occupancy_queries, sample_surface_sequence,
                              save_dataset, save_sequence, shape_from_dict)


@pytest.mark.parametrize("kind", sorted(SHAPES))
def test_surface_points_have_zero_level(kind):
    shape = random_shape(kind, np.random.default_rng(4), 8)
    for t in (0.0, 0.37, 1.0):
        pts = shape.surface_points(500, t, np.random.default_rng(1))
        assert np.abs(shape.sdf(pts, t)).max() < 1e-9


@pytest.mark.parametrize("kind", sorted(SHAPES))
def test_deform_and_undeform_are_inverse(kind):
    shape = random_shape(kind, np.random.default_rng(5), 8)
    q = np.random.default_rng(2).uniform(-0.4, 0.4, size=(300, 3))
    for t in (0.0, 0.5, 1.0):
        assert np.abs(shape.undeform(shape.deform(q, t), t) - q).max() < 1e-9


@pytest.mark.parametrize("kind", sorted(SHAPES))
def test_shapes_stay_inside_the_cube(kind):
    rng = np.random.default_rng(0)
    for _ in range(10):
        random_shape(kind, rng, 8).check_bounds()


def test_out_of_bounds_shape_rejected():
    with pytest.raises(ValueError, match="out of bounds"):
        TranslatingSphere(radius=0.3, start=(0.0, 0, 0), velocity=(0.3, 0, 0)).check_bounds()


def test_sequence_is_deterministic_and_keeps_correspondence():
    shape = ArticulatedDumbbell()
    a = sample_surface_sequence(shape, 200, seed=3)
    b = sample_surface_sequence(shape, 200, seed=3)
    assert np.array_equal(a.points, b.points)
    assert a.points.shape == (shape.n_frames, 200, 3)
    # trajectory j in every frame is the same material point
    rest = shape.undeform(a.points[0], a.times[0])
    for t in range(1, a.n_frames):
        assert np.allclose(shape.undeform(a.points[t], a.times[t]), rest, atol=1e-9)


def test_ground_truth_flow_matches_next_frame():
    shape = BreathingSphere()
    seq = sample_surface_sequence(shape, 100, seed=0)
    flow = ground_truth_flow(shape, seq.points[2], seq.times[2], seq.times[3])
    assert np.allclose(flow.points_to, seq.points[3], atol=1e-12)
    assert np.allclose(flow.vectors, correspondence_displacement(shape, seq.points[2], seq.times[2], seq.times[3]))


def test_ground_truth_flow_rejects_points_outside_support():
    shape = TranslatingSphere()
    with pytest.raises(ValueError, match=r"indices \[1\]"):
        ground_truth_flow(shape, [[-0.15, 0, 0], [0.45, 0.45, 0.45]], 0.0, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 20), st.integers(0, 10 ** 6))
def test_uneven_times_are_increasing_with_fixed_ends(n, seed):
    t = frame_times(n, "uneven", np.random.default_rng(seed))
    assert t[0] == 0.0 and t[-1] == 1.0 and np.all(np.diff(t) > 0)


def test_frame_times_even_and_errors():
    assert np.allclose(frame_times(5, "even", np.random.default_rng(0)), [0, 0.25, 0.5, 0.75, 1])
    with pytest.raises(ValueError):
        frame_times(5, "sideways", np.random.default_rng(0))


def test_noise_is_clipped_to_cube():
    seq = sample_surface_sequence(TranslatingSphere(radius=0.2, start=(0.2, 0, 0), velocity=(0.05, 0, 0)),
                                  300, noise_sigma=0.2, seed=0)
    assert np.abs(seq.points).max() <= 0.5


def test_occupancy_queries_labels_match_indicator():
    shape = make_shape("two_lobe_capsule")
    occ = sample_occupancy_queries(shape, 0.3, 200, 200, 0.02, seed=1)
    assert occ.points.shape == (400, 3)
    assert np.array_equal(occ.labels.astype(bool), shape.indicator(occ.points, 0.3))
    assert 0 < occ.labels.mean() < 1


def test_sequence_save_load_round_trip(tmp_path):
    seq = sample_surface_sequence(ArticulatedDumbbell(n_frames=5), 50, "uneven", 0.01, seed=2)
    seq.name = "x"
    save_sequence(tmp_path / "x.f4d", seq)
    back = load_sequence(tmp_path / "x.f4d")
    assert np.array_equal(back.points, seq.points) and np.array_equal(back.times, seq.times)
    assert back.settings["temporal_mode"] == "uneven"
    assert back.shape.to_dict() == seq.shape.to_dict()
    assert shape_from_dict(seq.shape.to_dict()).to_dict() == seq.shape.to_dict()


def test_dataset_is_byte_identical_across_runs(tmp_path):
    for d in ("a", "b"):
        save_dataset(tmp_path / d, generate_dataset(["breathing_sphere", "articulated_dumbbell"], 2, 4, 30, seed=9))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 8
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(load_dataset(tmp_path / "a")) == 4


def test_sequence_validation():
    from flow4d.synthetic import PointCloudSequence

    with pytest.raises(ValueError):
        PointCloudSequence(np.zeros((2, 5, 3)), [0.5, 0.5])
    with pytest.raises(ValueError):
        sample_surface_sequence(TranslatingSphere(), 5)

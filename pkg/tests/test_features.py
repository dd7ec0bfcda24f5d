import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajmoe import core, features
from trajmoe.config import ModelConfig
from trajmoe.core import Tensor
from trajmoe.features import Trajectory, UnknownLocationError, pad_batch

from helpers import tiny_city

MIDNIGHT = 1704067200  # a Monday, 00:00 UTC


def traj(locs, times=None, city=0, user=0):
    if times is None:
        times = MIDNIGHT + 3600 * np.arange(len(locs))
    return Trajectory(city, user, locs, times)


def test_trajectory_requires_increasing_times():
    with pytest.raises(ValueError):
        Trajectory(0, 0, [1, 2], [MIDNIGHT, MIDNIGHT])


def test_time_of_day_slot_nearest_rule():
    t = MIDNIGHT + np.array([14 * 60, 16 * 60, 23 * 3600 + 50 * 60, 12 * 3600 + 15 * 60 - 1])
    assert features.time_of_day_slot(t).tolist() == [0, 1, 0, 24]


def test_day_of_week_monday_is_zero():
    days = MIDNIGHT + 86400 * np.arange(8) + 3600
    assert features.day_of_week(days).tolist() == [0, 1, 2, 3, 4, 5, 6, 0]


def test_stay_bucket_boundaries():
    minutes = np.array([0, 29, 30, 89, 90, 24 * 60 - 1, 24 * 60, 10 * 24 * 60])
    assert features.stay_bucket(minutes * 60).tolist() == [0, 0, 1, 2, 3, 47, 48, 48]


def test_temporal_features_last_stay_is_zero():
    t = MIDNIGHT + np.array([0, 90 * 60, 100 * 60])
    tf = features.temporal_features(t)
    assert tf.stay.tolist() == [3, 0, 0]
    with pytest.raises(ValueError):
        features.temporal_features([5, 5])


@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=30))
def test_temporal_ranges(gaps):
    t = MIDNIGHT + np.cumsum(gaps)
    tf = features.temporal_features(t)
    assert tf.tod.min() >= 0 and tf.tod.max() < 48
    assert tf.dow.min() >= 0 and tf.dow.max() < 7
    assert tf.stay.min() >= 0 and tf.stay.max() <= 48


def test_build_foundational_lookup_and_unknown_id():
    city = tiny_city(n=5)
    tr = traj([0, 3, 3, 1, 4])
    poi, xy, r = features.build_foundational(tr, city)
    assert poi.shape == (5, 6) and xy.shape == (5, 2) and r.shape == (5,)
    for i, loc in enumerate(tr.locations):
        assert np.array_equal(poi[i], city.poi_features[loc])
        assert np.array_equal(xy[i], city.coords[loc])
        assert r[i] == city.ranks[loc]
    assert np.array_equal(poi[1], poi[2])
    with pytest.raises(UnknownLocationError, match="location id 9 not in city 0"):
        features.build_foundational(traj([0, 9]), city)


def test_pad_batch_masks_and_targets():
    city = tiny_city(n=5)
    b = pad_batch([traj([0, 1, 2]), traj([4, 3, 2, 1, 0])], city, 5)
    assert b.padding_mask.astype(int).tolist() == [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]]
    assert b.targets[0, :2].tolist() == [1, 2]
    assert b.valid_target_mask.astype(int).tolist() == [[1, 1, 0, 0, 0], [1, 1, 1, 1, 0]]
    assert pad_batch([traj([0, 1])], city, 4).valid_target_mask.sum() == 1
    with pytest.raises(ValueError, match="exceeds T"):
        pad_batch([traj([0, 1, 2])], city, 2)


def test_pad_batch_targets_match_loop_oracle(rng):
    city = tiny_city(n=6)
    trajs = [traj(rng.integers(0, 6, size=rng.integers(2, 9)).tolist(), user=u) for u in range(7)]
    b = pad_batch(trajs, city, 8)
    for i, tr in enumerate(trajs):
        for j in range(8):
            if j + 1 < len(tr):
                assert b.valid_target_mask[i, j] and b.targets[i, j] == tr.locations[j + 1]
            else:
                assert not b.valid_target_mask[i, j]


def test_causal_mask_rows():
    assert features.causal_mask(1).tolist() == [[True]]
    assert features.causal_mask(3).astype(int).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
    for T in (1, 5, 64):
        assert features.causal_mask(T).sum(axis=1).tolist() == list(range(1, T + 1))


def _emb_params(seed=0):
    cfg = ModelConfig(d=8, heads=2, poi_categories=3)
    return core.constants(features.init_params(cfg, np.random.default_rng(seed)))


def test_embed_streams_sum_and_padding(rng):
    city = tiny_city(n=5)
    b = pad_batch([traj([0, 1, 2]), traj([4, 3, 2, 1, 0])], city, 6)
    p = _emb_params()
    e = features.embed_streams(b, p)
    assert np.array_equal(e.traj.data, e.poi.data + e.pos.data + e.pop.data)
    for t in (e.poi, e.pos, e.pop, e.traj, e.ts):
        assert np.all(t.data[0, 3:] == 0)
        assert t.shape == (2, 6, 8)
    m = b.padding_mask
    expect_ts = p["emb.tod"].data[b.tod] + p["emb.dow"].data[b.dow] + p["emb.stay"].data[b.stay]
    assert np.allclose(e.ts.data[m], expect_ts[m], atol=1e-12)
    expect_poi = b.poi @ p["emb.poi.w"].data + p["emb.poi.b"].data
    assert np.allclose(e.poi.data[m], expect_poi[m], atol=1e-12)


def test_embed_streams_single_stream_left(rng):
    city = tiny_city(n=5)
    b = pad_batch([traj([0, 1, 2, 3])], city, 4)
    p = _emb_params(3)
    for k in ("emb.pos.w", "emb.pos.b", "emb.pop.table"):
        p[k] = Tensor(np.zeros_like(p[k].data))
    e = features.embed_streams(b, p)
    assert np.array_equal(e.traj.data, e.poi.data)


def test_embed_streams_ignore_padded_content(rng):
    city = tiny_city(n=5)
    b = pad_batch([traj([0, 1, 2])], city, 5)
    p = _emb_params()
    before = features.embed_streams(b, p)
    b.poi[0, 3:] = rng.normal(size=(2, 6))
    b.coords[0, 3:] = 9.0
    b.ranks[0, 3:] = 4
    b.tod[0, 3:] = 17
    after = features.embed_streams(b, p)
    for name in ("poi", "pos", "pop", "traj", "ts"):
        assert np.array_equal(getattr(before, name).data, getattr(after, name).data)


def test_embed_streams_bucket_out_of_range():
    city = tiny_city(n=5)
    b = pad_batch([traj([0, 1, 2])], city, 3)
    b.stay[0, 0] = 49
    with pytest.raises(IndexError):
        features.embed_streams(b, _emb_params())

import numpy as np
import pytest

from foveassl import checkpoint
from foveassl.contrastive import EncoderConfig
from foveassl.geometry import CropSpec
from foveassl.ingest import GazeSource, build_shards
from foveassl.pairs import AugmentPolicy
from foveassl.shards import read_shards
from foveassl.synth import SyntheticSceneSpec, World
from foveassl.train import (
    PairDataset, TrainConfig, batch_anchors, read_replay_log, replay_pairs, train,
    write_loss_csv, write_replay_log,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    world = World(SyntheticSceneSpec(n_videos=4, video_frames=75))
    videos = [v.as_video() for v in world.videos()]
    res = build_shards(videos, GazeSource(), CropSpec(32, 64), tmp_path_factory.mktemp("shards"))
    return PairDataset(list(read_shards(res.manifest)), CropSpec(32, 64))


def small_config(**kw):
    enc = EncoderConfig(input_size=16, backbone=("conv:8:3:2", "relu", "conv:16:3:2", "relu", "gap"),
                        hidden=32, out_dim=16)
    base = dict(encoder=enc, policy=AugmentPolicy(out_size=16), batch_size=32, steps=10,
                delta_t=3, base_lr=1.6)
    base.update(kw)
    return TrainConfig(**base)


def test_dataset_layout(dataset):
    assert len(dataset) == 4 * 72
    assert dataset.images.shape[1:] == (32, 32, 3)


def test_loss_decreases(dataset):
    res = train(dataset, small_config(steps=200))
    losses = np.array([h.loss_value for h in res.history])
    assert len(losses) == 200 and np.isfinite(losses).all()
    assert losses[-20:].mean() < losses[:20].mean()
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert np.polyfit(np.arange(len(avg)), avg, 1)[0] < 0


def test_rerun_is_bit_identical(dataset, tmp_path):
    a = train(dataset, small_config(seed=3))
    b = train(dataset, small_config(seed=3, prefetch=2))
    checkpoint.save(tmp_path / "a.fvck", a.encoder.config, a.state)
    checkpoint.save(tmp_path / "b.fvck", b.encoder.config, b.state)
    assert (tmp_path / "a.fvck").read_bytes() == (tmp_path / "b.fvck").read_bytes()
    assert [h.loss_value for h in a.history] == [h.loss_value for h in b.history]
    c = train(dataset, small_config(seed=4))
    assert c.history[0].loss_value != a.history[0].loss_value


def test_zero_window_pairs_are_self_pairs(dataset, tmp_path):
    cfg = small_config(delta_t=0, steps=3)
    res = train(dataset, cfg)
    write_replay_log(res.seeds, tmp_path / "replay.log")
    for b, s in read_replay_log(tmp_path / "replay.log"):
        assert all(a == n for a, n in replay_pairs(dataset, cfg, b, s))


def test_replayed_pairs_stay_in_window(dataset):
    cfg = small_config(delta_t=1, steps=2)
    res = train(dataset, cfg)
    for b, s in res.seeds:
        for a, n in replay_pairs(dataset, cfg, b, s):
            assert dataset.video_ids[a] == dataset.video_ids[n]
            assert 0 < abs(int(dataset.frame_index[a]) - int(dataset.frame_index[n])) <= 5


def test_anchors_cover_epoch_without_repeats():
    seen = np.concatenate([batch_anchors(100, 20, 0, b) for b in range(5)])
    assert sorted(seen) == list(range(100))
    assert not np.array_equal(batch_anchors(100, 20, 0, 0), batch_anchors(100, 20, 0, 5))


def test_steps_from_epochs():
    assert small_config(steps=0, epochs=3).total_steps(100) == 9
    with pytest.raises(ValueError):
        small_config(steps=0).total_steps(10)


def test_policy_must_match_encoder(dataset):
    with pytest.raises(ValueError):
        train(dataset, small_config(policy=AugmentPolicy(out_size=24)))


def test_loss_csv(dataset, tmp_path):
    res = train(dataset, small_config(steps=2))
    write_loss_csv(res.history, tmp_path / "loss.csv")
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,pos_sim,neg_sim,lr" and len(rows) == 3

import pytest

from foveassl.config import SEED_ENV, ConfigError, RunConfig
from foveassl.ingest import GazeMode


def test_defaults_are_the_published_constants():
    cfg = RunConfig()
    assert (cfg.resolution, cfg.crop, cfg.batch_size, cfg.base_lr) == (540, 224, 512, 1.6)
    assert (cfg.tau, cfg.momentum, cfg.weight_decay, cfg.warmup_fraction) == (0.1, 0.996, 1e-6, 0.01)
    assert (cfg.hidden, cfg.out_dim, cfg.delta_t, cfg.fps) == (4096, 256, 15, 5)
    assert cfg.gaze_source_mode() is GazeMode.GROUND_TRUTH


def test_text_roundtrip(tmp_path):
    cfg = RunConfig.desk(gaze_mode="center", delta_t=0.5, seeds=[3, 4], symmetric=True,
                         scale=(0.2, 0.9), out_dir="x y")
    cfg.write(tmp_path / "c.ini")
    assert RunConfig.read(tmp_path / "c.ini") == cfg
    assert "[train]" in cfg.to_text() and "[paths]" in cfg.to_text()


def test_string_overrides_and_unknown_keys():
    cfg = RunConfig.desk().with_strings({"delta-t": "2", "include_positive": "no", "scale": "0.3, 1"})
    assert cfg.delta_t == 2.0 and cfg.include_positive is False and cfg.scale == (0.3, 1.0)
    with pytest.raises(ConfigError):
        cfg.with_strings({"nonsense": "1"})
    with pytest.raises(ConfigError):
        cfg.with_strings({"batch_size": "many"})


def test_env_seed():
    cfg = RunConfig.desk().with_env({SEED_ENV: "17"})
    assert cfg.seed == 17 and cfg.seeds == [17]
    assert RunConfig.desk().with_env({}).seed == RunConfig.desk().seed


@pytest.mark.parametrize("changes", [
    {"gaze_mode": "peripheral"}, {"crop": 600}, {"crop": 0}, {"delta_t": -1},
    {"momentum": 1.5}, {"tau": 0}, {"source": "webcam"}, {"input_size": 64, "crop": 32},
])
def test_validation(changes):
    with pytest.raises(ConfigError):
        RunConfig.desk(**changes)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.read(tmp_path / "nope.ini")


def test_views_onto_module_configs():
    cfg = RunConfig.desk(seed=5)
    tc = cfg.train_config()
    assert tc.seed == 5 and tc.batch_size == 64 and tc.encoder.input_size == 32
    assert cfg.train_config(seed=9).seed == 9
    assert cfg.crop_spec().n == 32 and cfg.crop_spec().resolution == 64
    assert cfg.probe_settings().n_aug == 4

import json

import pytest

from vinil.config import ExperimentConfig, write_config


class TestExperimentConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.hyper.epochs_per_session == 20 and cfg.hyper.batch_size == 64
        assert cfg.hyper.w_c == 0.7 and cfg.hyper.w_b == 0.03
        assert cfg.protocol.n_tasks == 5 and cfg.protocol.categories_per_task == 2
        assert cfg.encoder.kind == "mlp"

    def test_full_scale(self):
        cfg = ExperimentConfig.full_scale()
        assert (cfg.hyper.epochs_per_session, cfg.hyper.batch_size, cfg.protocol.k_nn) == (200, 256, 100)

    def test_json_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(seed=4, cross_dataset="synthB")
        cfg.strategy.method = "replay"
        cfg.encoder.hidden = (32, 16)
        path = write_config(cfg, tmp_path / "c.json")
        back = ExperimentConfig.from_json_file(path)
        assert back == cfg
        assert back.to_json() == cfg.to_json()

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown keys \\['sede'\\]"):
            ExperimentConfig.from_dict({"sede": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="config.hyper: unknown keys \\['lr'\\]"):
            ExperimentConfig.from_dict({"hyper": {"lr": 0.1}})

    def test_nested_must_be_object(self):
        with pytest.raises(ValueError, match="expected an object"):
            ExperimentConfig.from_dict({"hyper": 3})

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"strategy": {"method": "lwf"}})
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"hyper": {"w_c": 2.0}})

    def test_image_size_propagates(self):
        cfg = ExperimentConfig.from_dict({"data": {"image_size": 16}})
        assert cfg.encoder.input_shape == (3, 16, 16)

    def test_serializable(self):
        d = json.loads(ExperimentConfig().to_json())
        assert set(d) >= {"dataset", "seed", "encoder", "strategy", "hyper", "protocol", "output_dir"}

    def test_tag(self):
        cfg = ExperimentConfig.from_dict({"strategy": {"method": "ewc", "supervision": "label"}})
        assert cfg.tag == "ewc-label"

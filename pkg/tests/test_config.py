import pytest

from liafkd.config import PRESETS, ConfigError, DistillConfig, dump_config, from_mapping, load_config


def test_defaults_valid():
    cfg = DistillConfig().validate()
    assert cfg.K == 6 and cfg.lam == 100.0 and cfg.mu == 0.1
    assert cfg.momentum == 0.9 and cfg.weight_decay == 1e-4
    assert cfg.mask_mode == "separate" and cfg.softmax_scope == "batch" and cfg.detach_scores


@pytest.mark.parametrize("change", [{"K": 0}, {"mu": -1.0}, {"lam": -0.5}, {"mask_mode": "both"},
                                    {"softmax_scope": "pixel"}, {"rescale": "max"}, {"lr_student": 0.0}])
def test_invalid_values(change):
    with pytest.raises(ConfigError):
        DistillConfig().replace(**change)


def test_unknown_key_in_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("K: 6\nlamda: 2.0\n")
    with pytest.raises(ConfigError, match="lamda"):
        load_config(path)


def test_nested_sections_and_types(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("selectors:\n  K: 12\n  mu: 1\nstudent:\n  student_epochs: 3\ndetach_scores: false\n")
    cfg = load_config(path)
    assert cfg.K == 12 and cfg.mu == 1.0 and isinstance(cfg.mu, float)
    assert cfg.student_epochs == 3 and cfg.detach_scores is False


def test_wrong_type():
    with pytest.raises(ConfigError):
        from_mapping({"K": "six"})
    with pytest.raises(ConfigError):
        from_mapping({"K": True})


def test_env_override(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lam: 2.0\n")
    cfg = load_config(path, environ={"LIAFKD_LAM": "3.5", "LIAFKD_MASK_MODE": "shared_mean", "HOME": "/x"})
    assert cfg.lam == 3.5 and cfg.mask_mode == "shared_mean"


def test_unknown_env_key():
    with pytest.raises(ConfigError):
        load_config(environ={"LIAFKD_LAMBDA": "1"})


def test_keyword_override_wins():
    cfg = load_config(environ={"LIAFKD_SEED": "4"}, seed=9)
    assert cfg.seed == 9


def test_presets():
    assert from_mapping({"preset": "recommended"}).rescale == "mean_one"
    smoke = from_mapping({"preset": "smoke", "K": 3})
    assert smoke.train_scenes == PRESETS["smoke"]["train_scenes"] and smoke.K == 3
    with pytest.raises(ConfigError):
        from_mapping({"preset": "huge"})


def test_dump_roundtrip(tmp_path):
    cfg = DistillConfig().replace(K=2, rescale="mean_one", seed=5)
    path = tmp_path / "out.yaml"
    dump_config(cfg, path)
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()


def test_digest_changes_with_config():
    assert DistillConfig().digest() != DistillConfig().replace(seed=1).digest()

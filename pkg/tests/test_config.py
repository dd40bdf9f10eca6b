import json

import pytest
from pydantic import ValidationError

from stagefuse.config import DATASET_ROOT_ENV, ExperimentConfig, load_config
from stagefuse.errors import InvalidConfig
from stagefuse.imagecore import IMAGENET_STATS

from .util import tmp_path


def write_config(**data):
    root = tmp_path() / "data"
    root.mkdir(exist_ok=True)
    data.setdefault("dataset_root", str(root))
    path = tmp_path() / "config.json"
    path.write_text(json.dumps(data))
    return path


def test_defaults():
    cfg = load_config(write_config(), environ={})
    assert cfg.stages == 5
    assert cfg.backbones == ["conv", "attention", "wavelet"]
    assert cfg.input_size("conv") == 224
    assert cfg.input_size("wavelet") == 296
    assert cfg.fusion == "optimized"
    assert cfg.attack.epsilons == [0.005, 0.01, 0.03, 0.05]
    assert cfg.normalization_stats() == IMAGENET_STATS
    assert cfg.augment_for("conv") is None


def test_stage_hyperparams_follow_the_backbone():
    cfg = load_config(write_config(), environ={})
    assert cfg.stage_hyperparams("wavelet").epochs_per_stage == 4
    assert cfg.stage_hyperparams("conv").initial_lr == 1e-4
    pinned = load_config(write_config(training={"epochs_per_stage": 2}),
                         environ={})
    assert pinned.stage_hyperparams("wavelet").epochs_per_stage == 2


def test_backbones_are_ordered_with_conv_first():
    cfg = load_config(write_config(backbones=["wavelet", "conv"]),
                      environ={})
    assert cfg.backbones == ["conv", "wavelet"]


def test_overrides_and_environment():
    other = tmp_path() / "other"
    other.mkdir()
    path = write_config(seed=1)
    cfg = load_config(
        path,
        {"seed": 7, "out": None, "attack.epsilons": [0.1],
         "training.batch_size": 4},
        environ={DATASET_ROOT_ENV: str(other)})
    assert cfg.seed == 7
    assert cfg.attack.epsilons == [0.1]
    assert cfg.training.batch_size == 4
    assert cfg.dataset_root == other


def test_augment_and_adversarial_settings():
    cfg = load_config(write_config(
        input_sizes={"conv": 64},
        augment={"conv": {"hflip_prob": 0.0}},
        attack={"epsilon": 0.01, "epochs": 2},
    ), environ={})
    augment = cfg.augment_for("conv")
    assert augment.output_size == 64
    assert augment.hflip_prob == 0.0
    adversarial = cfg.adversarial_training(clamp=(0.0, 1.0))
    assert (adversarial.epsilon, adversarial.epochs) == (0.01, 2)
    assert adversarial.clamp == (0.0, 1.0)


@pytest.mark.parametrize("data, field", [
    ({"stages": 0}, "stages"),
    ({"backbones": ["conv", "conv"]}, "backbones"),
    ({"backbones": ["resnet"]}, "backbones"),
    ({"fusion": "stacking"}, "fusion"),
    ({"attack": {"epsilons": [-0.1]}}, "epsilons"),
    ({"training": {"learning_rate": 1.0}}, "learning_rate"),
    ({"dataset_root": "/definitely/not/here"}, "dataset_root"),
])
def test_invalid_fields(data, field):
    with pytest.raises(ValidationError, match=field):
        load_config(write_config(**data), environ={})


def test_invalid_json():
    path = tmp_path() / "broken.json"
    path.write_text("{")
    with pytest.raises(InvalidConfig, match="not valid JSON"):
        load_config(path, environ={})
    path.write_text("[1, 2]")
    with pytest.raises(InvalidConfig, match="JSON object"):
        load_config(path, environ={})


def test_config_is_frozen():
    cfg = ExperimentConfig(dataset_root=tmp_path())
    with pytest.raises(ValidationError):
        cfg.seed = 3

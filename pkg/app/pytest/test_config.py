import pytest

from app.internal.config import ConfigFileError, TrainConfig, dump_config, load_config, parse_override

from .mock import FULL_SCALE_PRESET, TOY_PRESET


@pytest.mark.parametrize("preset", [TOY_PRESET, FULL_SCALE_PRESET])
def test_presets_survive_dump_and_reload(preset):
    config = load_config(preset)
    assert load_config(text=dump_config(config)) == config


def test_toy_preset_values():
    config = load_config(TOY_PRESET)
    assert config.encoder.geometry == "toy"
    assert config.context.kind == "conformer"
    assert config.context.model_dim == 64
    assert config.quantizer.entries_per_group == 16
    assert config.objective.num_distractors == 10
    assert config.heads.context_layers == config.heads.target_layers == 2
    assert config.data.manifest is None


def test_full_scale_preset_values():
    config = load_config(FULL_SCALE_PRESET)
    assert config.encoder.k_tail == 2
    assert config.encoder.tail_kind == "dynamic"
    assert config.context.num_blocks == 14
    assert config.quantizer.entries_per_group == 320
    assert config.optimizer.warmup_steps == 32000


def test_defaults_without_a_file():
    assert load_config() == TrainConfig()


def test_overrides_apply_on_top_of_the_file():
    config = load_config(TOY_PRESET, ["optimizer.total_steps=20", "augment.apply_prob=0", "train.seed=7"])
    assert config.optimizer.total_steps == 20
    assert config.augment.apply_prob == 0.0
    assert config.train.seed == 7


@pytest.mark.parametrize("total_steps, warmup", [(500, 50), (20, 2), (5, 0)])
def test_toy_preset_warmup_follows_total_steps(total_steps, warmup):
    config = load_config(TOY_PRESET, [f"optimizer.total_steps={total_steps}"])
    assert config.optimizer.warmup_steps == warmup


def test_empty_override_unsets_a_key():
    config = load_config(text="[optimizer]\ntotal_steps = 1000\nwarmup_steps = 5\n",
                         overrides=["optimizer.warmup_steps="])
    assert config.optimizer.warmup_steps == 100


def test_heads_layers_sets_both_heads():
    config = load_config(text="[heads]\nlayers = 3\ncontext_layers = 0\n")
    assert config.heads.context_layers == 3
    assert config.heads.target_layers == 3


def test_heads_can_differ():
    config = load_config(text="[heads]\ncontext_layers = 4\ntarget_layers = 0\n")
    assert config.heads.context_head(16).num_layers == 4
    assert config.heads.target_head(16).num_layers == 0


@pytest.mark.parametrize(
    ("text", "overrides", "match"),
    [
        ("[nonsense]\nx = 1\n", [], "nonsense"),
        ("[optimizer]\nmomentum = 0.9\n", [], "momentum"),
        ("", ["model.width=3"], "model"),
        ("", ["encoder.k_tail"], "section.key=value"),
        ("", ["k_tail=2"], "section.key=value"),
    ],
)
def test_unknown_names_are_rejected(text, overrides, match):
    with pytest.raises(ConfigFileError, match=match):
        load_config(text=text, overrides=overrides)


@pytest.mark.parametrize(
    "override",
    [
        "heads.layers=1",
        "augment.apply_prob=1.5",
        "augment.snr_low=20",
        "context.model_dim=100",
        "context.depthwise_kernel=4",
        "optimizer.warmup_steps=500000",
        "encoder.tail_kind=standard",
        "quantizer.temperature_floor=3",
    ],
)
def test_invalid_values_are_rejected(override):
    with pytest.raises(ConfigFileError):
        load_config(overrides=[override])


def test_parse_override_keeps_equals_in_the_value():
    assert parse_override("data.manifest=/a=b/train.tsv") == ("data", "manifest", "/a=b/train.tsv")


def test_syntax_error_is_a_config_error():
    with pytest.raises(ConfigFileError):
        load_config(text="no section header\n")

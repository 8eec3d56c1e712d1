import pytest

from hmpe.heads import BoxTarget
from hmpe.utils.config import PipelineConfig, load_config, read_config_file
from hmpe.utils.errors import ConfigError


def test_defaults():
    cfg = load_config(environ={})
    assert cfg == PipelineConfig()
    assert cfg.box == BoxTarget(0.5, 0.5, 0.3, 0.3)
    assert cfg.grid == (16, 16)


def test_config_file_values_are_typed(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed=7\nlambda=0.25\nunit_shift=false\nscales=1,2\nreweight=soft\n")
    values = read_config_file(path)
    assert values == {"seed": 7, "lam": 0.25, "unit_shift": False, "scales": (1, 2), "reweight": "soft"}
    cfg = load_config(path, environ={})
    assert cfg.lam == 0.25 and cfg.scales == (1, 2) and not cfg.unit_shift


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("colour=red\n")
    with pytest.raises(ConfigError) as err:
        load_config(path, environ={})
    assert err.value.key == "colour"


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg", environ={})


def test_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed=7\ntau=0.2\n")
    assert load_config(path, environ={"HMPE_SEED": "11"}).seed == 11
    cfg = load_config(path, overrides={"seed": 3, "tau": None}, environ={"HMPE_SEED": "11"})
    assert cfg.seed == 3
    assert cfg.tau == 0.2


@pytest.mark.parametrize(
    "key, value",
    [
        ("tau", 1.0),
        ("lam", 1.5),
        ("layers", 9),
        ("depth", 63),
        ("heads", 5),
        ("reweight", "medium"),
        ("scales", (0, 2)),
        ("target", "0.5,0.5,0,0.3"),
        ("seed", -1),
    ],
)
def test_invalid_values_name_their_key(key, value):
    with pytest.raises(ConfigError) as err:
        PipelineConfig(**{key: value})
    assert err.value.key == key


def test_unparseable_value_names_its_key():
    with pytest.raises(ConfigError) as err:
        PipelineConfig().updated(layers="three")
    assert err.value.key == "layers"


def test_text_form_is_sorted_and_reloads(tmp_path):
    cfg = PipelineConfig(seed=5, lam=0.75, scales=(1, 2))
    lines = cfg.to_text().splitlines()
    assert lines == sorted(lines)
    assert "scales=1,2" in lines and "unit_shift=true" in lines
    assert load_config(cfg.save(tmp_path / "config.txt"), environ={}) == cfg


def test_grids_need_not_divide_the_pyramid_scales():
    cfg = PipelineConfig(height=10, width=10)
    assert cfg.scales == (1,)
    assert PipelineConfig(height=6, width=6, scales=(1, 2, 4)).scales == (1, 2, 4)

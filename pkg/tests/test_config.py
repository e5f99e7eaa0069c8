from pathlib import Path

import pytest

from polythm.config import KINDS, ConfigError, ExperimentConfig, load_config, parse_config

CONFIGS = sorted((Path(__file__).parents[1] / "configs").glob("*.ini"))


def test_minimal_config():
    cfg = parse_config("[experiment]\nkind = convergence-h\nN = 100 310\nell = 2\n")
    assert cfg.N == (100, 310) and cfg.ell == (2,) and cfg.variants == ("stab",)
    assert cfg.sweep() == [None]


def test_typed_values_and_comments():
    cfg = parse_config(
        """
        [experiment]
        kind = robustness-theta   # inline comment
        N = 310
        ell = 3
        variants = old, vol
        theta = 1 1e-2 1e-4
        mirrored = yes
        tol = 1e-8
        """.replace("\n        ", "\n")
    )
    assert cfg.theta == (1.0, 1e-2, 1e-4) and cfg.sweep() == [1.0, 1e-2, 1e-4]
    assert cfg.variants == ("old", "vol") and cfg.mirrored is True and cfg.tol == 1e-8


@pytest.mark.parametrize(
    "body, match",
    [
        ("kind = bogus\nN = 1\nell = 1", "unknown experiment kind"),
        ("kind = convergence-h\nN = 1\nell = 0", "degrees"),
        ("kind = convergence-h\nN = 1\nell = 1\nvariants = upwind", "variants"),
        ("kind = convergence-h\nN = 1\nell = 1\ncolour = red", "unknown key"),
        ("kind = convergence-h\nell = 1", "missing required key 'N'"),
        ("kind = convergence-h\nN = ten\nell = 1", "bad value for N"),
        ("kind = robustness-theta\nN = 1\nell = 1", "theta list"),
        ("kind = convergence-h\nN = 1\nell = 1\nmirrored = maybe", "mirrored"),
        ("kind = convergence-h\nN =\nell = 1", "nonempty"),
    ],
)
def test_invalid_configs(body, match):
    with pytest.raises(ConfigError, match=match):
        parse_config("[experiment]\n" + body)


def test_missing_section():
    with pytest.raises(ConfigError, match="section"):
        parse_config("kind = convergence-h\n")


def test_heavy_marking():
    cfg = ExperimentConfig(kind="convergence-p", N=(100,), ell=(1, 5))
    assert cfg.is_heavy(100, 5) and cfg.is_heavy(10000, 2) and not cfg.is_heavy(3100, 4)


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.kind in KINDS


def test_one_config_per_experiment_kind():
    assert {load_config(p).kind for p in CONFIGS} == set(KINDS)

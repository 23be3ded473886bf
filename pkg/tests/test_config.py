import pytest

from himoe.config import ConfigError, default_config, format_config, load_config, parse_config


def test_empty_text_is_default():
    assert parse_config("") == default_config()
    assert parse_config("# only a comment\n\n   \n") == default_config()


def test_parse_values_and_comments():
    cfg = parse_config("""
        variant = grouped      # trailing comment
        num_experts = 6
        group_sizes = 2,4
        k_per_group = 1,2
        lambda_inter = 0.2
        steps = 7
    """)
    r = cfg.train.router
    assert r.variant == "grouped" and r.num_experts == 6
    assert r.partition.sizes == (2, 4) and r.k_per_group == (1, 2)
    assert r.lambda_inter == 0.2 and cfg.train.steps == 7


def test_scalar_k_broadcasts_to_groups():
    cfg = parse_config("num_groups = 2\nk_per_group = 2\n")
    assert cfg.train.router.k_per_group == (2, 2)


def test_num_clusters_sets_classes():
    cfg = parse_config("num_clusters = 5\nd_model = 4\n")
    assert cfg.train.num_classes == cfg.data.num_clusters == 5
    assert cfg.data.dim == cfg.train.d_model == 4


@pytest.mark.parametrize("text, line, fragment", [
    ("steps = 3\nbogus = 1\n", 2, "unknown key"),
    ("lr = 0.1\n\nlr = 0.2\n", 3, "already set on line 1"),
    ("steps = three\n", 1, "bad value"),
    ("# c\nno equals sign here\n", 2, "expected 'key = value'"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError, match=fragment) as info:
        parse_config(text, source="lab.cfg")
    assert f"lab.cfg:{line}:" in str(info.value)


def test_semantic_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config("variant = sparse\n")
    with pytest.raises(ConfigError):
        parse_config("num_experts = 8\nnum_groups = 3\n")


@pytest.mark.parametrize("text", ["", "variant = flat\nsteps = 11\nlr = 0.000123\n",
                                  "group_sizes = 3,5\nk_per_group = 1,2\ncluster_spread = 0.1\n"])
def test_format_round_trip(text, tmp_path):
    cfg = parse_config(text)
    assert parse_config(format_config(cfg)) == cfg
    path = tmp_path / "c.cfg"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg
    assert format_config(load_config(path)) == format_config(cfg)

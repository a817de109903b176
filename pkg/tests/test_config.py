import pytest

from rmrouter.config import ConfigError, RunConfig, parse_config


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_full_file(tmp_path):
    (tmp_path / "data").mkdir()
    write(tmp_path / "adapter.yaml", "rank: 4\nalpha: 8\n")
    cfg = RunConfig.build(write(tmp_path / "run.yaml", (
        "method: arliss\nseeds: [1, 2]\npreset: paper\ndata: data\n"
        "encoder: {hidden_dim: 32, num_heads: 4}\nadapter: adapter.yaml\nmoe: {top_k: 1}\ntrain: {epochs: 1}\n"
    )))
    s = cfg.settings()
    assert cfg.seeds == [1, 2] and cfg.data == str((tmp_path / "data").resolve())
    assert s.encoder.hidden_dim == 32 and s.adapter.rank == 4 and s.adapter.alpha == 8.0
    assert s.moe.top_k == 1 and s.train.lr == 5e-6 and s.train.epochs == 1


def test_flags_override_file(tmp_path):
    path = write(tmp_path / "run.yaml", "method: rodos\ntrain: {lr: 0.5, epochs: 2}\n")
    cfg = RunConfig.build(path, method="more", lr=0.01, batch_size=None, seeds=None)
    assert cfg.method == "more" and cfg.train == {"lr": 0.01, "epochs": 2} and cfg.seeds == [0]


@pytest.mark.parametrize(
    "text, line, col, needle",
    [
        ("method: rodos\nbogus: 1\n", 2, 1, "unknown key"),
        ("method: rodos\nmethod: more\n", 2, 1, "duplicate key"),
        ("seeds: [0, x]\n", 1, 12, "expected a int"),
        ("method: nope\n", 1, 9, "unknown method"),
        ("preset: huge\n", 1, 9, "unknown preset"),
        ("encoder:\n  hidden_dim: 1.5\n", 2, 15, "expected a int"),
        ("moe: {noisy: 3}\n", 1, 14, "expected a bool"),
        ("train: [1]\n", 1, 8, "expected a mapping"),
        ("method: [rodos\n", 2, 1, "YAML syntax"),
    ],
)
def test_errors_carry_positions(tmp_path, text, line, col, needle):
    path = write(tmp_path / "bad.yaml", text)
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert (exc.value.line, exc.value.column) == (line, col)
    assert f"bad.yaml:{line}:{col}:" in str(exc.value) and needle in str(exc.value)


def test_error_in_included_file_names_that_file(tmp_path):
    write(tmp_path / "enc.yaml", "hidden_dim: 8\nlayers: 2\n")
    with pytest.raises(ConfigError, match=r"enc\.yaml:2:1: unknown key 'layers'"):
        parse_config(write(tmp_path / "run.yaml", "encoder: enc.yaml\n"))


def test_missing_include(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(write(tmp_path / "run.yaml", "adapter: nowhere.yaml\n"))


def test_empty_file_is_defaults(tmp_path):
    assert parse_config(write(tmp_path / "e.yaml", "")) == {}


@pytest.mark.parametrize(
    "overrides, needle",
    [
        (dict(seeds=[]), "seed"),
        (dict(jobs=0), "jobs"),
        (dict(data="/nonexistent/dir"), "data directory"),
        (dict(encoder={"hidden_dim": 30, "num_heads": 4}), "divisible"),
    ],
)
def test_semantic_validation(overrides, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.build(None, **overrides)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        parse_config("/nonexistent/run.yaml")

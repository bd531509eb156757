import numpy as np
import pytest

from icf import cli
from icf.config import (
    KEYS,
    ConfigError,
    ExperimentConfig,
    format_config,
    parse_config,
    parse_flags,
    parse_text,
)
from icf.environments import read_states_csv
from icf.models import load_checkpoint
from icf.report import read_matrix_csv, read_pgm

TINY = ["--env.grid_height", "5", "--env.grid_width", "5", "--model.conv_channels", "2",
        "--model.fc_units", "4", "--training.steps", "4", "--training.eval_interval", "2",
        "--training.probe_size", "6"]


def test_empty_config_is_defaults(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("# nothing here\n\n")
    assert parse_config(path) == ExperimentConfig()
    assert parse_config() == ExperimentConfig()


def test_lambda_key_and_typo():
    cfg = parse_config(flags=["--training.lambda", "0.5"])
    assert cfg.training.lam == 0.5
    assert cfg.selectivity_config().lam == 0.5
    with pytest.raises(ConfigError, match="training.lamda"):
        parse_text("training.lamda = 0.5\n")


def test_parse_errors_name_the_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("env.variant = basic\nnot a pair\n", "f.txt")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("training.steps = 1\ntraining.steps = 2\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config(flags=["--training.steps", "many"])
    with pytest.raises(ConfigError):
        parse_config(flags=["--env.square_size", "20"])


def test_flag_forms():
    assert parse_flags(["--a.b=1", "--c.d", "2"]) == [("a.b", "1"), ("c.d", "2")]
    with pytest.raises(ConfigError):
        parse_flags(["--a.b"])
    with pytest.raises(ConfigError):
        parse_flags(["positional"])


def test_flags_override_file(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("training.steps = 10\nenv.variant = extended\n")
    cfg = parse_config(path, ["--training.steps=20"])
    assert cfg.training.steps == 20
    assert cfg.env.variant == "extended"
    assert cfg.model_variant() == "separate"
    assert cfg.selectivity_mode() == "directed"
    assert cfg.model_config().n_features == 8


def test_format_round_trip(tmp_path):
    cfg = parse_config(flags=["--training.lambda", "0.25", "--env.variant", "extended",
                              "--model.policy_grad_into_trunk", "false", "--experiment.name", "x"])
    text = format_config(cfg)
    assert len(text.splitlines()) == len(KEYS)
    path = tmp_path / "rt.txt"
    path.write_text(text)
    assert parse_config(path) == cfg


def test_variant_mismatch_needs_override():
    with pytest.raises(ConfigError, match="allow_mismatch"):
        parse_config(flags=["--model.variant", "separate"])
    cfg = parse_config(flags=["--model.variant", "separate", "--model.allow_mismatch", "true"])
    assert cfg.model_config().variant == "separate"


def test_show_config(capsys):
    assert cli.main(["show-config", "--training.steps", "7"]) == cli.EXIT_OK
    assert "training.steps = 7" in capsys.readouterr().out


def test_config_error_exit_code(capsys):
    assert cli.main(["run", "--training.lamda", "1"]) == cli.EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def run_tiny(out, *extra):
    return cli.main(["run", "--experiment.output_dir", str(out), *TINY, *extra])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run_tiny(out) == cli.EXIT_OK
    return out


def test_run_writes_manifest(tiny_run):
    assert sorted(p.name for p in tiny_run.iterdir()) == cli.manifest(6)
    m, rows, cols = read_matrix_csv(tiny_run / "slope_matrix.csv")
    assert rows == ["h0", "h1", "h2", "h3"] and cols == ["row", "col"] and m.shape == (4, 2)
    pm, _, acts = read_matrix_csv(tiny_run / "policy_matrix.csv")
    assert acts == ["up", "down", "left", "right"]
    np.testing.assert_allclose(pm.sum(axis=1), 1, atol=1e-12)
    assert read_pgm(tiny_run / "recon_0.pgm").shape[1] > 10
    assert "thresholds:" in (tiny_run / "summary.txt").read_text()
    assert len(read_states_csv(tiny_run / "probe_states.csv", parse_config(flags=TINY).env)) == 6
    assert (tiny_run / "slope_matrix.svg").read_text().startswith("<svg")


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    assert run_tiny(tmp_path) == cli.EXIT_OK
    for name in ("train_log.csv", "checkpoint.bin", "slope_matrix.csv", "policy_matrix.csv",
                 "selectivity_matrix.csv", "metrics.csv", "probe_states.csv"):
        assert (tmp_path / name).read_bytes() == (tiny_run / name).read_bytes(), name


def test_evaluate_reproduces_metrics(tiny_run, tmp_path):
    code = cli.main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.bin"), "--out",
                     str(tmp_path), *TINY])
    assert code == cli.EXIT_OK
    for name in ("slope_matrix.csv", "policy_matrix.csv", "selectivity_matrix.csv",
                 "objective_matrix.csv", "metrics.csv"):
        assert (tmp_path / name).read_bytes() == (tiny_run / name).read_bytes(), name
    ckpt = load_checkpoint(tiny_run / "checkpoint.bin")
    assert ckpt.config == parse_config(flags=TINY).model_config()


def test_evaluate_truncated_checkpoint(tiny_run, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes((tiny_run / "checkpoint.bin").read_bytes()[:100])
    code = cli.main(["evaluate", "--checkpoint", str(bad), "--out", str(tmp_path / "o"), *TINY])
    assert code != cli.EXIT_OK


def test_evaluate_mismatched_config(tiny_run, tmp_path):
    code = cli.main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.bin"), "--out",
                     str(tmp_path), *TINY, "--model.fc_units", "5"])
    assert code == cli.EXIT_CONFIG


def test_probe_size_one(tmp_path):
    assert run_tiny(tmp_path, "--training.probe_size", "1") == cli.EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == cli.manifest(1)
    slopes, _, _ = read_matrix_csv(tmp_path / "slope_matrix.csv")
    assert np.all(slopes == 0)


def test_extended_reinforce_run(tmp_path):
    code = run_tiny(tmp_path, "--env.variant", "extended", "--training.estimator", "reinforce",
                    "--training.reinforce_samples", "2", "--model.hidden_units", "8")
    assert code == cli.EXIT_OK
    sel, _, acts = read_matrix_csv(tmp_path / "selectivity_matrix.csv")
    assert len(acts) == 8 and sel.shape == (8, 8)
    assert np.abs(sel[:, 0] - sel[:, 1]).max() <= 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    code = run_tiny(tmp_path, "--training.lr_f", "1e6", "--training.lr_g", "1e6",
                    "--training.steps", "30")
    assert code == cli.EXIT_DIVERGENCE


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run_tiny(blocker / "sub") == cli.EXIT_IO

import subprocess
import sys

import pytest

from idqn.checkpoint import load_checkpoint
from idqn.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from idqn.config import SCHEMA

TINY_ARGS = [
    "--steps", "40",
    "--env.width", "2", "--env.height", "2", "--env.n_pellets", "2", "--env.cell_px", "4", "--env.step_cap", "12",
    "--model.n_keys", "4", "--model.embed_dim", "5", "--model.conv_layers", "3x2s2,4x3s1",
    "--train.batch_size", "4", "--train.buffer_size", "40", "--train.learning_starts", "8",
    "--train.target_sync", "10", "--train.eval_episodes", "2", "--train.eval_interval", "20",
]


def run_cli(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *TINY_ARGS, "--seeds", "5", "--out_dir", str(out)]) == EXIT_OK
    return out / "seed_5" / "checkpoint.idqn"


def test_train_writes_run_directory(tmp_path, capsys):
    rc, out, _ = run_cli(capsys, "train", *TINY_ARGS, "--seeds", "0,1", "--out_dir", tmp_path)
    assert rc == EXIT_OK
    for s in (0, 1):
        d = tmp_path / f"seed_{s}"
        for name in ("checkpoint.idqn", "metrics.csv", "eval.csv", "final_eval.csv", "training_curve.png"):
            assert (d / name).exists(), name
        assert f"seed={s} final_eval_mean=" in out
    summary = (tmp_path / "summary.txt").read_text().splitlines()
    assert summary[-2].startswith("mean=") and summary[-1].startswith("variance=")
    assert (tmp_path / "config.txt").read_text().startswith("steps = 40\n")


def test_train_is_byte_reproducible(tmp_path, capsys):
    for k in ("a", "b"):
        assert run_cli(capsys, "train", *TINY_ARGS, "--seeds", "3", "--out_dir", tmp_path / k)[0] == EXIT_OK
    for name in ("metrics.csv", "eval.csv", "final_eval.csv", "checkpoint.idqn"):
        assert (tmp_path / "a" / "seed_3" / name).read_bytes() == (tmp_path / "b" / "seed_3" / name).read_bytes()


def test_flag_override_reaches_checkpoint(tmp_path, capsys):
    rc, *_ = run_cli(capsys, "train", *TINY_ARGS, "--seeds", "0", "--loss.l3", "0.5", "--out_dir", tmp_path)
    assert rc == EXIT_OK
    assert load_checkpoint(tmp_path / "seed_0" / "checkpoint.idqn").weights.l3 == 0.5


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("loss.l3 = 0.3\nloss.l4 = 0.2\n")
    rc, *_ = run_cli(capsys, "train", "--config", cfg, *TINY_ARGS, "--seeds", "0", "--loss.l3", "0.9", "--out_dir", tmp_path / "o")
    assert rc == EXIT_OK
    w = load_checkpoint(tmp_path / "o" / "seed_0" / "checkpoint.idqn").weights
    assert (w.l3, w.l4) == (0.9, 0.2)


def test_duplicate_seeds_rejected(tmp_path, capsys):
    rc, _, err = run_cli(capsys, "train", *TINY_ARGS, "--seeds", "1,1", "--out_dir", tmp_path)
    assert rc == EXIT_CONFIG and "duplicate" in err
    assert not (tmp_path / "seed_1").exists()


@pytest.mark.parametrize(
    "argv",
    [["train", "--nope", "1"], ["train", "--model.n_keys", "x"], ["train", "--model.n_keys", "1"], ["frobnicate"], []],
)
def test_usage_and_config_errors(argv, capsys, tmp_path):
    rc, _, err = run_cli(capsys, *argv, *(["--out_dir", tmp_path] if argv[:1] == ["train"] else []))
    assert rc == EXIT_CONFIG
    assert err.startswith("idqn:")


def test_missing_and_corrupt_checkpoint(tmp_path, capsys):
    rc, _, err = run_cli(capsys, "eval", tmp_path / "absent.idqn")
    assert rc == EXIT_IO and "io error" in err
    bad = tmp_path / "bad.idqn"
    bad.write_bytes(b"IDQN\x01\x00")
    assert run_cli(capsys, "keys", bad, tmp_path / "k")[0] == EXIT_IO


def test_help_lists_every_config_flag():
    out = subprocess.run([sys.executable, "-m", "idqn.cli", "train", "--help"], capture_output=True, text=True, check=True).stdout
    for key in SCHEMA:
        assert f"--{key}" in out, key


def test_eval(ckpt_path, capsys):
    rc, out, _ = run_cli(capsys, "eval", ckpt_path, "--episodes", "3")
    lines = dict(line.split("=") for line in out.splitlines())
    assert rc == EXIT_OK and set(lines) == {"mean_return", "min_return", "max_return"}
    assert 0 <= float(lines["min_return"]) <= float(lines["mean_return"]) <= float(lines["max_return"]) <= 2


def test_keys_writes_exactly_a_times_n(ckpt_path, tmp_path, capsys):
    rc, out, _ = run_cli(capsys, "keys", ckpt_path, tmp_path / "k", "--figure", tmp_path / "gallery.png")
    assert rc == EXIT_OK and out.strip() == "keys=16"
    assert len(list((tmp_path / "k").iterdir())) == 16
    assert (tmp_path / "gallery.png").stat().st_size > 0


def test_attn(ckpt_path, tmp_path, capsys):
    rc, out, _ = run_cli(capsys, "attn", ckpt_path, tmp_path, "--steps", "5")
    n = int(out.strip().split("=")[1])
    assert rc == EXIT_OK and 1 <= n <= 5
    assert len(list(tmp_path.glob("attn_*.pgm"))) == n
    assert len((tmp_path / "attention.csv").read_text().splitlines()) == 1 + 4 * n
    assert (tmp_path / "attention_step000.png").exists()


def test_saliency(ckpt_path, tmp_path, capsys):
    rc, out, _ = run_cli(capsys, "saliency", ckpt_path, tmp_path, "--action", "2")
    assert rc == EXIT_OK and out.startswith("max_saliency=")
    assert {p.name for p in tmp_path.iterdir()} == {"saliency_a2.csv", "saliency_a2.pgm", "saliency_a2.png"}
    assert run_cli(capsys, "saliency", ckpt_path, tmp_path, "--action", "4")[0] == EXIT_CONFIG


def test_agree_prints_parseable_line(ckpt_path, capsys):
    rc, out, _ = run_cli(capsys, "agree", ckpt_path, "--rollouts", "2")
    vals = dict(line.split("=") for line in out.splitlines())
    assert rc == EXIT_OK
    assert 0.0 <= float(vals["agreement"]) <= 1.0
    assert int(vals["matched"]) <= int(vals["decisions"])


def test_probe_empty_edits(ckpt_path, tmp_path, capsys):
    edits = tmp_path / "e.txt"
    edits.write_text("# nothing\n")
    rc, out, _ = run_cli(capsys, "probe", ckpt_path, "--edits", edits, "--steps", "10", "--out", tmp_path / "r.txt")
    assert rc == EXIT_OK and "divergence: none" in out
    assert (tmp_path / "r.txt").read_text() == out


def test_probe_bad_edit_file(ckpt_path, tmp_path, capsys):
    edits = tmp_path / "e.txt"
    edits.write_text("teleport 0 0\n")
    assert run_cli(capsys, "probe", ckpt_path, "--edits", edits)[0] == EXIT_CONFIG
    assert run_cli(capsys, "probe", ckpt_path, "--edits", tmp_path / "none.txt")[0] == EXIT_IO


def test_embed(ckpt_path, tmp_path, capsys):
    rc, out, _ = run_cli(capsys, "embed", ckpt_path, tmp_path / "e.csv", "--n-states", "7")
    assert rc == EXIT_OK and out.strip() == "states=7 keys=16"
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1 + 7 + 16

import csv
import json

import numpy as np
import pytest

from medcontext import __version__, gradsuite
from medcontext.autodiff import Tensor
from medcontext.cli import main
from medcontext.config import build_config, parse_lines, resolve, with_overrides
from medcontext.errors import ConfigError
from medcontext.experiment import FAILED, MANIFEST

SMALL = [
    "data.extents=16,16,16",
    "data.semi_axis_range=2,3.5",
    "data.min_separation=1",
    "data.n_train=4",
    "data.n_test=2",
    "net.patch=2,2,2",
    "net.base_width=4",
    "net.depth=1",
    "train.steps=4",
]


def sets(extra=()):
    out = []
    for kv in list(SMALL) + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["generate-data", "--out", str(d), "--seed", "3"] + sets()) == 0
    return d


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- configuration ---------------------------------------------------------------


def test_parse_lines_and_errors():
    raw = parse_lines(["# comment", "", "run.seed = 4  # trailing", "loss.beta=0.5"])
    assert raw == {"run.seed": "4", "loss.beta": "0.5"}
    with pytest.raises(ConfigError):
        parse_lines(["no equals sign"])
    with pytest.raises(ConfigError):
        parse_lines(["beta = 1"])


def test_precedence_file_then_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("run.seed = 4\nloss.beta = 0.5\ntrain.steps = 9\n")
    cfg = resolve(f, {"loss.beta": "2.0"})
    assert cfg.seed == 4 and cfg.loss.beta == 2.0 and cfg.train.steps == 9
    assert cfg.train.seed == cfg.net.seed == cfg.data.phantom.seed == 4
    with pytest.raises(ConfigError):
        resolve(tmp_path / "missing.cfg")


def test_config_errors():
    with pytest.raises(ConfigError):
        build_config({"train.nonsense": "1"})
    with pytest.raises(ConfigError):
        build_config({"train.steps": "many"})
    with pytest.raises(ConfigError):
        build_config({"loss.cl_space": "softmax"})


def test_resolved_dump_round_trips():
    cfg = build_config({"run.seed": "5", "loss.class_weights": "1, 2, 2, 1", "train.flip_axes": "0, 2"})
    again = build_config(dict(parse_lines(cfg.dumps().splitlines())))
    assert again.items() == cfg.items()
    assert again.loss.class_weights == (1.0, 2.0, 2.0, 1.0) and again.train.flip_axes == (0, 2)


def test_num_classes_follows_phantom_and_overrides():
    assert build_config({"data.num_organs": "2"}).net.num_classes == 3
    cfg = with_overrides(build_config({"data.num_organs": "2"}), {"loss.beta": "3"})
    assert cfg.net.num_classes == 3 and cfg.loss.beta == 3.0


def test_defaults():
    cfg = build_config({})
    assert cfg.train.mask_ratio == 0.4
    assert cfg.train.lambda0 == 0.996
    assert cfg.loss.beta == 1.0 and cfg.loss.cl_space == "logits"
    assert cfg.data.n_train == 25 and cfg.data.n_test == 5 and cfg.data.phantom.extents == (32, 32, 32)


# --- generate-data -----------------------------------------------------------------------


def test_generate_default_dataset(tmp_path):
    assert main(["generate-data", "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / MANIFEST).read_text())
    assert len(manifest["ids"]) == 30
    assert len(manifest["split"]["train"]) == 25 and len(manifest["split"]["test"]) == 5
    files = {p.name for p in (tmp_path / "d").glob("*.mcvx")}
    assert files == {f"{i}_{k}.mcvx" for i in manifest["ids"] for k in ("img", "lbl")}


def test_generate_is_byte_reproducible(tmp_path, data_dir):
    assert main(["generate-data", "--out", str(tmp_path), "--seed", "3"] + sets()) == 0
    for p in data_dir.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_generate_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate-data", "--out", str(blocker / "sub")] + sets()) != 0


# --- train -------------------------------------------------------------------------------------


def test_train_artifacts_and_provenance(tmp_path, data_dir):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--seed", "3"] + sets()) == 0
    for name in ("metrics.csv", "checkpoint.mctx", "config.resolved", "summary.json"):
        assert (out / name).exists()
    resolved = (out / "config.resolved").read_text()
    assert __version__ in resolved and "run.seed = 3" in resolved and "train.mask_ratio = 0.4" in resolved
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["version"] == __version__ and summary["step"] == 4
    rows = read_rows(out / "metrics.csv")
    assert [r["step"] for r in rows] == ["1", "2", "3", "4"]
    assert list(rows[0]) == ["step", "loss_total", "loss_sup", "loss_msl", "loss_cl", "lambda", "lr"]


def test_train_baseline_zeroes_reconstruction_terms(tmp_path, data_dir):
    out = tmp_path / "base"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--baseline"] + sets()) == 0
    rows = read_rows(out / "metrics.csv")
    assert all(float(r["loss_msl"]) == 0.0 and float(r["loss_cl"]) == 0.0 for r in rows)


def test_train_flags_override_config(tmp_path, data_dir):
    out = tmp_path / "flags"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--mask-ratio", "0.6", "--beta", "0.25",
            "--no-teacher", "--shots", "2"]
    assert main(args + sets(["train.mask_ratio=0.3"])) == 0
    resolved = (out / "config.resolved").read_text()
    assert "train.mask_ratio = 0.6" in resolved and "loss.beta = 0.25" in resolved
    assert "train.use_teacher = false" in resolved
    assert len(json.loads((out / "summary.json").read_text())["train_ids"]) == 2
    assert all(float(r["loss_cl"]) == 0.0 for r in read_rows(out / "metrics.csv"))


def test_train_same_seed_same_bytes(tmp_path, data_dir):
    for name in ("a", "b"):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / name)] + sets()) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.mctx").read_bytes() == (tmp_path / "b" / "checkpoint.mctx").read_bytes()


def test_train_resume_is_exact(tmp_path, data_dir):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--data", str(data_dir), "--out", str(full)] + sets()) == 0
    assert main(["train", "--data", str(data_dir), "--out", str(part), "--stop-at", "2"] + sets()) == 0
    assert len(read_rows(part / "metrics.csv")) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(part), "--resume"] + sets()) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert (full / "checkpoint.mctx").read_bytes() == (part / "checkpoint.mctx").read_bytes()


def test_train_errors_before_any_step(tmp_path, data_dir):
    out = tmp_path / "bad"
    assert main(["train", "--data", str(data_dir), "--out", str(out)] + sets(["net.patch=3,3,3"])) == 1
    assert (out / FAILED).exists() and not (out / "metrics.csv").exists()
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(out)] + sets()) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(out)] + sets(["train.bogus=1"])) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--resume"] + sets()) == 2


def test_failure_marker_cleared_on_success(tmp_path, data_dir):
    out = tmp_path / "retry"
    main(["train", "--data", str(data_dir), "--out", str(out)] + sets(["net.patch=3,3,3"]))
    assert (out / FAILED).exists()
    assert main(["train", "--data", str(data_dir), "--out", str(out)] + sets()) == 0
    assert not (out / FAILED).exists()


# --- eval ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--data", str(data_dir), "--out", str(out)] + sets()) == 0
    return out


def test_eval_ground_truth_is_perfect(tmp_path, data_dir):
    assert main(["eval", "--data", str(data_dir), "--out", str(tmp_path), "--ground-truth", "--split", "all"]) == 0
    rows = read_rows(tmp_path / "eval_all_ground_truth.csv")
    assert all(float(r["dsc"]) == 1.0 and float(r["hd95"]) == 0.0 for r in rows)


def test_eval_student_and_teacher_from_one_checkpoint(tmp_path, data_dir, trained):
    ck = str(trained / "checkpoint.mctx")
    assert main(["eval", "--checkpoint", ck, "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(data_dir), "--out", str(tmp_path), "--use-teacher"]) == 0
    for who in ("student", "teacher"):
        rows = read_rows(tmp_path / f"eval_test_{who}.csv")
        summary = json.loads((tmp_path / f"eval_test_{who}.json").read_text())
        assert summary["weights"] == who
        assert summary["mean_dsc"] == pytest.approx(np.mean([float(r["dsc"]) for r in rows]), abs=1e-15)


def test_eval_extent_mismatch(tmp_path, trained):
    other = tmp_path / "other"
    assert main(["generate-data", "--out", str(other)] + sets(["data.extents=18,18,18"])) == 0
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.mctx"), "--data", str(other),
                 "--out", str(tmp_path / "ev")]) == 1
    assert (tmp_path / "ev" / FAILED).exists()


def test_eval_corrupt_checkpoint(tmp_path, data_dir):
    bad = tmp_path / "bad.mctx"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "ev")]) == 1


# --- ablate ----------------------------------------------------------------------------------


def test_ablate_ratio_and_toggle_grids(tmp_path, data_dir):
    out = tmp_path / "abl"
    args = ["ablate", "--data", str(data_dir), "--out", str(out), "--ratio-grid", "--toggle-grid",
            "--seeds", "0,1", "--steps", "2"]
    assert main(args + sets()) == 0
    rows = read_rows(out / "ablation.csv")
    assert [r["cell"] for r in rows] == [
        "ratio=0.3", "ratio=0.4", "ratio=0.5", "ratio=0.6", "ratio=0.8", "msl_only", "cl_only", "msl_cl"]
    assert {r["seeds"] for r in rows} == {"0 1"}
    table = (out / "ablation.md").read_text()
    assert table.count("\n") == len(rows) + 2
    # shared seeds: every cell starts from the same initial weights and draws the same batches
    resolved = {p.parent.parent.name: p.read_text() for p in out.glob("cells/*/seed0/config.resolved")}
    varied = {k for txt in resolved.values() for k in txt.splitlines()} - set.intersection(
        *(set(t.splitlines()) for t in resolved.values()))
    assert {line.split(" = ")[0] for line in varied} == {"train.mask_ratio", "loss.include_msl", "loss.include_cl"}


def test_ablate_beta_sweep(tmp_path, data_dir):
    out = tmp_path / "beta"
    assert main(["ablate", "--data", str(data_dir), "--out", str(out), "--betas", "0,1", "--steps", "1"] + sets()) == 0
    assert [r["cell"] for r in read_rows(out / "ablation.csv")] == ["beta=0", "beta=1"]


def test_ablate_empty_sweep_fails(tmp_path, data_dir):
    assert main(["ablate", "--data", str(data_dir), "--out", str(tmp_path)] + sets()) == 1
    assert json.loads((tmp_path / FAILED).read_text())["error"] == "ContractError"


# --- grad-check -------------------------------------------------------------------------------


def test_grad_check_command_passes(capsys):
    assert main(["grad-check", "--seeds", "2", "--ops", "mul,relu,instance_norm"]) == 0
    out = capsys.readouterr().out
    assert "instance_norm" in out and "3/3 passed" in out


def test_grad_check_catches_injected_bug(monkeypatch, capsys):
    def broken(gen):
        x = Tensor(gen.normal(size=(2, 3)))

        def f(x):
            y = Tensor.from_op(x.data * 3.0, "scale", (x,), lambda g: (g * 3.3,))
            return Tensor.from_op(np.asarray(y.data.sum()), "sum", (y,), lambda g: (np.full(y.shape, g),))

        return f, [x]

    monkeypatch.setitem(gradsuite.CASES, "broken", broken)
    assert main(["grad-check", "--seeds", "2", "--ops", "broken,add"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["grad-check", "--ops", "nope"]) == 2

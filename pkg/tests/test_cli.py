import json

import numpy as np
import pytest

from lilanet import cli
from lilanet import geometry_io as gio
from lilanet import synthetic
from lilanet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY_FLAGS = ["--toy", "--target-points", "32", "--epochs", "1", "--batch-size", "4"]


def street_files(d, n=3):
    d.mkdir()
    for i in range(n):
        raw, _ = synthetic.street_scene(np.random.default_rng(i))
        gio.write_xyz(raw, d / f"scan{i}.xyz")
    return d


@pytest.fixture
def toy_data(tmp_path):
    out = tmp_path / "toy"
    assert main(["synth", "--toy", "--target-points", "32", "--n-shapes", "12", "--out", str(out)]) == EXIT_OK
    return out


def read_manifest(out):
    return cli.RunManifest.from_json((out / "run_manifest.json").read_text())


# ---------------------------------------------------------------- preprocess

def test_preprocess_directory(tmp_path):
    src = street_files(tmp_path / "raw")
    out = tmp_path / "proc"
    assert main(["preprocess", "--data", str(src), "--out", str(out), "--target-points", "2048"]) == EXIT_OK
    clouds = sorted(out.glob("scan*.xyz"))
    reports = sorted(out.glob("*.report.json"))
    assert len(clouds) == 3 and len(reports) == 3
    for p in clouds:
        pts = gio.read_cloud(p).points
        assert pts.shape == (2048, 3)
        assert np.linalg.norm(pts, axis=1).max() <= 1 + 1e-9
    stages = [r["stage"] for r in json.loads(reports[0].read_text())]
    assert stages[0] == "remove_ground" and stages[-1] == "normalize_unit_sphere"


def test_preprocess_unreadable_file(tmp_path, capsys):
    src = street_files(tmp_path / "raw")
    (src / "scan1.xyz").write_text("1 2\nnot numbers\n")
    out = tmp_path / "proc"
    assert main(["preprocess", "--data", str(src), "--out", str(out), "--target-points", "256"]) == EXIT_RUNTIME
    assert "preprocess" in capsys.readouterr().err
    assert sorted(p.name for p in out.glob("scan*.xyz")) == ["scan0.xyz", "scan2.xyz"]
    assert read_manifest(out).exit_code == EXIT_RUNTIME


def test_preprocess_radius_out_of_range_is_config_error(tmp_path, capsys):
    src = street_files(tmp_path / "raw", 1)
    rc = main(["preprocess", "--data", str(src), "--out", str(tmp_path / "o"), "--radius", "5"])
    assert rc == EXIT_CONFIG
    assert "crop_radius" in capsys.readouterr().err


# ---------------------------------------------------------------- config handling

def test_config_file_and_flag_override(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nepochs = 7\nlearning_rate = 0.01\n[model]\nskip = ss2\n")
    args = cli.build_parser().parse_args(["train", "--config", str(ini), "--epochs", "3"])
    s = cli.resolve_settings(args)
    assert s.train.epochs == 3 and s.train.learning_rate == 0.01 and s.model.skip.value == "ss2"


def test_config_errors_name_the_field(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[train]\nbatch_size = 0\n")
    assert main(["train", "--toy", "--config", str(ini), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "batch_size" in capsys.readouterr().err
    ini.write_text("[train]\nwarp = 3\n")
    assert main(["train", "--toy", "--config", str(ini), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "warp" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for snippet in ("--epochs", "(default 100)", "--batch-size", "(default 32)", "(default 0.0005)",
                    "latent size L (default 1024)", "(default 2048)", "--skip-variant", "--radius",
                    "--deterministic", "--threads", "--precision", "--seed"):
        assert snippet in text


# ---------------------------------------------------------------- train / eval / reconstruct

def test_train_eval_reconstruct_round(tmp_path, toy_data):
    out = tmp_path / "run"
    assert main(["train", "--data", str(toy_data), "--out", str(out)] + TINY_FLAGS) == EXIT_OK
    assert (out / "model.lila").exists()
    assert (out / "loss.csv").read_text().splitlines()[0] == "epoch,cd"
    ev = tmp_path / "ev"
    assert main(["eval", "--toy", "--target-points", "32", "--data", str(toy_data), "--split", "test",
                 "--checkpoint", str(out / "model.lila"), "--out", str(ev)]) == EXIT_OK
    report = json.loads((ev / "metrics.json").read_text())
    assert report["cd"] > 0 and report["emd_mode"] == "exact"
    rec = tmp_path / "rec"
    assert main(["reconstruct", "--toy", "--target-points", "32", "--data", str(toy_data),
                 "--checkpoint", str(out / "model.lila"), "--out", str(rec)]) == EXIT_OK
    assert len(list(rec.glob("*.rec.xyz"))) == 12


def test_train_runs_are_byte_identical(tmp_path, toy_data):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--data", str(toy_data), "--out", str(out), "--deterministic"] + TINY_FLAGS) == 0
        blobs.append(((out / "model.lila").read_bytes(), (out / "loss.csv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_rerun_from_manifest_reproduces_outputs(tmp_path, toy_data):
    first = tmp_path / "first"
    assert main(["train", "--data", str(toy_data), "--out", str(first), "--deterministic"] + TINY_FLAGS) == 0
    m = read_manifest(first)
    assert m.command == "train" and m.exit_code == 0 and m.seed == 0
    assert m.config["train"]["epochs"] == 1 and m.finished
    assert sorted(m.outputs) == sorted([str(first / "model.lila"), str(first / "loss.csv")])
    second = tmp_path / "second"
    assert main(["rerun", str(first / "run_manifest.json"), "--out", str(second)]) == 0
    assert (first / "model.lila").read_bytes() == (second / "model.lila").read_bytes()


def test_reconstruct_identity_hook(tmp_path, toy_data):
    rec = tmp_path / "rec"
    assert main(["reconstruct", "--identity", "--toy", "--target-points", "32", "--data", str(toy_data),
                 "--out", str(rec)]) == EXIT_OK
    for p in rec.glob("*.rec.xyz"):
        original = gio.read_cloud(toy_data / p.name.replace(".rec", "")).points
        assert np.max(np.abs(gio.read_cloud(p).points - original)) < 1e-6
    ev = tmp_path / "ev"
    assert main(["eval", "--identity", "--toy", "--target-points", "32", "--data", str(toy_data),
                 "--out", str(ev)]) == 0
    assert json.loads((ev / "metrics.json").read_text())["cd"] == 0


def test_missing_checkpoint_is_runtime_error(tmp_path, toy_data, capsys):
    rc = main(["eval", "--toy", "--data", str(toy_data), "--checkpoint", str(tmp_path / "nope.lila"),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_RUNTIME
    assert "load_checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------- embed / classify

def test_embed_and_classify(tmp_path, toy_data):
    out = tmp_path / "run"
    assert main(["train", "--data", str(toy_data), "--out", str(out)] + TINY_FLAGS) == 0
    for split in ("train", "test"):
        assert main(["embed", "--toy", "--target-points", "32", "--data", str(toy_data), "--split", split,
                     "--checkpoint", str(out / "model.lila"), "--out", str(tmp_path / split)]) == 0
    cls = tmp_path / "cls"
    assert main(["classify", "--train-embeddings", str(tmp_path / "train" / "embeddings.csv"),
                 "--test-embeddings", str(tmp_path / "test" / "embeddings.csv"), "--out", str(cls)]) == 0
    acc = json.loads((cls / "accuracy.json").read_text())["accuracy"]
    assert 0 <= acc <= 1
    assert (cls / "confusion.csv").read_text().splitlines()[0] == "true\\pred,cube,plane,sphere"


def test_classify_latent_dim_mismatch(tmp_path, capsys):
    rng = np.random.default_rng(0)
    from lilanet.latent_eval import EmbeddingSet
    EmbeddingSet(rng.standard_normal((6, 4)), [0, 1] * 3, ["a", "b"]).save_csv(tmp_path / "tr.csv")
    EmbeddingSet(rng.standard_normal((4, 5)), [0, 1] * 2, ["a", "b"]).save_csv(tmp_path / "te.csv")
    rc = main(["classify", "--train-embeddings", str(tmp_path / "tr.csv"),
               "--test-embeddings", str(tmp_path / "te.csv"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_CONFIG
    assert "latent_dim" in capsys.readouterr().err


def test_eval_latent_dim_flag_mismatch(tmp_path, toy_data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(toy_data), "--out", str(out)] + TINY_FLAGS) == 0
    rc = main(["eval", "--toy", "--target-points", "32", "--data", str(toy_data), "--latent-dim", "32",
               "--checkpoint", str(out / "model.lila"), "--out", str(tmp_path / "ev")])
    assert rc == EXIT_CONFIG
    assert "latent_dim" in capsys.readouterr().err


# ---------------------------------------------------------------- experiments

def test_ablate_and_experiments(tmp_path, toy_data):
    flags = ["--data", str(toy_data), "--no-emd"] + TINY_FLAGS
    assert main(["ablate", "--out", str(tmp_path / "ab")] + flags) == 0
    assert len((tmp_path / "ab" / "ablation.csv").read_text().splitlines()) == 5
    ini = tmp_path / "exp.ini"
    ini.write_text("[experiment]\nfractions = 0.5 1.0\nrepeats = 2\ncloud_sizes = 16 32\n")
    assert main(["experiment", "--kind", "data_fraction", "--config", str(ini),
                 "--out", str(tmp_path / "df")] + flags) == 0
    assert len((tmp_path / "df" / "data_fraction.csv").read_text().splitlines()) == 3
    assert main(["experiment", "--kind", "cloud_size", "--config", str(ini), "--toy", "--no-emd",
                 "--epochs", "1", "--out", str(tmp_path / "cs")]) == 0
    rows = (tmp_path / "cs" / "cloud_size.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["16", "32"]

import csv
import json

import numpy as np
import pytest

from decoupled_qc.artefacts import ArtefactKind, specs_from_json
from decoupled_qc.cli import main
from decoupled_qc.config import OUT_ENV, ConfigError, RunConfig
from decoupled_qc.nifti import load_nifti, save_nifti
from decoupled_qc.toytrain.phantoms import generate_phantoms
from decoupled_qc.volume import Volume, normalize

TINY = ["--set", "training.n_train=6", "--set", "training.iterations=6",
        "--set", "training.width=4", "--set", "training.batch_size=2",
        "--set", "training.plateau_window=2"]


def _files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert main(["train", "--stage", "all", "--seed", "5", "--out", str(out), *TINY]) == 0
    return out


# --- simulate ---------------------------------------------------------------

def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["simulate", "--phantom", "--noise-snr-db", "0", "--seed", "7",
                     "--out", str(d)]) == 0
    assert _files(a) == _files(b)
    assert {"corrupted.nii", "specs.json", "resolved_config.ini"} <= set(_files(a))


def test_simulate_unit_blur_returns_normalized_input(tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "in.nii"
    save_nifti(Volume(rng.uniform(0, 500, (12, 10, 6)).astype(np.float32), (1.0, 1.2, 2.0)), src)
    assert main(["simulate", str(src), "--blur-ratio", "1", "--out", str(tmp_path / "o")]) == 0
    out, _ = load_nifti(tmp_path / "o" / "corrupted.nii")
    ref = normalize(load_nifti(src)[0])
    assert np.abs(out.data - ref.data).max() < 1e-6


def test_simulate_kind_all_lists_fixed_order(tmp_path):
    assert main(["simulate", "--phantom", "--kind", "all", "--seed", "7",
                 "--phantom-shape", "16", "16", "8", "--out", str(tmp_path)]) == 0
    specs = specs_from_json((tmp_path / "specs.json").read_text())
    assert [s.kind for s in specs] == [
        ArtefactKind.GEOMETRIC, ArtefactKind.BIAS_FIELD, ArtefactKind.MOTION,
        ArtefactKind.RF_SPIKE, ArtefactKind.K_NOISE, ArtefactKind.BLUR, ArtefactKind.WRAP]
    meta = json.loads((tmp_path / "specs.json").read_text())
    for key in ("config_hash", "seed", "version"):
        assert key in meta["provenance"]


def test_simulate_save_clean_writes_labels(tmp_path):
    assert main(["simulate", "--phantom", "--save-clean", "--out", str(tmp_path)]) == 0
    labels, _ = load_nifti(tmp_path / "labels.nii")
    assert set(np.unique(labels.data)) <= {0.0, 1.0}


def test_simulate_bad_arguments(tmp_path, capsys):
    assert main(["simulate", "--phantom", "--blur-ratio", "0.5", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--bogus"]) == 2
    assert main(["simulate", str(tmp_path / "missing.nii"), "--out", str(tmp_path)]) == 3


# --- metrics ----------------------------------------------------------------

def test_metrics_self_reference_and_missing_truth(tiny_run, tmp_path, capsys):
    assert main(["simulate", "--phantom", "--save-clean", "--seed", "4",
                 "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    clean = str(tmp_path / "clean.nii")
    assert main(["metrics", clean, "--model", str(tiny_run / "student.ckpt"),
                 "--reference", clean, "--mask", str(tmp_path / "tissues.nii")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sigma"] == 0.0
    assert "dice" not in report
    assert report["provenance"]["seed"] == 0

    out = tmp_path / "r.json"
    assert main(["metrics", clean, "--model", str(tiny_run / "student.ckpt"),
                 "--truth", str(tmp_path / "labels.nii"), "--out", str(out)]) == 0
    assert 0.0 <= json.loads(out.read_text())["dice"] <= 1.0


def test_metrics_batch_csv_rows(tiny_run, tmp_path):
    vols = tmp_path / "vols"
    vols.mkdir()
    for i, img in enumerate(generate_phantoms(4, 9).images):
        save_nifti(img, vols / f"case{i}.nii")
    out = tmp_path / "out"
    assert main(["metrics", str(vols), "--model", str(tiny_run / "student.ckpt"),
                 "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# provenance:")
    assert len(list(csv.DictReader(lines[1:]))) == 4
    assert len(list(out.glob("case*.json"))) == 4


def test_metrics_bundle_input(tmp_path, capsys):
    img = generate_phantoms(1, 3).images[0]
    save_nifti(img, tmp_path / "x.nii")
    rng = np.random.default_rng(0)
    np.savez(tmp_path / "b.npz", logits=rng.normal(size=(2, *img.shape)),
             s_task=rng.normal(size=img.shape), s_aug=rng.normal(size=(3, *img.shape)))
    assert main(["metrics", str(tmp_path / "x.nii"), "--bundle", str(tmp_path / "b.npz")]) == 0
    assert json.loads(capsys.readouterr().out)["mean_artefact_variance"] > 0
    np.savez(tmp_path / "bad.npz", logits=np.zeros((2, 3, 3, 3)), s_task=np.zeros((3, 3, 3)))
    assert main(["metrics", str(tmp_path / "x.nii"), "--bundle", str(tmp_path / "bad.npz")]) == 2


# --- train ------------------------------------------------------------------

def test_student_without_teachers_exits_4(tmp_path, capsys):
    assert main(["train", "--stage", "student", "--out", str(tmp_path), *TINY]) == 4
    err = capsys.readouterr().err
    assert "task" in err and "teacher:rf_spike" in err


def test_train_refuses_overwrite(tiny_run):
    assert main(["train", "--stage", "task", "--out", str(tiny_run), *TINY]) == 2


def test_train_replay_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["train", "--stage", "task", "--seed", "2", "--out", str(tmp_path / d),
                     *TINY]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_resume_matches_uninterrupted(tmp_path, monkeypatch):
    import decoupled_qc.cli as cli

    base = ["train", "--stage", "task", "--seed", "2", "--checkpoint-every", "3", *TINY]
    assert main([*base, "--out", str(tmp_path / "full")]) == 0

    real = cli.train_stage

    def interrupted(cfg, data, frozen=None, state=None, progress=None):
        def hook(st):
            progress(st)
            if st.iteration == 4:
                raise KeyboardInterrupt
        return real(cfg, data, frozen, state, hook)

    monkeypatch.setattr(cli, "train_stage", interrupted)
    part = tmp_path / "part"
    with pytest.raises(KeyboardInterrupt):
        main([*base, "--out", str(part)])
    monkeypatch.setattr(cli, "train_stage", real)
    # a different config must not silently continue the interrupted run
    assert main([*base, "--out", str(part), "--resume", "--set", "training.width=8"]) == 2
    assert main([*base, "--out", str(part), "--resume"]) == 0
    assert _files(part) == _files(tmp_path / "full")


def test_epsilon_log_non_increasing_and_below_floor(tmp_path):
    assert main(["train", "--stage", "task", "--out", str(tmp_path), *TINY,
                 "--set", "training.iterations=80"]) == 0
    with (tmp_path / "task_log.csv").open() as fh:
        eps = [float(r["epsilon"]) for r in csv.DictReader(fh)]
    assert len(eps) == 80
    assert all(b <= a for a, b in zip(eps, eps[1:]))
    assert eps[-1] < 1e-3


def test_train_bad_stage():
    assert main(["train", "--stage", "teacher:nope"]) == 2


# --- evaluate ---------------------------------------------------------------

def test_evaluate_outputs_and_rerun(tiny_run, tmp_path):
    runs = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert main(["evaluate", "--model", str(tiny_run), "--n", "12", "--out", str(out),
                     "--set", "evaluation.n_control=2"]) == 0
        runs.append(_files(out))
    assert runs[0] == runs[1]
    summary = json.loads(runs[0]["summary.json"])
    assert set(summary["correlations"]) == {"mean_artefact_variance", "snr", "cnr"}
    rows = list(csv.DictReader(runs[0]["metrics.csv"].decode().splitlines()[1:]))
    assert len(rows) == 12
    assert sum(r["id"].endswith("_none") for r in rows) == 2
    for metric in ("mean_artefact_variance", "snr", "cnr"):
        assert runs[0][f"dice_vs_{metric}.svg"].startswith(b"<?xml")


def test_evaluate_without_model_exits_4(tmp_path):
    assert main(["evaluate", "--model", str(tmp_path)]) == 4


# --- config -----------------------------------------------------------------

def test_unknown_config_key_is_an_error(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[training]\nlearning_rte = 0.1\n")
    assert main(["simulate", "--phantom", "--config", str(ini), "--out", str(tmp_path)]) == 2
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"nosuch.key": "1"})
    assert main(["simulate", "--phantom", "--set", "run.seed", "--out", str(tmp_path)]) == 2


def test_resolved_config_round_trips(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    cfg = RunConfig.load(None, {"training.iterations": "7", "run.seed": 3})
    assert cfg["io"]["out_dir"] == str(tmp_path / "env")
    path = cfg.write(tmp_path)
    again = RunConfig.load(path)
    assert again.digest() == cfg.digest()
    assert again["training"]["iterations"] == 7


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "root"))
    assert main(["simulate", "--phantom"]) == 0
    assert (tmp_path / "root" / "corrupted.nii").exists()

"""Tests for configuration, run orchestration, CLI and analysis exports.

A single miniature end-to-end run (small dataset, short training) is shared
by the whole module; individual tests assert on its layout, manifest,
resume behavior, report schema and the two analysis utilities.
"""

import hashlib
import json
import math
import os

import numpy as np
import pytest

from mindloop import dataset as D
from mindloop import tensor_io
from mindloop.cli import main as cli_main
from mindloop.config import ExperimentConfig, canonical_json
from mindloop.decoder import RidgeModel
from mindloop.errors import ConfigError, ContractError, StageError
from mindloop.pipeline import (
    RunPaths,
    _acquire_lock,
    export_roi_weights,
    k_sweep,
    reconstruct_stage,
    run_experiment,
    stage_seed,
)


def mini_config() -> ExperimentConfig:
    return ExperimentConfig(
        data=D.SynthesisConfig(n_train=48, n_test=8, n_lvc=24, n_hvc=24),
        ae_epochs=8,
        denoiser_epochs=3,
        denoiser_polish_epochs=1,
        diffusion_steps=12,
        sample_steps=4,
        align_lr=0.02,
        align_steps=4,
        align_tol=0.0,
        align_window=2,
    )


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """One full miniature run; tests treat the directory as read-only."""
    run_dir = tmp_path_factory.mktemp("mini") / "run"
    cfg = mini_config()
    report = run_experiment(cfg, run_dir)
    return cfg, RunPaths(run_dir), report


# configuration -------------------------------------------------------------


def test_config_round_trips_losslessly():
    cfg = mini_config()
    cfg.voxels_per_target = 17
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_config_rejects_unknown_keys():
    raw = json.loads(ExperimentConfig().to_json())
    raw["guidance_scale"] = 2.0
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)
    raw = json.loads(ExperimentConfig().to_json())
    raw["data"]["n_rois"] = 3
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


@pytest.mark.parametrize("field,value", [
    ("mode", "both"),
    ("roi", "v4"),
    ("ablate", "latent"),
    ("k_percent", 0.0),
    ("k_percent", 101.0),
    ("diffusion_steps", 0),
    ("sample_steps", 51),
    ("ridge_lambda", -1.0),
    ("voxels_per_target", 0),
    ("feature_layers", ()),
])
def test_config_validation_rejects_bad_fields(field, value):
    cfg = ExperimentConfig()
    setattr(cfg, field, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_stage_seeds_are_deterministic_and_distinct():
    assert stage_seed(0, "data") == stage_seed(0, "data")
    assert stage_seed(0, "data") != stage_seed(1, "data")
    assert stage_seed(0, "data") != stage_seed(0, "denoiser")
    # reference: first 8 little-endian bytes of sha256("7:denoiser")
    digest = hashlib.sha256(b"7:denoiser").digest()
    expect = int.from_bytes(digest[:8], "little")
    assert stage_seed(7, "denoiser") == expect


def test_stage_error_carries_the_stage_name():
    err = StageError("train-ae", "boom")
    assert str(err) == "stage 'train-ae' failed: boom"
    assert err.stage == "train-ae"


# run directory layout -------------------------------------------------------


def test_run_writes_expected_layout(mini_run):
    cfg, paths, report = mini_run
    archived = ExperimentConfig.from_json(paths.config.read_text())
    assert archived == cfg

    assert (paths.dataset / "manifest.json").exists()
    assert paths.autoencoder.exists()
    assert paths.denoiser.exists()
    for name in ("caption", "latent", "features", "selector"):
        assert (paths.decoders / f"{name}.ckpt").exists()
    assert (paths.decoders / "meta.json").exists()
    for name in ("images.mdt", "drafts.mdt", "caption_hat.mdt",
                 "latent_hat.mdt", "features_hat.mdt", "records.json"):
        assert (paths.recon / name).exists()
    n_test = cfg.data.n_test
    for i in range(n_test):
        for kind in ("stimulus", "draft", "final"):
            assert (paths.recon / "images" / f"item_{i:03d}_{kind}.png").exists()
    assert report == paths.report
    assert paths.report.exists()
    assert not paths.lock.exists()


def test_manifest_covers_every_artifact(mini_run):
    _, paths, _ = mini_run
    manifest = json.loads(paths.manifest.read_text())
    tracked = set()
    for entry in manifest["stages"].values():
        tracked.update(entry["outputs"])
    assert tracked == {"dataset", "artifacts/autoencoder.ckpt",
                       "artifacts/denoiser.ckpt", "artifacts/decoders",
                       "recon", "report.json"}
    bookkeeping = {paths.config, paths.lock, paths.manifest}
    roots = [paths.run / rel for rel in tracked]
    for file in paths.run.rglob("*"):
        if file.is_dir() or file in bookkeeping:
            continue
        assert any(root == file or root in file.parents for root in roots), file


def test_resume_skips_completed_stages(mini_run):
    cfg, paths, _ = mini_run
    before = {p: p.stat().st_mtime_ns
              for p in (paths.denoiser, paths.autoencoder, paths.report)}
    run_experiment(cfg, paths.run, resume=True)
    for p, stamp in before.items():
        assert p.stat().st_mtime_ns == stamp


def test_rerun_refuses_conflicting_config(mini_run):
    cfg, paths, _ = mini_run
    other = ExperimentConfig.from_json(cfg.to_json())
    other.seed = cfg.seed + 1
    with pytest.raises(StageError, match="stage 'config'"):
        run_experiment(other, paths.run)


def test_live_lock_blocks_and_stale_lock_clears(tmp_path):
    paths = RunPaths(tmp_path / "locked")
    paths.run.mkdir(parents=True)
    paths.lock.write_text(canonical_json({"pid": os.getpid()}))
    with pytest.raises(StageError, match="stage 'lock'"):
        _acquire_lock(paths)
    paths.lock.write_text(canonical_json({"pid": 4194301}))  # almost surely dead
    _acquire_lock(paths)
    assert json.loads(paths.lock.read_text())["pid"] == os.getpid()


# report ----------------------------------------------------------------------


def test_report_schema(mini_run):
    cfg, paths, report_path = mini_run
    report = json.loads(report_path.read_text())
    assert set(report) == {"config", "reconstruction", "decoder_accuracy",
                           "items", "means", "fid", "fid_note"}
    assert report["config"] == cfg.to_dict()
    assert report["reconstruction"] == {"mode": "decoded", "ablate": "none",
                                        "roi": "all", "n_items": cfg.data.n_test}
    assert set(report["decoder_accuracy"]) == {"caption", "latent", "features"}
    assert len(report["items"]) == cfg.data.n_test
    for row in report["items"]:
        assert {"index", "class_id", "caption", "clip_sim", "ssim", "pcc"} <= set(row)
        for key in ("clip_sim", "ssim", "pcc"):
            assert -1.0 <= row[key] <= 1.0
    assert set(report["means"]) == {"clip_sim", "ssim", "pcc"}
    # 8 test items cannot support a 64-dim embedding FID
    assert report["fid"] is None
    assert "64-dim" in report["fid_note"]


def test_evaluate_twice_is_byte_identical(mini_run, tmp_path):
    cfg, paths, report_path = mini_run
    from mindloop.pipeline import evaluate_stage

    again = tmp_path / "report2.json"
    evaluate_stage(cfg, paths.recon, paths.dataset, again)
    assert again.read_bytes() == report_path.read_bytes()


# reconstruct stage edge cases -------------------------------------------------


def test_reconstruct_roi_must_match_fitted_decoders(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    with pytest.raises(StageError, match="refit"):
        reconstruct_stage(cfg, paths.dataset, paths.artifacts, tmp_path / "r",
                          roi="lvc", write_images=False)


def test_upper_bound_needs_no_decoders(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    models = tmp_path / "models"
    models.mkdir()
    for name in ("autoencoder.ckpt", "denoiser.ckpt"):
        (models / name).write_bytes((paths.artifacts / name).read_bytes())
    out = reconstruct_stage(cfg, paths.dataset, models, tmp_path / "r",
                            mode="upper-bound", limit=2, write_images=False)
    records = json.loads((out / "records.json").read_text())
    assert records["n_items"] == 2
    assert records["decoder_accuracy"] is None
    assert tensor_io.read_tensor(out / "images.mdt").shape[0] == 2


def test_reconstruct_missing_models_raises(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    with pytest.raises(ContractError, match="train-ae"):
        reconstruct_stage(cfg, paths.dataset, tmp_path / "empty", tmp_path / "r")


def test_decoded_mode_needs_fitted_decoders(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    models = tmp_path / "models"
    models.mkdir()
    for name in ("autoencoder.ckpt", "denoiser.ckpt"):
        (models / name).write_bytes((paths.artifacts / name).read_bytes())
    with pytest.raises(ContractError, match="fit-decoders"):
        reconstruct_stage(cfg, paths.dataset, models, tmp_path / "r",
                          mode="decoded", write_images=False)


# k sweep -----------------------------------------------------------------------


def test_k_sweep_rows_and_monotone_accuracy(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    out = tmp_path / "sweep.csv"
    ks = [5.0, 25.0, 75.0, 100.0]
    rows = k_sweep(cfg, paths.run, ks, out_path=out)
    assert len(rows) == len(ks) * 3
    per_k = {k: [r for r in rows if r["k_percent"] == k] for k in ks}
    n_features = 1024 + 512 + 256
    for k in ks:
        batch = per_k[k]
        assert [r["metric"] for r in batch] == ["clip_sim", "ssim", "pcc"]
        assert all(r["n_retained"] == math.ceil(n_features * k / 100) for r in batch)
    # retained-dimension CV accuracy rises as k shrinks
    accs = [per_k[k][0]["decoding_accuracy"] for k in ks]
    assert accs[0] >= accs[1] >= accs[2] >= accs[3]
    assert accs[0] > accs[3]
    # k=100 keeps everything
    assert per_k[100.0][0]["n_retained"] == n_features
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "k_percent,n_retained,decoding_accuracy,metric,value"
    assert len(lines) == 1 + len(rows)


def test_k_sweep_validates_ks(mini_run):
    cfg, paths, _ = mini_run
    with pytest.raises(ContractError):
        k_sweep(cfg, paths.run, [])
    with pytest.raises(ContractError):
        k_sweep(cfg, paths.run, [0.0])
    with pytest.raises(ContractError):
        k_sweep(cfg, paths.run, [101.0])


# roi weight export ---------------------------------------------------------------


def test_export_weights_one_row_per_voxel(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    out = tmp_path / "w.csv"
    rows = export_roi_weights(cfg, paths.run, out_path=out)
    n_voxels = cfg.data.n_lvc + cfg.data.n_hvc
    assert len(rows) == n_voxels
    assert [r["voxel"] for r in rows] == list(range(n_voxels))
    assert sum(r["roi"] == "lvc" for r in rows) == cfg.data.n_lvc
    assert sum(r["roi"] == "hvc" for r in rows) == cfg.data.n_hvc
    for r in rows:
        for name in ("caption", "latent", "features"):
            assert r[name] >= 0.0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "voxel,roi,caption,latent,features"
    assert len(lines) == 1 + n_voxels


def test_export_weights_zero_for_unselected_voxels(mini_run, tmp_path):
    cfg, paths, _ = mini_run
    run2 = RunPaths(tmp_path / "run2")
    run2.decoders.mkdir(parents=True)
    run2.dataset.symlink_to(paths.dataset)
    n_voxels = cfg.data.n_lvc + cfg.data.n_hvc
    # two targets, both reading only voxel 0 with weights 2 and 4
    model = RidgeModel(
        weights=np.array([[2.0], [-4.0]]),
        indices=np.array([[0], [0]], dtype=np.intp),
        bias=np.zeros(2), mu_x=np.zeros(n_voxels), sd_x=np.ones(n_voxels),
        lam=1.0, voxels_per_target=1,
    )
    for name in ("caption", "latent", "features"):
        model.save(run2.decoders / f"{name}.ckpt")
    (run2.decoders / "meta.json").write_text(canonical_json({
        "roi": "all", "voxel_ids": list(range(n_voxels)),
        "ridge_lambda": 1.0, "voxels_per_target": 1, "k_percent": 25.0,
        "cv_accuracy": {},
    }))
    rows = export_roi_weights(cfg, run2.run)
    assert rows[0]["caption"] == pytest.approx(3.0)
    for r in rows[1:]:
        assert r["caption"] == 0.0 and r["latent"] == 0.0 and r["features"] == 0.0


def test_export_weights_requires_fitted_decoders(mini_run, tmp_path):
    cfg, _, _ = mini_run
    with pytest.raises(ContractError):
        export_roi_weights(cfg, tmp_path / "nothing")


# CLI ------------------------------------------------------------------------------


def test_cli_synth_data_writes_dataset(tmp_path):
    out = tmp_path / "data"
    code = cli_main(["synth-data", "--out", str(out), "--n-train", "6",
                     "--n-test", "2", "--n-lvc", "4", "--n-hvc", "4"])
    assert code == 0
    ds = D.load_dataset(out)
    assert len(ds.train) == 6 and len(ds.test) == 2


def test_cli_config_conflict_exits_one(mini_run, capsys):
    _, paths, _ = mini_run
    code = cli_main(["run", "--run", str(paths.run), "--seed", "123"])
    assert code == 1
    assert "stage 'config' failed" in capsys.readouterr().err


def test_cli_contract_error_exits_two(tmp_path, capsys):
    code = cli_main(["evaluate", "--recon", str(tmp_path / "nope"),
                     "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "r.json")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_cli_evaluate_matches_run_report(mini_run, tmp_path):
    cfg, paths, report_path = mini_run
    out = tmp_path / "cli_report.json"
    code = cli_main(["evaluate", "--recon", str(paths.recon),
                     "--dataset", str(paths.dataset), "--out", str(out),
                     "--config", str(paths.config)])
    assert code == 0
    assert out.read_bytes() == report_path.read_bytes()


def test_cli_reconstruct_upper_bound_with_limit(mini_run, tmp_path):
    _, paths, _ = mini_run
    out = tmp_path / "recon"
    code = cli_main(["reconstruct", "--dataset", str(paths.dataset),
                     "--models", str(paths.artifacts), "--out", str(out),
                     "--mode", "upper-bound", "--limit", "2",
                     "--config", str(paths.config)])
    assert code == 0
    assert (out / "images" / "item_001_final.png").exists()
    assert json.loads((out / "records.json").read_text())["mode"] == "upper-bound"


def test_cli_export_weights_defaults_to_run_dir(mini_run):
    _, paths, _ = mini_run
    code = cli_main(["export-weights", "--run", str(paths.run)])
    assert code == 0
    assert (paths.run / "roi_weights.csv").exists()


def test_cli_k_sweep_single_k(mini_run):
    _, paths, _ = mini_run
    code = cli_main(["k-sweep", "--run", str(paths.run), "--ks", "100"])
    assert code == 0
    lines = (paths.run / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 4

import json
import os

import numpy as np
import pytest

from latentmap import cli, dataio, pipeline as pl
from latentmap.preprocess import CountMatrix


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    """Small synthetic corpus on disk, via the synth command."""
    out = tmp_path_factory.mktemp("corpus")
    rc = cli.main(["synth", "--out", str(out), "--seed", "9", "--n-cells", "80",
                   "--n-genes", "120", "--n-shared", "40", "--grid-side", "8",
                   "--n-query", "10"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def data_dir(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    rc = cli.main(["preprocess",
                   "--sc-counts", str(corpus_dir / "sc_counts.csv"),
                   "--st-counts", str(corpus_dir / "st_counts.csv"),
                   "--st-coords", str(corpus_dir / "st_coords.csv"),
                   "--out", str(out),
                   "--min-genes", "30", "--min-cells", "10",
                   "--n-hvg", "80", "--n-shared", "30"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    cfg = pl.TrainConfig(s1_epochs=25, s2_epochs=3, s2b_epochs=2, s3_epochs=25,
                         latent_dim=4, enc_hidden=(16, 8), kl_weight=0.01, seed=4)
    cfg.save(path)
    return path


@pytest.fixture(scope="module")
def trained_run(data_dir, tiny_config, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--stage", "all", "--data", str(data_dir),
                   "--run-dir", str(run_dir), "--config", str(tiny_config)])
    assert rc == 0
    return run_dir


def test_synth_writes_expected_files(corpus_dir):
    for name in ("sc_counts.csv", "st_counts.csv", "st_coords.csv",
                 "truth_labels.csv", "regions.csv", "sc_query_counts.csv"):
        assert (corpus_dir / name).exists(), name


def test_synth_deterministic(tmp_path):
    args = ["--seed", "3", "--n-cells", "30", "--n-genes", "50", "--n-shared", "20",
            "--grid-side", "8"]
    assert cli.main(["synth", "--out", str(tmp_path / "a")] + args) == 0
    assert cli.main(["synth", "--out", str(tmp_path / "b")] + args) == 0
    for name in ("sc_counts.csv", "st_counts.csv", "st_coords.csv", "truth_labels.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_preprocess_outputs_and_summary(data_dir):
    for name in ("x_sc2000.csv", "x_sc500.csv", "x_st500.csv", "st_coords.csv",
                 "panel_hvg2000.txt", "panel_shared500.txt", "summary.json"):
        assert (data_dir / name).exists(), name
    summary = json.loads((data_dir / "summary.json").read_text())
    assert summary["panel_shared"] == 30
    # drop counts consistent with matrix dimensions
    assert summary["sc"]["cells_in"] - summary["sc"]["cells_dropped_low_genes"] - \
        summary["sc"]["cells_dropped_mito_ribo"] == summary["sc"]["cells_out"]


def test_preprocess_passthrough_thresholds(corpus_dir, tmp_path):
    out = tmp_path / "prep0"
    rc = cli.main(["preprocess",
                   "--sc-counts", str(corpus_dir / "sc_counts.csv"),
                   "--st-counts", str(corpus_dir / "st_counts.csv"),
                   "--st-coords", str(corpus_dir / "st_coords.csv"),
                   "--out", str(out), "--min-genes", "0", "--min-cells", "0",
                   "--max-mito-ribo", "1.0", "--n-hvg", "120", "--n-shared", "40"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["sc"]["cells_in"] == summary["sc"]["cells_out"]
    assert summary["sc"]["genes_in"] == summary["sc"]["genes_out"]


def test_preprocess_drop_counts_match_recount(corpus_dir, data_dir):
    summary = json.loads((data_dir / "summary.json").read_text())
    sc = dataio.read_counts_csv(corpus_dir / "sc_counts.csv")
    expressed = (sc.counts > 0).sum(axis=1)
    assert summary["sc"]["cells_dropped_low_genes"] == int((expressed < 30).sum())


def test_preprocess_unparseable_file_reports_line(tmp_path, corpus_dir):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,g0\nc0,notanumber\n")
    rc = cli.main(["preprocess", "--sc-counts", str(bad),
                   "--st-counts", str(corpus_dir / "st_counts.csv"),
                   "--st-coords", str(corpus_dir / "st_coords.csv"),
                   "--out", str(tmp_path / "out")])
    assert rc == cli.EXIT_DATA


def test_train_stage3_before_2_dependency_error(data_dir, tiny_config, tmp_path):
    rc = cli.main(["train", "--stage", "3", "--data", str(data_dir),
                   "--run-dir", str(tmp_path / "run"), "--config", str(tiny_config)])
    assert rc == cli.EXIT_DEPENDENCY


def test_train_missing_data_dependency_error(tiny_config, tmp_path):
    rc = cli.main(["train", "--stage", "1", "--data", str(tmp_path / "nope"),
                   "--run-dir", str(tmp_path / "run"), "--config", str(tiny_config)])
    assert rc == cli.EXIT_DEPENDENCY


def test_trained_run_layout(trained_run):
    run = pl.RunDir(trained_run)
    for stage in (1, 2, 3):
        assert run.stage_complete(stage)
    assert (trained_run / "manifest.json").exists()
    assert (trained_run / "config.json").exists()
    assert (trained_run / "panel_shared.txt").exists()
    assert (trained_run / "graph_edges.txt").exists()
    assert not (trained_run / ".lock").exists()  # released


def test_manifest_contents(trained_run, data_dir):
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert manifest["seed"] == 4
    assert manifest["tool_version"]
    assert set(manifest["input_digests"]) == {
        "x_sc2000.csv", "x_sc500.csv", "x_st500.csv", "st_coords.csv",
        "panel_shared500.txt"}
    digest = cli.file_digest(str(data_dir / "x_sc500.csv"))
    assert manifest["input_digests"]["x_sc500.csv"] == digest


def test_rerun_without_force_refused(trained_run, data_dir, tiny_config):
    rc = cli.main(["train", "--stage", "1", "--data", str(data_dir),
                   "--run-dir", str(trained_run), "--config", str(tiny_config)])
    assert rc == cli.EXIT_DEPENDENCY


def test_changed_config_on_resume_refused(trained_run, data_dir, tmp_path):
    other = pl.TrainConfig(s1_epochs=26, s2_epochs=3, s2b_epochs=2, s3_epochs=25,
                           latent_dim=4, enc_hidden=(16, 8), kl_weight=0.01, seed=4)
    path = tmp_path / "other.json"
    other.save(path)
    rc = cli.main(["train", "--stage", "1", "--data", str(data_dir),
                   "--run-dir", str(trained_run), "--config", str(path)])
    assert rc == cli.EXIT_DEPENDENCY


def test_lock_blocks_concurrent_use(trained_run, data_dir, tiny_config):
    lock = trained_run / ".lock"
    lock.write_text("12345\n")
    try:
        rc = cli.main(["train", "--stage", "1", "--data", str(data_dir),
                       "--run-dir", str(trained_run), "--config", str(tiny_config),
                       "--force"])
        assert rc == cli.EXIT_DEPENDENCY
    finally:
        lock.unlink()


def test_infer_writes_predictions(trained_run, corpus_dir, tmp_path):
    out = tmp_path / "pred.csv"
    rc = cli.main(["infer", "--run-dir", str(trained_run),
                   "--query", str(corpus_dir / "sc_query_counts.csv"),
                   "--out", str(out), "--allow-extra-genes"])
    assert rc == 0
    ids, cols, mat = dataio.read_matrix_csv(out)
    panel = dataio.read_id_list(trained_run / "panel_shared.txt")
    assert cols == ["x_hat", "y_hat"] + panel
    assert len(ids) == 10


def test_infer_panel_mismatch_exit_code(trained_run, tmp_path):
    bad = tmp_path / "bad_query.csv"
    m = CountMatrix(["q0"], ["NOT_A_GENE"], [[3]])
    dataio.write_counts_csv(bad, m)
    rc = cli.main(["infer", "--run-dir", str(trained_run), "--query", str(bad),
                   "--out", str(tmp_path / "pred.csv")])
    assert rc == cli.EXIT_DATA


def test_infer_strict_panel_rejects_superset(trained_run, corpus_dir, tmp_path):
    rc = cli.main(["infer", "--run-dir", str(trained_run),
                   "--query", str(corpus_dir / "sc_query_counts.csv"),
                   "--out", str(tmp_path / "pred.csv")])
    assert rc == cli.EXIT_DATA  # full gene set is a superset of the panel


def test_bench_reports(trained_run, corpus_dir, tmp_path):
    out = tmp_path / "bench"
    rc = cli.main(["bench", "--latent", str(trained_run / "latents" / "z_sc2000.csv"),
                   "--labels", str(corpus_dir / "truth_labels.csv"),
                   "--out", str(out), "--k", "1", "4", "--folds", "4",
                   "--holdout", "0.25"])
    assert rc == 0
    report = (out / "report.txt").read_text()
    assert "k=4" in report and "holdout" in report and "ari(" in report
    confusion = (out / "confusion.csv").read_text().strip().splitlines()
    assert confusion[0].startswith("true\\pred,")
    acc_k = (out / "accuracy_vs_k.csv").read_text().strip().splitlines()
    assert acc_k[0] == "k,mean_accuracy,std"
    assert len(acc_k) == 3


def test_bench_unmatched_ids_listed(trained_run, tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("id,label\nonly_one,typeA\n")
    rc = cli.main(["bench", "--latent", str(trained_run / "latents" / "z_sc2000.csv"),
                   "--labels", str(labels), "--out", str(tmp_path / "bench")])
    assert rc == cli.EXIT_DATA


def test_bench_perfect_cluster_fixture(tmp_path):
    rng = np.random.default_rng(0)
    codes = np.vstack([rng.normal(0, 0.05, size=(8, 3)), rng.normal(9, 0.05, size=(8, 3))])
    ids = [f"c{i}" for i in range(16)]
    dataio.write_latent_csv(tmp_path / "z.csv", ids, codes)
    dataio.write_labels_csv(tmp_path / "labels.csv",
                            [(i, "a" if int(i[1:]) < 8 else "b") for i in ids])
    out = tmp_path / "bench"
    rc = cli.main(["bench", "--latent", str(tmp_path / "z.csv"),
                   "--labels", str(tmp_path / "labels.csv"), "--out", str(out),
                   "--k", "3"])
    assert rc == 0
    assert "mean=1.000000" in (out / "report.txt").read_text()


def test_gradcheck_command():
    assert cli.main(["gradcheck"]) == 0


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])  # missing required args
    assert exc.value.code == cli.EXIT_USAGE


def test_determinism_two_cli_runs(data_dir, tiny_config, tmp_path):
    dirs = [tmp_path / "r1", tmp_path / "r2"]
    for d in dirs:
        rc = cli.main(["train", "--stage", "all", "--data", str(data_dir),
                       "--run-dir", str(d), "--config", str(tiny_config)])
        assert rc == 0
    for rel in ("history/stage1.csv", "history/stage2.csv", "history/stage3.csv",
                "latents/z_sc2000.csv", "latents/z_sc500.csv", "latents/z_st500.csv",
                "latents/z_st_merged.csv"):
        a = (dirs[0] / rel).read_bytes()
        b = (dirs[1] / rel).read_bytes()
        assert a == b, rel

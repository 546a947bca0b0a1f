import json

import numpy as np
import pytest

from pcconf.cli import main
from pcconf.confnet import load_checkpoint, save_checkpoint
from pcconf.config import RunConfig
from pcconf.embedsim import (
    WorldConfig,
    identity_basis,
    read_embedding_store,
    read_identities_csv,
    write_embedding_store,
    write_identities_csv,
)
from pcconf.fusion import read_manifest_csv, write_manifest_csv
from pcconf.pairgen import read_pairs_csv, write_pairs_csv

SMALL = [
    "world.num_identities=24",
    "world.images_per_identity=8",
    "protocol.eval_identities=30",
    "protocol.eval_images_per_identity=8",
    "protocol.n_genuine=400",
    "protocol.n_impostor=4000",
    "fusion.identities=30",
    "fusion.images_per_identity=24",
    "train.max_epochs=3",
    "train.hidden_sizes=16,16",
]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    assert run("pipeline", "--out", out, "--seed", 3, *SMALL) == 0
    assert run("report", "--out", out, *SMALL) == 0
    return out


def manifest(out, cmd):
    return json.loads((out / f"manifest_{cmd}.json").read_text())


def test_simulate_twice_same_checksums(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--out", a, *SMALL) == 0
    assert run("simulate", "--out", b, *SMALL) == 0
    assert manifest(a, "simulate")["artifacts"] == manifest(b, "simulate")["artifacts"]
    assert (a / "manifest_simulate.json").read_bytes() == (b / "manifest_simulate.json").read_bytes()


def test_seed_changes_world(tmp_path):
    run("simulate", "--out", tmp_path / "a", "--seed", 1, *SMALL)
    run("simulate", "--out", tmp_path / "b", "--seed", 2, *SMALL)
    assert (tmp_path / "a" / "world_train.pceb").read_bytes() != (tmp_path / "b" / "world_train.pceb").read_bytes()


def test_eval_before_train_exits_2(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, *SMALL) == 0
    assert run("eval-covariate", "--out", tmp_path, *SMALL) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("pcconf: error=missing_artifact command=eval-covariate exit=2 message=")


def test_train_before_pairscore_exits_2(tmp_path):
    assert run("simulate", "--out", tmp_path, *SMALL) == 0
    assert run("train", "--out", tmp_path, *SMALL) == 2


def test_unknown_key_exits_1(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, "world.colour=3") == 1
    assert "error=bad_config" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("world.num_identities = many\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 1
    assert run("simulate", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == 1


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small world\nworld.num_identities = 5\nworld.images_per_identity = 3\nrun.seed = 4\n")
    config = RunConfig.load(cfg, ["world.num_identities=6"])
    assert config["world.num_identities"] == 6
    assert config["world.images_per_identity"] == 3
    assert config["run.seed"] == 4
    assert config["train.max_epochs"] == 60


def test_no_output_directory_exits_1(monkeypatch):
    monkeypatch.delenv("PCCONF_OUT", raising=False)
    assert run("simulate", *SMALL) == 1


def test_pcconf_out_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("PCCONF_OUT", str(tmp_path / "env"))
    assert run("simulate", *SMALL) == 0
    assert (tmp_path / "env" / "world_train.pceb").is_file()
    # --out wins over the environment
    assert run("simulate", "--out", tmp_path / "flag", *SMALL) == 0
    assert (tmp_path / "flag" / "world_train.pceb").is_file()


def test_empty_report_dir_exits_2(tmp_path):
    assert run("report", "--out", tmp_path) == 2
    assert run("report", "--out", tmp_path / "nowhere") == 2


def test_pipeline_artifacts(small_run):
    names = {p.name for p in small_run.iterdir()}
    for expected in (
        "world_train.pceb",
        "identities_train.csv",
        "pairs.csv",
        "folds.csv",
        "model.pcnm",
        "model.pcnm.json",
        "error_reject_learned.csv",
        "error_reject_oracle.csv",
        "correlation_bins.csv",
        "covariate.json",
        "sets.csv",
        "fused_uniform.pceb",
        "fused_confidence.pceb",
        "fusion_roc.csv",
        "fusion.json",
        "ranked.csv",
        "rank.json",
        "report.txt",
        "table_covariate.csv",
        "plot_error_reject.csv",
        "plot_correlation.csv",
        "plot_fusion.csv",
    ):
        assert expected in names
    m = manifest(small_run, "eval-covariate")
    assert m["seed"] == 3
    assert "timestamp" not in json.dumps(m)


def test_manifest_checksums_match_files(small_run):
    import hashlib

    for cmd in ("simulate", "pairscore", "train", "eval-covariate", "eval-fusion", "rank", "report"):
        for name, digest in manifest(small_run, cmd)["artifacts"].items():
            assert hashlib.sha256((small_run / name).read_bytes()).hexdigest() == digest


def test_report_five_rows_per_far(small_run):
    text = (small_run / "report.txt").read_text()
    blocks = [b for b in text.split("\n\n") if b.startswith("TAR@FAR=")]
    assert len(blocks) == 5
    for block in blocks:
        rows = block.splitlines()[2:]
        assert [r.split()[0] for r in rows] == ["0.00", "0.10", "0.20", "0.30", "0.40"]
    table = (small_run / "table_covariate.csv").read_text().splitlines()
    assert len(table) == 1 + 25


def test_report_idempotent(small_run):
    before = {p.name: p.read_bytes() for p in small_run.iterdir()}
    assert run("report", "--out", small_run, *SMALL) == 0
    after = {p.name: p.read_bytes() for p in small_run.iterdir()}
    assert before == after


def test_ranked_export(small_run):
    lines = (small_run / "ranked.csv").read_text().splitlines()
    assert lines[0] == "rank,image_id,identity,confidence,quality,bucket"
    conf = [float(line.split(",")[3]) for line in lines[1:]]
    assert conf == sorted(conf)
    buckets = [line.split(",")[5] for line in lines[1:]]
    assert buckets[0] == "low" and buckets[-1] == "high"


def test_artifact_round_trips(small_run, tmp_path):
    table = read_embedding_store(small_run / "world_train.pceb")
    write_embedding_store(
        tmp_path / "w.pceb",
        table["image_id"],
        table["identity_id"],
        table["quality"],
        table["mask"],
        table["embedding"],
    )
    assert (tmp_path / "w.pceb").read_bytes() == (small_run / "world_train.pceb").read_bytes()

    identities = read_identities_csv(small_run / "identities_train.csv", identity_basis(WorldConfig(seed=3)))
    write_identities_csv(tmp_path / "i.csv", identities)
    assert (tmp_path / "i.csv").read_bytes() == (small_run / "identities_train.csv").read_bytes()

    write_pairs_csv(tmp_path / "p.csv", read_pairs_csv(small_run / "pairs.csv"))
    assert (tmp_path / "p.csv").read_bytes() == (small_run / "pairs.csv").read_bytes()

    write_manifest_csv(tmp_path / "s.csv", read_manifest_csv(small_run / "sets.csv"))
    assert (tmp_path / "s.csv").read_bytes() == (small_run / "sets.csv").read_bytes()

    model = load_checkpoint(small_run / "model.pcnm")
    sidecar = json.loads((small_run / "model.pcnm.json").read_text())
    save_checkpoint(tmp_path / "m.pcnm", model, sidecar)
    assert (tmp_path / "m.pcnm").read_bytes() == (small_run / "model.pcnm").read_bytes()
    assert (tmp_path / "m.pcnm.json").read_bytes() == (small_run / "model.pcnm.json").read_bytes()


def test_threads_do_not_change_artifacts(small_run, tmp_path):
    assert run("pipeline", "--out", tmp_path, "--seed", 3, "--threads", 4, *SMALL) == 0
    assert run("report", "--out", tmp_path, *SMALL) == 0
    for p in small_run.iterdir():
        if p.name.startswith("manifest_"):
            continue
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_fused_store_has_one_row_per_set(small_run):
    sets = read_manifest_csv(small_run / "sets.csv")
    fused = read_embedding_store(small_run / "fused_confidence.pceb")
    assert fused["image_id"].tolist() == [s[0] for s in sets]
    assert np.all(fused["quality"] > 0)

"""Command-line pipeline.

    pcconf <command> [--config PATH] [--seed N] [--threads N] [--out DIR] [key=value ...]

Commands run in order ``simulate -> pairscore -> train -> eval-covariate ->
eval-fusion -> rank -> report``; ``pipeline`` runs them all. Each writes its
artifacts and a ``manifest_<command>.json`` into the output directory.

Exit status: 0 success, 1 bad config, 2 missing prerequisite artifact,
3 numerical failure. Failures print one ``pcconf: error=<kind> ...`` line
on stderr.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from ._validation import NumericalError
from .config import ConfigError, RunConfig
from .confnet import ConfidenceModel, PairCorpus, load_checkpoint, save_checkpoint, train
from .embedsim import World, generate_world
from .fusion import (
    SetFuser,
    build_set_manifest,
    fuse,
    materialize_sets,
    read_manifest_csv,
    set_pairs,
    set_verification,
    write_descriptor_store,
    write_manifest_csv,
)
from .metrics import (
    build_covariate_protocol,
    correlation_bins,
    count_decreases,
    error_vs_reject,
    write_curve_csv,
    write_json,
)
from .pairgen import SubspaceRecognizer, generate_pair_corpus, read_pairs_csv, write_pairs_csv
from .ranking import rank_by_confidence, write_ranked_csv
from .seeding import derive_int, derive_rng

log = logging.getLogger("pcconf")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 1, 2, 3


class MissingArtifact(RuntimeError):
    pass


def _world_paths(out, split):
    return out / f"world_{split}.pceb", out / f"identities_{split}.csv"


def _require(*paths):
    for path in paths:
        if not Path(path).is_file():
            raise MissingArtifact(str(path))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, command, config, artifacts, extra=None):
    manifest = {
        "command": command,
        "seed": config.seed,
        "config": config.snapshot(),
        "artifacts": {Path(a).name: _sha256(a) for a in sorted(artifacts, key=lambda p: Path(p).name)},
        "versions": {"pcconf": __version__, "numpy": np.__version__},
    }
    if extra:
        manifest.update(extra)
    write_json(out / f"manifest_{command}.json", manifest)


def _load_world(out, config, split):
    store, idents = _world_paths(out, split)
    _require(store, idents)
    return World.read(config.world_config(split), store, idents)


def _load_model(out):
    path = out / "model.pcnm"
    _require(path)
    return load_checkpoint(path)


def _verification_recognizer(config, world):
    """Recognizer used at evaluation time, fitted on the whole training world."""
    return SubspaceRecognizer(config["world.identity_dim"], random_state=derive_int(config.seed, "recognizer")).fit(
        world.embeddings
    )


def cmd_simulate(config, out, threads=1):
    artifacts = []
    for split in ("train", "eval", "fusion"):
        world = generate_world(config.world_config(split), split=split)
        store, idents = _world_paths(out, split)
        world.write(store, idents)
        artifacts += [store, idents]
        log.info("simulated %s world: %d records", split, len(world))
    _write_manifest(out, "simulate", config, artifacts)


def cmd_pairscore(config, out, threads=1):
    world = _load_world(out, config, "train")
    budget = config["pairs.pair_budget"] or None
    split, recognizers, pairs = generate_pair_corpus(
        world,
        config["world.identity_dim"],
        config.seed,
        pair_budget=budget,
        clamp=config["pairs.clamp"],
        threads=threads,
    )
    pairs_path, folds_path = out / "pairs.csv", out / "folds.csv"
    write_pairs_csv(pairs_path, pairs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["identity", "fold"])
    for name, ids in (("a", split.fold_a), ("b", split.fold_b)):
        writer.writerows([i, name] for i in ids)
    folds_path.write_text(buf.getvalue())
    diagnostics = {
        fold: {
            "eigenvalues": rec.eigenvalues_.tolist(),
            "n_iter": rec.n_iter_,
            "converged": rec.converged_,
        }
        for fold, rec in recognizers.items()
    }
    _write_manifest(out, "pairscore", config, [pairs_path, folds_path], {"recognizers": diagnostics})
    log.info("scored %d mated pairs", len(pairs))


def cmd_train(config, out, threads=1):
    world = _load_world(out, config, "train")
    _require(out / "pairs.csv")
    corpus = PairCorpus.from_pairs(read_pairs_csv(out / "pairs.csv"), world.image_ids, world.embeddings)
    train_config = config.train_config(seed=derive_int(config.seed, "train/sgd"))
    sizes = [world.embeddings.shape[1], *train_config.hidden_sizes, 1]
    model = ConfidenceModel.initialize(sizes, derive_rng(config.seed, "train/init"))
    model, report = train(model, corpus, train_config)
    log.info("trained %d epochs in %.1fs (%s)", len(report.epoch_losses), report.wall_clock, report.stop_reason)
    path = out / "model.pcnm"
    sidecar = {
        "train_config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(train_config).items()},
        "report": report.to_dict(),
        "final_loss": report.epoch_losses[-1],
    }
    save_checkpoint(path, model, sidecar)
    _write_manifest(out, "train", config, [path, Path(str(path) + ".json")])


def _write_correlation_csv(path, bins):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin", "conf_lo", "conf_hi", "count", "mean_similarity"])
    for i, (count, mean) in enumerate(zip(bins.counts, bins.mean_similarity)):
        writer.writerow([i, repr(float(bins.edges[i])), repr(float(bins.edges[i + 1])), int(count), repr(float(mean))])
    Path(path).write_text(buf.getvalue())


def cmd_eval_covariate(config, out, threads=1):
    model = _load_model(out)
    train_world = _load_world(out, config, "train")
    world = _load_world(out, config, "eval")
    recognizer = _verification_recognizer(config, train_world)
    conf = model.forward(world.embeddings)
    if not np.all(np.isfinite(conf)):
        raise NumericalError("model produced non-finite confidences")

    protocol = build_covariate_protocol(
        world.image_ids,
        world.identity_ids,
        world.embeddings,
        recognizer,
        conf,
        n_genuine=config["protocol.n_genuine"],
        n_impostor=config["protocol.n_impostor"],
        rng=derive_rng(config.seed, "covariate-protocol"),
    )
    q_of = dict(zip(world.image_ids.tolist(), world.qualities))
    oracle_conf = np.minimum(
        [q_of[i] for i in protocol.image_a.tolist()], [q_of[i] for i in protocol.image_b.tolist()]
    )
    r_grid, fars = config.r_grid(), list(config["eval.far_targets"])
    curves = {
        "learned": error_vs_reject(protocol, r_grid, fars, threads=threads),
        "oracle": error_vs_reject(protocol.with_confidence(oracle_conf), r_grid, fars, threads=threads),
    }
    artifacts = []
    for name, curve in curves.items():
        path = out / f"error_reject_{name}.csv"
        write_curve_csv(path, curve)
        artifacts.append(path)

    mated = build_covariate_protocol(
        world.image_ids,
        world.identity_ids,
        world.embeddings,
        recognizer,
        conf,
        n_genuine=None,
        n_impostor=0,
        rng=derive_rng(config.seed, "correlation"),
    )
    bins = correlation_bins(mated, n_bins=config["protocol.correlation_bins"])
    corr_path = out / "correlation_bins.csv"
    _write_correlation_csv(corr_path, bins)
    artifacts.append(corr_path)

    bundle = {
        "n_genuine": int(protocol.is_genuine.sum()),
        "n_impostor": int((~protocol.is_genuine).sum()),
        "spearman_confidence_quality": float(spearmanr(conf, world.qualities).statistic),
        "curves": {name: c.to_dict() for name, c in curves.items()},
        "correlation": {
            **bins.to_dict(),
            "n_mated": len(mated),
            "occupied": int(bins.occupied.sum()),
            "decreases": count_decreases(bins.occupied_means()),
        },
    }
    bundle_path = out / "covariate.json"
    write_json(bundle_path, bundle)
    artifacts.append(bundle_path)
    _write_manifest(out, "eval-covariate", config, artifacts)


def cmd_eval_fusion(config, out, threads=1):
    model = _load_model(out)
    train_world = _load_world(out, config, "train")
    world = _load_world(out, config, "fusion")
    recognizer = _verification_recognizer(config, train_world)
    manifest = build_set_manifest(
        world.image_ids,
        world.identity_ids,
        world.qualities,
        sets_per_identity=config["fusion.sets_per_identity"],
        size_range=(config["fusion.min_size"], config["fusion.max_size"]),
        low_quality_fraction=config["fusion.low_quality_fraction"],
        low_quality_threshold=config["fusion.low_quality_threshold"],
        rng=derive_rng(config.seed, "fusion-sets"),
    )
    if not manifest:
        raise ConfigError("fusion world yields no sets; raise fusion.images_per_identity")
    manifest_path = out / "sets.csv"
    write_manifest_csv(manifest_path, manifest)
    features = recognizer.transform(world.embeddings)
    confidences = {
        "learned": model.forward(world.embeddings),
        "oracle": world.oracle_confidences(),
    }
    n_imp = config["fusion.n_impostor"] or None
    manifest = read_manifest_csv(manifest_path)
    sets = materialize_sets(manifest, world.image_ids, features, confidences["learned"])
    pairs = set_pairs(sets, n_impostor=n_imp, rng=derive_rng(config.seed, "fusion-pairs"))

    fars = list(config["eval.far_targets"])
    results = {}
    artifacts = [manifest_path]
    for label, weighting, conf in (
        ("uniform", "uniform", confidences["learned"]),
        ("confidence", "confidence", confidences["learned"]),
        ("oracle", "confidence", confidences["oracle"]),
    ):
        labelled = materialize_sets(manifest, world.image_ids, features, conf)
        roc, _ = set_verification(labelled, pairs, weighting, far_targets=fars)
        results[label] = roc
        if label != "oracle":
            fuser = SetFuser(weighting)
            descriptors = fuser.transform(labelled)
            sums = [len(fs) if weighting == "uniform" else fuse(fs).weight_sum for fs in labelled]
            path = out / f"fused_{label}.pceb"
            write_descriptor_store(path, labelled, descriptors, sums)
            artifacts.append(path)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["weighting", "far_target", "threshold", "achieved_far", "tar"])
    for label, roc in results.items():
        for p in roc.points:
            writer.writerow([label, repr(p.far_target), repr(p.threshold), repr(p.achieved_far), repr(p.tar)])
    roc_path = out / "fusion_roc.csv"
    roc_path.write_text(buf.getvalue())
    bundle_path = out / "fusion.json"
    write_json(
        bundle_path,
        {"n_sets": len(sets), "roc": {label: roc.to_dict() for label, roc in results.items()}},
    )
    artifacts += [roc_path, bundle_path]
    _write_manifest(out, "eval-fusion", config, artifacts)


def cmd_rank(config, out, threads=1):
    model = _load_model(out)
    world = _load_world(out, config, "eval")
    export = rank_by_confidence(
        world.image_ids,
        model.forward(world.embeddings),
        boundaries=tuple(config["rank.boundaries"]),
        samples_per_bucket=config["rank.samples_per_bucket"],
        rng=derive_rng(config.seed, "rank"),
    )
    csv_path, json_path = out / "ranked.csv", out / "rank.json"
    write_ranked_csv(
        csv_path,
        export,
        dict(zip(world.image_ids.tolist(), world.identity_ids.tolist())),
        dict(zip(world.image_ids.tolist(), world.qualities.tolist())),
    )
    write_json(json_path, {"boundaries": list(export.boundaries), "samples": export.samples})
    _write_manifest(out, "rank", config, [csv_path, json_path])


def _tar_lookup(curve_dict):
    table = {}
    for point in curve_dict["points"]:
        if point["roc"] is None:
            continue
        for op in point["roc"]["points"]:
            table[(round(point["r"], 10), op["far_target"])] = op["tar"]
    return table


def cmd_report(config, out, threads=1):
    """Text tables and plot-ready CSVs from completed evaluation artifacts."""
    cov_path = out / "covariate.json"
    _require(cov_path)
    covariate = json.loads(cov_path.read_text())
    fusion_path = out / "fusion.json"
    fusion = json.loads(fusion_path.read_text()) if fusion_path.is_file() else None

    learned = _tar_lookup(covariate["curves"]["learned"])
    oracle = _tar_lookup(covariate["curves"]["oracle"])
    fars = covariate["curves"]["learned"]["far_targets"]
    report_r = [round(r, 10) for r in config["eval.report_r"]]

    def fmt(v):
        return "   n/a" if v is None else f"{v:6.4f}"

    lines = ["Covariate verification with rejection", ""]
    table_rows = []
    for far in fars:
        lines.append(f"TAR@FAR={far:.0E}")
        lines.append("     r  learned  oracle")
        for r in report_r:
            tl, to = learned.get((r, far)), oracle.get((r, far))
            lines.append(f"  {r:4.2f}   {fmt(tl)}  {fmt(to)}")
            table_rows.append([repr(far), repr(r), repr(tl), repr(to)])
        lines.append("")
    corr = covariate["correlation"]
    lines.append(
        f"Confidence/similarity bins: {corr['occupied']} occupied, "
        f"{corr['decreases']} decreases over {corr['n_mated']} mated pairs"
    )
    lines.append(f"Spearman(confidence, quality): {covariate['spearman_confidence_quality']:.4f}")
    lines.append("")

    fusion_rows = []
    if fusion is not None:
        lines.append("Set-based verification")
        lines.append("  weighting   " + "  ".join(f"{f:.0E}" for f in fars))
        for label, roc in fusion["roc"].items():
            tars = {p["far_target"]: p["tar"] for p in roc["points"]}
            lines.append(f"  {label:<10}  " + "  ".join(f"{tars[f]:.4f}" for f in fars))
            fusion_rows += [[label, repr(f), repr(tars[f])] for f in fars]
        lines.append("")

    report_path = out / "report.txt"
    report_path.write_text("\n".join(lines))

    def write_rows(path, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        path.write_text(buf.getvalue())

    table_path = out / "table_covariate.csv"
    write_rows(table_path, ["far_target", "r", "tar_learned", "tar_oracle"], table_rows)
    plot_path = out / "plot_error_reject.csv"
    write_rows(
        plot_path,
        ["r", "far_target", "tar_learned", "tar_oracle"],
        [[repr(r), repr(f), repr(learned.get((r, f))), repr(oracle.get((r, f)))] for (r, f) in sorted(learned)],
    )
    corr_plot = out / "plot_correlation.csv"
    edges = corr["edges"]
    write_rows(
        corr_plot,
        ["conf_center", "count", "mean_similarity"],
        [
            [repr((edges[i] + edges[i + 1]) / 2), c, repr(m)]
            for i, (c, m) in enumerate(zip(corr["counts"], corr["mean_similarity"]))
            if c
        ],
    )
    artifacts = [report_path, table_path, plot_path, corr_plot]
    if fusion is not None:
        fusion_plot = out / "plot_fusion.csv"
        write_rows(fusion_plot, ["weighting", "far_target", "tar"], fusion_rows)
        artifacts.append(fusion_plot)
    _write_manifest(out, "report", config, artifacts)
    print("\n".join(lines))


COMMANDS = {
    "simulate": cmd_simulate,
    "pairscore": cmd_pairscore,
    "train": cmd_train,
    "eval-covariate": cmd_eval_covariate,
    "eval-fusion": cmd_eval_fusion,
    "rank": cmd_rank,
    "report": cmd_report,
}


PIPELINE = tuple(COMMANDS)


def cmd_pipeline(config, out, threads=1):
    for name in PIPELINE:
        log.info("running %s", name)
        COMMANDS[name](config, out, threads)


COMMANDS["pipeline"] = cmd_pipeline


def build_parser():
    parser = argparse.ArgumentParser(prog="pcconf", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="flat section.key = value config file")
    parser.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    parser.add_argument("--threads", type=int, help="parallelism bound; never changes outputs")
    parser.add_argument("--out", type=Path, help="output directory (fallback: run.out, then $PCCONF_OUT)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def _fail(command, kind, code, message):
    message = " ".join(str(message).split())
    print(f"pcconf: error={kind} command={command} exit={code} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"run.seed = {args.seed}")
        if args.threads is not None:
            overrides.append(f"run.threads = {args.threads}")
        config = RunConfig.load(args.config, overrides)
        out = args.out or (Path(config["run.out"]) if config["run.out"] else None)
        if out is None and os.environ.get("PCCONF_OUT"):
            out = Path(os.environ["PCCONF_OUT"])
        if out is None:
            raise ConfigError("no output directory: pass --out, set run.out or PCCONF_OUT")
        if args.command == "report":
            if not out.is_dir():
                raise MissingArtifact(str(out))
        else:
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](config, out, config["run.threads"])
    except ConfigError as exc:
        return _fail(args.command, "bad_config", EXIT_CONFIG, exc)
    except MissingArtifact as exc:
        return _fail(args.command, "missing_artifact", EXIT_MISSING, f"required artifact not found: {exc}")
    except NumericalError as exc:
        return _fail(args.command, "numerical_failure", EXIT_NUMERICAL, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Every subcommand reads and writes plain files, so a ``pipeline`` run can be
replayed stage by stage. Training seeds are derived from ``--seed`` with the
same per-stage split the pipeline uses, which makes the replay byte-exact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classifier, discriminator, labeler, metrics, nn, plots, updater
from .errors import OwtcError, ValidationError
from .packets import (UNLABELED, default_profiles, ingest_pcap, load_profiles, packets_to_dataset, read_dataset,
                      synth_generate, write_dataset)
from .scenario import (FULL_PORTIONS, ScenarioConfig, cluster_truth_map, run_scenario, stage_learning_rate,
                       stage_seed)

log = logging.getLogger("owtc")

DEFAULTS = ScenarioConfig()


def _out(args, path) -> Path:
    """Relative output paths land under --out-dir."""
    p = Path(path)
    p = p if p.is_absolute() else Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _out_dir(args, path) -> Path:
    p = Path(path)
    p = p if p.is_absolute() else Path(args.out_dir) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except ValueError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for k in sorted(obj, key=str):
        v = obj[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.extend(_flatten(v, key + "."))
        elif isinstance(v, list) and len(v) > 12:
            rows.append((key, f"[{len(v)} items]"))
        else:
            rows.append((key, v))
    return rows


def _text(obj: dict) -> str:
    rows = _flatten(obj)
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k + ':':<{width + 1}} {v}" for k, v in rows)


def emit(args, obj: dict, text: str | None = None) -> None:
    if args.format == "json":
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        print(text if text is not None else _text(obj))


def _cfg(args, stage: str, epochs: int, arch: str = "mlp", lr: float | None = None) -> nn.TrainConfig:
    return nn.TrainConfig(stage_learning_rate(arch, stage, lr), epochs, args.batch_size, stage_seed(args.seed, stage))


def _epsilon(value: str):
    if value == "auto":
        return value
    try:
        eps = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("epsilon must be 'auto' or a number in (0, 1]") from None
    if not 0.0 < eps <= 1.0:
        raise argparse.ArgumentTypeError("epsilon must lie in (0, 1]")
    return eps


def _int_list(value: str) -> list:
    return [int(v) for v in value.split(",") if v.strip()] if value else []


# --- subcommands


def cmd_synth(args) -> dict:
    profiles = load_profiles(args.profiles) if args.profiles else default_profiles(args.classes)
    ds = synth_generate(profiles, args.count, args.seed)
    path = _out(args, args.out)
    write_dataset(ds, path)
    return {"out": str(path), "packets": len(ds), "classes": ds.class_names}


def cmd_ingest(args) -> dict:
    packets = []
    for pcap in args.pcap:
        packets.extend(ingest_pcap(pcap))
    ds, skipped = packets_to_dataset(packets, args.label, args.name)
    path = _out(args, args.out)
    write_dataset(ds, path)
    return {"out": str(path), "packets": len(ds), "skipped_empty_payload": skipped, "label": args.label}


def cmd_train(args) -> dict:
    ds = read_dataset(args.data)
    spec = classifier.ArchitectureSpec(args.arch)
    model = classifier.train_classifier(spec, ds, _cfg(args, "train", args.epochs, args.arch, args.lr),
                                        validation_fraction=args.validation_fraction)
    path = _out(args, args.out)
    nn.save_model(model, path)
    return {"out": str(path), "arch": args.arch, "classes": model.class_count, "packets": len(ds),
            "validation_accuracy": model.metadata.get("validation_accuracy"),
            "parameters": model.parameter_count}


def cmd_classify(args) -> dict:
    model = nn.load_model(args.model)
    ds = read_dataset(args.data)
    probs, _ = classifier.classify_batch(model, ds.vectors())
    pred = probs.argmax(axis=1)
    s_star = probs.max(axis=1)
    path = _out(args, args.scores_out)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "predicted_label", "s_star", "truth_label"])
        for i, (p, s, t) in enumerate(zip(pred, s_star, ds.labels)):
            w.writerow([i, int(p), repr(float(s)), "" if t == UNLABELED else int(t)])
    labeled = ds.labeled_mask
    out = {"out": str(path), "packets": len(ds), "mean_s_star": float(s_star.mean()) if len(ds) else None}
    if labeled.any():
        out["accuracy_on_labeled"] = float(np.mean(pred[labeled] == ds.labels[labeled]))
    return out


def cmd_discriminate(args) -> dict:
    model = nn.load_model(args.model)
    known = read_dataset(args.known)
    traffic = read_dataset(args.traffic)
    if args.validation:
        val = read_dataset(args.validation)
        probs, _ = classifier.classify_batch(model, val.vectors())
        known_scores = probs.max(axis=1)
        measured = float(np.mean(probs.argmax(axis=1) == val.labels))
    else:
        known_scores = None
        measured = model.metadata.get("validation_accuracy")
    if args.epsilon == "auto":
        if measured is None:
            raise ValidationError("epsilon=auto needs --validation or a model with recorded validation accuracy")
        epsilon = measured
    else:
        epsilon = args.epsilon
    vectors = traffic.vectors()
    result = discriminator.discriminate(vectors, known.vectors(), model, epsilon,
                                        _cfg(args, "discriminator", args.epochs), known_scores=known_scores)
    out_dir = _out_dir(args, args.out)
    p_n = result.unknown
    _write_json(out_dir / "unknown_indices.json", {
        "prefiltered": result.left.tolist(), "remainder": result.remainder.tolist(), "swept": result.right.tolist(),
        "discovered": p_n.tolist(), "theta": result.threshold.theta, "epsilon": epsilon})
    if result.discriminator is not None:
        nn.save_model(result.discriminator, out_dir / "discriminator.ownn")
    report = result.summary()
    if traffic.labeled_mask.all() and len(traffic):
        is_unknown = traffic.labels >= model.class_count
        n_unknown = int(is_unknown.sum())
        report["truth_unknown"] = n_unknown
        report["purity_discovered"] = float(is_unknown[p_n].mean()) if len(p_n) else None
        report["recall_discovered"] = float(is_unknown[p_n].sum() / n_unknown) if n_unknown else None
    _write_json(out_dir / "discrimination.json", report)
    return report


def _traffic_subset(traffic, indices_file) -> tuple[np.ndarray, object]:
    p_n = np.asarray(_read_json(indices_file)["discovered"], dtype=np.int64)
    if len(p_n) and (p_n.min() < 0 or p_n.max() >= len(traffic)):
        raise ValidationError("unknown-packet indices fall outside the traffic dataset")
    return p_n, traffic.subset(p_n)


def cmd_cluster(args) -> dict:
    model = nn.load_model(args.model)
    traffic = read_dataset(args.traffic)
    p_n, found = _traffic_subset(traffic, args.unknown)
    out_dir = _out_dir(args, args.out)
    if len(p_n) < 2:
        report = {"chosen_k": 0, "note": "fewer than two discovered packets; nothing to cluster"}
        _write_json(out_dir / "cluster_report.json", report)
        return report
    lab = labeler.label_packets(model, found.vectors(), args.kmax, args.variance,
                                stage_seed(args.seed, "cluster"), packet_index=p_n)
    _write_json(out_dir / "labels.json", {"discovered": p_n.tolist(), "labels": lab.labels.tolist(), "k": lab.clustering.k})
    report = lab.report()
    if found.labeled_mask.all():
        report["quality"] = metrics.clustering_scores(found.labels, lab.labels)
        report["cluster_to_truth"] = {str(k): v for k, v in cluster_truth_map(found.labels, lab.labels).items()}
    _write_json(out_dir / "cluster_report.json", report)
    return report


def cmd_update(args) -> dict:
    model = nn.load_model(args.model)
    known = read_dataset(args.known)
    traffic = read_dataset(args.traffic)
    labels_doc = _read_json(args.unknown)
    p_n = np.asarray(labels_doc["discovered"], dtype=np.int64)
    found = traffic.subset(p_n)
    merged = updater.merge_dataset(known, found, labels_doc["labels"])
    data_path = _out(args, args.out_data)
    write_dataset(merged, data_path)
    k = int(labels_doc.get("k", int(np.max(labels_doc["labels"])) + 1))
    spec = classifier.spec_of(model)
    plan = updater.make_plan(model.class_count, k, _cfg(args, "update", args.epochs, spec.kind), args.lr_scale,
                             balance=not args.no_balance)
    updated = updater.transfer_update(model, merged, plan)
    model_path = _out(args, args.out_model)
    nn.save_model(updated, model_path)
    report = {"out_model": str(model_path), "out_data": str(data_path), "known_classes": plan.known_classes,
              "total_classes": plan.total_classes, "fine_tune_lr": plan.cfg.learning_rate, "epochs": plan.cfg.epochs,
              "class_balanced": plan.balance, "merged_packets": len(merged)}
    if args.baseline_retrain:
        base = updater.retrain_from_scratch(spec, merged, _cfg(args, "baseline", args.baseline_epochs, spec.kind))
        base_path = (_out(args, args.baseline_out) if args.baseline_out
                     else model_path.with_name(model_path.stem + "_retrain" + model_path.suffix))
        nn.save_model(base, base_path)
        report["baseline_model"] = str(base_path)
    return report


def cmd_evaluate(args):
    model = nn.load_model(args.model)
    ds = read_dataset(args.data)
    cm = metrics.confusion(model, ds)
    if args.csv_out:
        _out(args, args.csv_out).write_text(cm.to_csv())
    return cm.to_dict(), cm.render()


def cmd_bench(args) -> dict:
    model = nn.load_model(args.model)
    ds = read_dataset(args.data)
    return metrics.throughput_bench(model, ds.vectors(), warmup=args.warmup, rounds=args.rounds,
                                    per_round=args.per_round, seed=stage_seed(args.seed, "bench"))


def cmd_pipeline(args) -> dict:
    kw = {"existing": args.existing, "unknown": args.unknown, "seed": args.seed, "arch": args.arch,
          "epsilon": args.epsilon, "baseline_retrain": not args.no_baseline, "bench_rounds": args.rounds,
          "bench_per_round": args.per_round}
    if args.profiles:
        kw["profiles"] = load_profiles(args.profiles)
    if args.full_scale:
        kw["portions"] = dict(FULL_PORTIONS)
    cfg = ScenarioConfig(**kw)
    report = run_scenario(cfg, args.out_dir, bench=not args.no_bench)
    summary = {"out_dir": str(args.out_dir), "epsilon": report["classifier"]["epsilon"],
               "theta": report["discrimination"]["theta"], "discovered": report["discrimination"]["discovered_used"],
               "purity_discovered": report["discrimination"].get("purity_discovered"),
               "recall_discovered": report["discrimination"].get("recall_discovered")}
    if report.get("clustering"):
        summary["chosen_k"] = report["clustering"]["chosen_k"]
        summary["rand_index"] = report["clustering"]["quality"]["rand_index"]
    if not report["update"].get("skipped"):
        summary.update({f"after_{k}": v for k, v in report["update"]["after"].items()})
        summary["old_class_drop"] = report["update"]["old_class_drop"]
    if "throughput" in report["timing"]:
        summary["packets_per_ms"] = report["timing"]["throughput"]["packets_per_ms"]
        summary["mbps"] = report["timing"]["throughput"]["mbps"]
    return summary


def cmd_plot(args) -> dict:
    source = Path(args.report)
    report_path = source / "report.json" if source.is_dir() else source
    report = _read_json(report_path)
    target = _out_dir(args, args.out) if args.out else report_path.parent
    return plots.emit_plots(report, report_path.parent, target)


# --- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for relative output paths")
    common.add_argument("--format", choices=["json", "text"], default="json")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="owtc", description="Open-world encrypted traffic classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic labeled dataset")
    p.add_argument("--profiles", help="JSON profile config (default: built-in profiles)")
    p.add_argument("--classes", type=int, default=6, help="number of built-in profiles when --profiles is absent")
    p.add_argument("--count", type=int, required=True, help="packets per class")
    p.add_argument("--out", required=True)

    p = add("ingest", cmd_ingest, "convert pcap captures into a dataset")
    p.add_argument("--pcap", required=True, nargs="+")
    p.add_argument("--label", type=int, default=UNLABELED)
    p.add_argument("--name", help="class name for --label")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a classifier")
    p.add_argument("--arch", choices=["mlp", "cnn1d"], default=DEFAULTS.arch)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=DEFAULTS.epochs)
    p.add_argument("--lr", type=float, help="learning rate (default: 0.01 for mlp, 0.002 for cnn1d)")
    p.add_argument("--batch-size", type=int, default=DEFAULTS.batch_size)
    p.add_argument("--validation-fraction", type=float, default=0.1)

    p = add("classify", cmd_classify, "score packets and write a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scores-out", required=True)

    p = add("discriminate", cmd_discriminate, "filter packets of unknown classes")
    p.add_argument("--model", required=True)
    p.add_argument("--known", required=True, help="the classifier's training dataset")
    p.add_argument("--traffic", required=True)
    p.add_argument("--validation", help="held-out known-class dataset for the threshold and epsilon")
    p.add_argument("--epsilon", type=_epsilon, default="auto")
    p.add_argument("--epochs", type=int, default=DEFAULTS.discriminator_epochs)
    p.add_argument("--batch-size", type=int, default=DEFAULTS.batch_size)
    p.add_argument("--out", required=True, help="output directory")

    p = add("cluster", cmd_cluster, "label discovered packets by clustering")
    p.add_argument("--model", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--unknown", required=True, help="unknown_indices.json from discriminate")
    p.add_argument("--kmax", type=int, default=DEFAULTS.k_max)
    p.add_argument("--variance", type=float, default=DEFAULTS.variance)
    p.add_argument("--out", required=True, help="output directory")

    p = add("update", cmd_update, "merge discovered classes and update the classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--known", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--unknown", required=True, help="labels.json from cluster")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--epochs", type=int, default=DEFAULTS.update_epochs)
    p.add_argument("--lr-scale", type=float, default=DEFAULTS.update_lr_scale)
    p.add_argument("--no-balance", action="store_true", help="fine-tune on the merged data as is")
    p.add_argument("--batch-size", type=int, default=DEFAULTS.batch_size)
    p.add_argument("--baseline-retrain", action="store_true", help="also train a fresh model for comparison")
    p.add_argument("--baseline-epochs", type=int, default=DEFAULTS.epochs)
    p.add_argument("--baseline-out", help="path for the fresh model (default: <out-model>_retrain.ownn)")

    p = add("evaluate", cmd_evaluate, "confusion matrix of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv-out")

    p = add("bench", cmd_bench, "throughput benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--per-round", type=int, default=500)
    p.add_argument("--warmup", type=int, default=2)

    p = add("pipeline", cmd_pipeline, "run a full open-world episode")
    p.add_argument("--arch", choices=["mlp", "cnn1d"], default=DEFAULTS.arch)
    p.add_argument("--existing", type=_int_list, default=DEFAULTS.existing, help="comma-separated class ids")
    p.add_argument("--unknown", type=_int_list, default=DEFAULTS.unknown, help="comma-separated class ids")
    p.add_argument("--profiles")
    p.add_argument("--epsilon", type=_epsilon, default="auto")
    p.add_argument("--full-scale", action="store_true", help="10x larger data portions")
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--no-bench", action="store_true")
    p.add_argument("--rounds", type=int, default=DEFAULTS.bench_rounds)
    p.add_argument("--per-round", type=int, default=DEFAULTS.bench_per_round)

    p = add("plot", cmd_plot, "render SVG figures for a pipeline run")
    p.add_argument("--report", required=True, help="report.json or the run directory")
    p.add_argument("--out", help="output directory (default: next to the report)")

    for action in sub.choices.values():
        if not any(a.dest == "batch_size" for a in action._actions):
            action.set_defaults(batch_size=DEFAULTS.batch_size)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except OwtcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    if isinstance(result, tuple):
        emit(args, *result)
    else:
        emit(args, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())

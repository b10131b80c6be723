"""End-to-end open-world episodes on synthetic (or ingested) traffic.

Seeds: every stage draws from ``SeedSequence([root_seed, stage_id])`` with the
stage ids in ``STAGES``; per-class data draws add the class position as a
third entry. Nothing else consumes randomness.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import classifier, discriminator, labeler, metrics, nn, updater
from .errors import ValidationError
from .packets import LabeledDataset, SynthAppProfile, default_profiles, write_dataset

log = logging.getLogger(__name__)

STAGES = {"data": 1, "train": 2, "discriminator": 3, "cluster": 4, "update": 5, "bench": 6,
          "subsample": 7, "baseline": 8}

DESK_PORTIONS = {"train": 250, "validation": 120, "traffic_a_existing": 50, "traffic_b_existing": 50, "traffic_a_unknown": 450,
                 "traffic_b_unknown": 450, "unknown_test": 120, "traffic_from_train": 50}
FULL_PORTIONS = {k: v * 10 for k, v in DESK_PORTIONS.items()}
ACCURACY_BAR = 0.85


def stage_seed(root: int, stage: str) -> int:
    return int(np.random.SeedSequence([root, STAGES[stage]]).generate_state(1)[0])


def stage_learning_rate(arch: str, stage: str, override: Optional[float] = None) -> float:
    """Base learning rate for a stage; the discriminator is always an MLP."""
    if override is not None:
        return float(override)
    return classifier.DEFAULT_LEARNING_RATE["mlp" if stage == "discriminator" else arch]


@dataclass
class ScenarioConfig:
    existing: list = field(default_factory=lambda: [0, 1, 2, 3])
    unknown: list = field(default_factory=lambda: [4, 5])
    profiles: Optional[list] = None  # SynthAppProfile list; defaults to default_profiles(6)
    portions: dict = field(default_factory=lambda: dict(DESK_PORTIONS))
    seed: int = 0
    arch: str = "mlp"
    epsilon: object = "auto"  # "auto" or a float in (0, 1]
    learning_rate: Optional[float] = None  # None: the architecture's default
    epochs: int = 10
    batch_size: int = 32
    discriminator_epochs: int = 10
    update_epochs: int = 10
    update_lr_scale: float = 0.3
    k_max: int = 10
    variance: float = 0.95
    baseline_retrain: bool = True
    bench_rounds: int = 50
    bench_per_round: int = 500

    def __post_init__(self):
        if set(self.existing) & set(self.unknown):
            raise ValidationError("existing and unknown class lists overlap")
        if len(self.existing) < 2:
            raise ValidationError("need at least two existing classes")
        if any(int(v) < 1 for v in self.portions.values()):
            raise ValidationError("portion sizes must be positive")
        if self.epsilon != "auto" and not (0 < float(self.epsilon) <= 1):
            raise ValidationError("epsilon must be 'auto' or lie in (0, 1]")

    @classmethod
    def full_scale(cls, **kw) -> "ScenarioConfig":
        return cls(portions=dict(FULL_PORTIONS), **kw)

    def resolved_profiles(self) -> list:
        if self.profiles is not None:
            return [p if isinstance(p, SynthAppProfile) else SynthAppProfile(**p) for p in self.profiles]
        return default_profiles(max(self.existing + self.unknown) + 1, seed=0)

    def stage_learning_rate(self, stage: str) -> float:
        return stage_learning_rate(self.arch, stage, self.learning_rate)

    def train_cfg(self, stage: str = "train", epochs: Optional[int] = None) -> nn.TrainConfig:
        return nn.TrainConfig(self.stage_learning_rate(stage), self.epochs if epochs is None else epochs,
                              self.batch_size, stage_seed(self.seed, stage))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = [p.to_dict() for p in self.resolved_profiles()]
        return d


@dataclass
class Portions:
    train: LabeledDataset  # the classifier's training set
    validation: LabeledDataset  # held-out known-class packets
    traffic: LabeledDataset  # both traffic draws plus a train subsample; unknown ids >= known_classes
    unknown_test: LabeledDataset  # held-out unknown-class packets
    traffic_train_index: np.ndarray  # rows of train reused in the traffic
    known_classes: int


def draw_portions(cfg: ScenarioConfig) -> Portions:
    """Generate per-class pools and cut them into disjoint portions."""
    profiles = cfg.resolved_profiles()
    por = cfg.portions
    known_classes = len(cfg.existing)
    data_root = stage_seed(cfg.seed, "data")
    names = {}
    train_parts, val_parts, traffic_a, traffic_b, test_parts = [], [], [], [], []
    for pos, cls in enumerate(cfg.existing + cfg.unknown):
        try:
            profile = profiles[cls]
        except (IndexError, TypeError):
            raise ValidationError(f"no profile for class {cls!r}") from None
        names[pos] = profile.app_id
        rng = np.random.default_rng([data_root, pos])
        if pos < known_classes:
            sizes = [por["train"], por["validation"], por["traffic_a_existing"], por["traffic_b_existing"]]
        else:
            sizes = [por["traffic_a_unknown"], por["traffic_b_unknown"], por["unknown_test"]]
        body, lengths = profile.sample_payloads(rng, sum(sizes))
        pool = LabeledDataset(body, np.full(len(body), pos), lengths)
        cuts = np.cumsum([0] + sizes)
        chunks = [pool.subset(np.arange(cuts[i], cuts[i + 1])) for i in range(len(sizes))]
        if pos < known_classes:
            train_parts.append(chunks[0]); val_parts.append(chunks[1])
            traffic_a.append(chunks[2]); traffic_b.append(chunks[3])
        else:
            traffic_a.append(chunks[0]); traffic_b.append(chunks[1]); test_parts.append(chunks[2])

    def named(parts, keys):
        d = LabeledDataset.concat(parts)
        d.class_names = {k: names[k] for k in keys}
        return d

    known_keys = range(known_classes)
    all_keys = range(len(names))
    train = named(train_parts, known_keys)
    rng = np.random.default_rng(stage_seed(cfg.seed, "subsample"))
    sub = []
    for c in range(known_classes):
        rows = np.flatnonzero(train.labels == c)
        sub.append(np.sort(rng.choice(rows, size=min(por["traffic_from_train"], len(rows)), replace=False)))
    sub_index = np.concatenate(sub)
    traffic = named(traffic_b + traffic_a + [train.subset(sub_index)], all_keys)
    unknown_test = named(test_parts, range(known_classes, len(names))) if test_parts else LabeledDataset(np.zeros((0, 1456)), [])
    return Portions(train, named(val_parts, known_keys), traffic, unknown_test, sub_index, known_classes)


def cluster_truth_map(truth: np.ndarray, clusters: np.ndarray) -> dict:
    """Map each discovered cluster to the majority ground-truth class of its members."""
    out = {}
    for c in np.unique(clusters):
        ids, counts = np.unique(truth[clusters == c], return_counts=True)
        out[int(c)] = int(ids[np.argmax(counts)])
    return out


def updated_accuracy(model: nn.NeuralModel, validation: LabeledDataset, unknown_test: LabeledDataset,
                     known_classes: int, discovered_to_truth: dict) -> dict:
    """Old-class, new-class and overall accuracy of an updated classifier.

    A prediction of discovered class ``known_classes + c`` counts as correct for a
    packet whose true class is ``discovered_to_truth[c]``.
    """
    lookup = np.full(model.class_count, -1, dtype=np.int64)
    lookup[:known_classes] = np.arange(known_classes)
    for c, truth in discovered_to_truth.items():
        if known_classes + c < model.class_count:
            lookup[known_classes + c] = truth
    old_pred = classifier.classify_batch(model, validation.vectors())[0].argmax(axis=1)
    old_ok = lookup[old_pred] == validation.labels
    if len(unknown_test):
        new_pred = classifier.classify_batch(model, unknown_test.vectors())[0].argmax(axis=1)
        new_ok = lookup[new_pred] == unknown_test.labels
    else:
        new_ok = np.zeros(0, dtype=bool)
    every = np.concatenate([old_ok, new_ok])
    return {"old_class_accuracy": float(old_ok.mean()),
            "new_class_accuracy": float(new_ok.mean()) if new_ok.size else None,
            "overall_accuracy": float(every.mean())}


def epochs_to_bar(history: list, bar: float = ACCURACY_BAR) -> Optional[int]:
    for epoch, acc in history:
        if acc >= bar:
            return epoch
    return None


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_scenario(cfg: ScenarioConfig, out_dir, bench: bool = True) -> dict:
    """Run one full episode, persisting every intermediate artifact under ``out_dir``.

    Returns the report dict (also written to ``report.json``). Wall-clock
    quantities live under the ``timing`` key only.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    timing = {}
    spec = classifier.ArchitectureSpec(cfg.arch)
    report = {"config": cfg.to_dict(), "seed_stages": {k: stage_seed(cfg.seed, k) for k in STAGES},
              "learning_rates": {k: cfg.stage_learning_rate(k) for k in ("train", "discriminator", "baseline")}}

    por = draw_portions(cfg)
    known_classes = por.known_classes
    files = {"train": "train.owtc", "validation": "validation.owtc", "traffic": "traffic.owtc", "unknown_test": "unknown_test.owtc"}
    for key, name in files.items():
        write_dataset(getattr(por, key), out / name)
    _dump(out / "traffic_train_subsample.json", por.traffic_train_index.tolist())

    # --- current classifier
    t0 = time.perf_counter()
    current = classifier.train_classifier(spec, por.train, cfg.train_cfg())
    timing["train_seconds"] = time.perf_counter() - t0
    nn.save_model(current, out / "classifier.ownn")
    files["classifier"] = "classifier.ownn"

    val_vectors = por.validation.vectors()
    val_probs, _ = classifier.classify_batch(current, val_vectors)
    known_scores = val_probs.max(axis=1)
    measured = float(np.mean(val_probs.argmax(axis=1) == por.validation.labels))
    epsilon = measured if cfg.epsilon == "auto" else float(cfg.epsilon)
    traffic_vectors = por.traffic.vectors()
    traffic_truth = por.traffic.labels
    is_unknown = traffic_truth >= known_classes
    traffic_scores = classifier.score_set(current, traffic_vectors)
    report["classifier"] = {
        "validation_accuracy": measured,
        "internal_validation_accuracy": current.metadata.get("validation_accuracy"),
        "epsilon": epsilon,
        "mean_score_known": float(known_scores.mean()),
        "mean_score_unknown": float(traffic_scores[is_unknown].mean()) if is_unknown.any() else None,
        "score_quantiles_known": np.quantile(known_scores, [0.05, 0.1, 0.25, 0.5]).tolist(),
        "score_quantiles_unknown": (np.quantile(traffic_scores[is_unknown], [0.05, 0.1, 0.25, 0.5]).tolist()
                                    if is_unknown.any() else None),
    }
    _dump(out / "scores.json", {"known": known_scores.tolist(), "unknown": traffic_scores[is_unknown].tolist(),
                                "traffic": traffic_scores.tolist()})

    # --- discrimination
    t0 = time.perf_counter()
    disc_cfg = cfg.train_cfg("discriminator", cfg.discriminator_epochs)
    result = discriminator.discriminate(traffic_vectors, por.train.vectors(), current, epsilon, disc_cfg,
                                        known_scores=known_scores)
    timing["discriminate_seconds"] = time.perf_counter() - t0
    result.check(len(traffic_vectors))
    p_n = result.unknown
    disc_report = result.summary()
    disc_report.update(_filter_quality(result, is_unknown))
    if result.discriminator is not None:
        nn.save_model(result.discriminator, out / "discriminator.ownn")
        files["discriminator"] = "discriminator.ownn"
    _dump(out / "unknown_indices.json", {"prefiltered": result.left.tolist(), "remainder": result.remainder.tolist(),
                                         "swept": result.right.tolist(), "discovered": p_n.tolist(),
                                         "theta": result.threshold.theta, "epsilon": epsilon})
    report["discrimination"] = disc_report

    if not cfg.unknown:
        # nothing to discover by construction: the filter output is pure false positives
        report["discrimination"]["null_scenario_false_positive_rate"] = len(p_n) / len(traffic_vectors)
        p_n = np.zeros(0, dtype=np.int64)
    report["discrimination"]["discovered_used"] = int(len(p_n))

    # --- labeling and update
    if len(p_n) >= 2:
        t0 = time.perf_counter()
        lab = labeler.label_packets(current, traffic_vectors[p_n], cfg.k_max, cfg.variance,
                                    stage_seed(cfg.seed, "cluster"), packet_index=p_n)
        timing["cluster_seconds"] = time.perf_counter() - t0
        labels = lab.labels
        truth = traffic_truth[p_n]
        mapping = cluster_truth_map(truth, labels)
        cluster_report = lab.report()
        cluster_report.update({"quality": metrics.clustering_scores(truth, labels),
                               "cluster_to_truth": {str(k): v for k, v in mapping.items()}})
        report["clustering"] = cluster_report
        _dump(out / "labels.json", {"discovered": p_n.tolist(), "labels": labels.tolist(), "k": lab.clustering.k})

        merged = updater.merge_dataset(por.train, por.traffic.subset(p_n), labels)
        write_dataset(merged, out / "merged_train.owtc")
        files["merged_train"] = "merged_train.owtc"
        plan = updater.make_plan(known_classes, lab.clustering.k, cfg.train_cfg("update", cfg.update_epochs),
                                 cfg.update_lr_scale)
        history = []

        def track(epoch, snap):
            history.append((epoch, updated_accuracy(snap, por.validation, por.unknown_test, known_classes, mapping)))

        t0 = time.perf_counter()
        updated = updater.transfer_update(current, merged, plan, on_epoch_end=track)
        timing["update_seconds"] = time.perf_counter() - t0
        nn.save_model(updated, out / "classifier_updated.ownn")
        files["updated"] = "classifier_updated.ownn"
        after = updated_accuracy(updated, por.validation, por.unknown_test, known_classes, mapping)
        update_report = {
            "known_classes": known_classes, "total_classes": plan.total_classes, "fine_tune_lr": plan.cfg.learning_rate, "class_balanced": plan.balance,
            "epochs": plan.cfg.epochs, "before": {"old_class_accuracy": measured},
            "after": after, "old_class_drop": measured - after["old_class_accuracy"],
            "per_epoch": [{"epoch": e, **a} for e, a in history],
            "epochs_to_bar": epochs_to_bar([(e, a["overall_accuracy"]) for e, a in history]),
        }
        if cfg.baseline_retrain:
            base_hist = []

            def track_base(epoch, snap):
                base_hist.append((epoch, updated_accuracy(snap, por.validation, por.unknown_test, known_classes, mapping)))

            t0 = time.perf_counter()
            base = updater.retrain_from_scratch(spec, merged, cfg.train_cfg("baseline"), on_epoch_end=track_base)
            timing["baseline_seconds"] = time.perf_counter() - t0
            nn.save_model(base, out / "classifier_retrained.ownn")
            files["retrained"] = "classifier_retrained.ownn"
            update_report["baseline_retrain"] = {
                "epochs": cfg.epochs, "after": base_hist[-1][1] if base_hist else None,
                "per_epoch": [{"epoch": e, **a} for e, a in base_hist],
                "epochs_to_bar": epochs_to_bar([(e, a["overall_accuracy"]) for e, a in base_hist]),
            }
        report["update"] = update_report
        report["confusion"] = _confusions(current, updated, por, mapping)
    else:
        report["clustering"] = None
        report["update"] = {"skipped": True, "reason": "no discovered packets"}
        report["confusion"] = {"before": metrics.confusion(current, por.validation).to_dict()}

    if bench:
        t0 = time.perf_counter()
        model = nn.load_model(out / files.get("updated", "classifier"))
        bench_vectors = np.concatenate([val_vectors, por.unknown_test.vectors()]) if len(por.unknown_test) else val_vectors
        timing["throughput"] = metrics.throughput_bench(model, bench_vectors, rounds=cfg.bench_rounds,
                                                        per_round=cfg.bench_per_round,
                                                        seed=stage_seed(cfg.seed, "bench"))
        timing["bench_seconds"] = time.perf_counter() - t0
    timing["total_seconds"] = time.perf_counter() - t_start
    report["artifacts"] = {k: {"file": v, "sha256": digest(out / v)} for k, v in sorted(files.items())}
    report["timing"] = timing
    _dump(out / "report.json", report)
    return report


def _filter_quality(result: discriminator.DiscriminationResult, is_unknown: np.ndarray) -> dict:
    p_n = result.unknown
    n_unknown = int(is_unknown.sum())
    out = {"truth_unknown": n_unknown}
    out["purity_prefiltered"] = float(is_unknown[result.left].mean()) if len(result.left) else None
    out["purity_discovered"] = float(is_unknown[p_n].mean()) if len(p_n) else None
    out["recall_discovered"] = float(is_unknown[p_n].sum() / n_unknown) if n_unknown else None
    out["recall_prefiltered"] = float(is_unknown[result.left].sum() / n_unknown) if n_unknown else None
    return out


def _confusions(current, updated, por: Portions, mapping: dict) -> dict:
    known_classes = por.known_classes
    before = metrics.confusion(current, por.validation)
    # express the test truth in the updated label space; unknown classes with no cluster are dropped
    truth_to_cluster = {}
    for c, t in sorted(mapping.items()):
        truth_to_cluster.setdefault(t, c)
    test = LabeledDataset.concat([por.validation, por.unknown_test])
    keep = np.array([lab < known_classes or int(lab) in truth_to_cluster for lab in test.labels], dtype=bool)
    relabeled = np.array([lab if lab < known_classes else known_classes + truth_to_cluster.get(int(lab), 0) for lab in test.labels])
    test = test.subset(np.flatnonzero(keep)).relabel(relabeled[keep])
    after = metrics.confusion(updated, test)
    return {"before": before.to_dict(), "after": after.to_dict(),
            "after_dropped_unmapped": int((~keep).sum())}


def report_numerics(report: dict) -> dict:
    """The report without wall-clock fields, for reproducibility comparisons."""
    return {k: v for k, v in report.items() if k != "timing"}

"""End-to-end runs: data -> split -> frozen pools -> models -> calibration -> reports.

Every model in a run is scored on the same reloaded, checksum-verified
pools, so their reports are directly comparable. Report files contain no
timestamps or absolute paths; identical configs give byte-identical output.
"""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.pipeline import Pipeline

from . import metrics as M
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .exceptions import ChecksumError, ConfigError, DdiError
from .features import EmbeddingTable, PairFeaturizer, concat_tables, load_embedding_table
from .graph import (SplitPlan, TripleSet, edge_holdout_split, load_triples, merge_inverse,
                    node_holdout_split, save_split, verify_no_leakage)
from .negatives import NegativePool, PoolRole, build_pool, candidate_set, freeze_pool, load_pool
from .student import NO_INTERACTION, UNLABELED, DistilledStudent, RelationMLP, distill
from .synth import generate
from .teacher import DistMultKG, FusionTeacher
from .two_head import LogitBinaryHead, calibrate_threshold, detection_score

logger = logging.getLogger(__name__)

_ROLE_OFFSET = {PoolRole.TRAIN: 1, PoolRole.VALID: 2, PoolRole.TEST: 3}


class StageError(DdiError):
    """A pipeline stage failed with a non-domain exception."""


def pool_seed(seed: int, role) -> int:
    return 1000 * seed + _ROLE_OFFSET[PoolRole(role)]


@contextlib.contextmanager
def _stage(name: str, seed, *artifacts):
    try:
        yield
    except DdiError as exc:
        exc.stage = name
        exc.artifacts = [str(a) for a in artifacts]
        logger.error("stage %s (seed %s) failed: %s", name, seed, exc)
        raise
    except Exception as exc:
        paths = ", ".join(str(a) for a in artifacts) or "none"
        raise StageError(f"stage {name!r} (seed {seed}) failed: {exc}; artifacts: {paths}") from exc


@dataclass
class Dataset:
    kg: TripleSet
    features: EmbeddingTable
    kg_embeddings: EmbeddingTable | None = None
    alt_features: EmbeddingTable | None = None


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synthetic:
        w = generate(cfg.world.spec())
        return Dataset(w.kg, w.features, w.kg_embeddings, w.alt_features)
    d = cfg.data
    kg = load_triples(d.triples, vocab_path=d.vocabulary or None)
    feats = load_embedding_table(d.features)
    kge = load_embedding_table(d.kg_embeddings) if d.kg_embeddings else None
    alt = load_embedding_table(d.alt_features) if d.alt_features else None
    return Dataset(kg, feats, kge, alt)


def make_split(kg: TripleSet, cfg: ExperimentConfig, seed: int) -> SplitPlan:
    if cfg.split.merge_inverse:
        kg = merge_inverse(kg)
    fn = node_holdout_split if cfg.split.regime == "node" else edge_holdout_split
    return fn(kg, cfg.split.train_frac, cfg.split.test_frac, seed)


def build_and_freeze_pools(plan: SplitPlan, cfg: ExperimentConfig, seed: int, directory) -> dict:
    """Sample, write and reload all three pools; only the reloaded copies are returned."""
    k = {PoolRole.TRAIN: cfg.negatives.k_train, PoolRole.VALID: cfg.negatives.k_valid,
         PoolRole.TEST: cfg.negatives.k_test}
    positives = {PoolRole.TRAIN: plan.train_edges, PoolRole.VALID: plan.valid_edges,
                 PoolRole.TEST: plan.test_edges}
    manifests = {}
    for role in PoolRole:
        pool = build_pool(plan, positives[role], k[role], role, pool_seed(seed, role))
        manifests[role] = freeze_pool(pool, directory, role.value)
    return manifests


def _mlp(cfg: ExperimentConfig, R: int, seed: int) -> RelationMLP:
    s = cfg.student
    return RelationMLP(n_relations=R, hidden=s.hidden, lr=s.lr, weight_decay=s.weight_decay,
                       batch_size=s.batch_size, epochs=s.epochs, optimizer=s.optimizer, seed=seed)


def fit_feature_mlp(table, plan, train_pool, cfg, seed) -> Pipeline:
    """Feature-only baseline on the student's training pairs, without a teacher."""
    s = cfg.student
    code = NO_INTERACTION if s.negative_label == "zeros" else UNLABELED
    X = np.concatenate([plan.train_edges.pairs, train_pool.pairs])
    y = np.concatenate([plan.train_edges.relations, np.full(len(train_pool), code)])
    pipe = Pipeline([("features", PairFeaturizer(table, mode=s.pair_mode, normalize=s.normalize)),
                     ("mlp", _mlp(cfg, plan.num_relations, seed))])
    return pipe.fit(X, y)


def train_models(cfg: ExperimentConfig, data: Dataset, plan: SplitPlan, train_pool: NegativePool,
                 seed: int) -> dict:
    t, s = cfg.teacher, cfg.student
    N, R = plan.num_drugs, plan.num_relations
    wanted = cfg.eval.models
    models = {}
    if "teacher" in wanted:
        init = None
        if t.entity_init:
            # only training drugs may carry pretrained KG vectors
            keep = np.isin(data.kg_embeddings.drugs, plan.train_nodes)
            init = EmbeddingTable(data.kg_embeddings.drugs[keep], data.kg_embeddings.matrix[keep])
        models["teacher"] = FusionTeacher(
            features=data.features, n_relations=R, n_drugs=N, dim=t.dim,
            gate_hidden=t.gate_hidden or None, lr=t.lr, epochs=t.epochs, batch_size=t.batch_size,
            optimizer=t.optimizer, normalize_features=t.normalize_features, entity_init=init,
            freeze_entities=t.freeze_entities, seed=seed).fit(plan.train_edges.pairs, plan.train_edges.relations)
    if "student" in wanted:
        models["student"] = distill(
            models["teacher"], plan, data.features, negatives=train_pool.pairs,
            negative_label=s.negative_label, mode=s.pair_mode, normalize=s.normalize,
            n_relations=R, hidden=s.hidden, lr=s.lr, weight_decay=s.weight_decay,
            batch_size=s.batch_size, epochs=s.epochs, optimizer=s.optimizer, alpha=s.alpha,
            tau=s.tau, kd_mode=s.kd_mode, seed=seed)
    if "feature_mlp" in wanted:
        models["feature_mlp"] = fit_feature_mlp(data.features, plan, train_pool, cfg, seed)
    if "kg_distmult" in wanted:
        models["kg_distmult"] = DistMultKG(
            n_relations=R, n_drugs=N, dim=t.dim, lr=t.lr, epochs=t.epochs, batch_size=t.batch_size,
            optimizer=t.optimizer, seed=seed).fit(plan.train_edges.pairs, plan.train_edges.relations)
    if "concat_mlp" in wanted:
        both = concat_tables(data.features, data.alt_features)
        models["concat_mlp"] = fit_feature_mlp(both, plan, train_pool, cfg, seed)
    return models


_TABLES = {"student": ("features",), "feature_mlp": ("features",),
           "concat_mlp": ("features", "alt_features")}


def save_model(model, directory, tables=(), extra=None) -> Path:
    """Checkpoint any run model; feature pipelines also record how pairs are featurised."""
    extra = dict(extra or {})
    if isinstance(model, Pipeline):
        feat = model.steps[0][1]
        extra.update(pair_mode=feat.mode, normalize=bool(feat.normalize), feature_tables=list(tables))
        model = model.steps[-1][1]
    return model.save(directory, extra=extra)


def load_model(directory, features: EmbeddingTable | None = None,
               alt_features: EmbeddingTable | None = None):
    """Rebuild a pair scorer from a checkpoint written by :func:`save_model`."""
    _, m = load_checkpoint(directory)
    kind = m["kind"]
    if kind == "teacher":
        if features is None:
            raise ConfigError("a teacher checkpoint needs the feature table")
        return FusionTeacher.load(directory, features)
    if kind == "distmult":
        return DistMultKG.load(directory)
    cls = {"student": DistilledStudent, "feature_mlp": RelationMLP}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown checkpoint kind {kind!r} in {directory}")
    est, _ = cls.load(directory)
    names = m.get("feature_tables", ["features"])
    given = {"features": features, "alt_features": alt_features}
    missing = [n for n in names if given[n] is None]
    if missing:
        raise ConfigError(f"checkpoint {directory} needs: {', '.join(missing)}")
    table = features if len(names) == 1 else concat_tables(features, alt_features)
    feat = PairFeaturizer(table, mode=m.get("pair_mode", "concat"), normalize=m.get("normalize", True)).fit()
    return Pipeline([("features", feat), ("model", est)])


def write_scores(path, pairs, scores, labels) -> None:
    """Score file: ``h<TAB>t<TAB>score<TAB>label`` in candidate order."""
    with open(path, "w", encoding="utf-8") as fh:
        for (h, t), s, y in zip(pairs.tolist(), scores.tolist(), labels.tolist()):
            fh.write(f"{h}\t{t}\t{s!r}\t{y}\n")


def read_scores(path):
    rows = np.loadtxt(path, delimiter="\t", ndmin=2)
    return rows[:, :2].astype(np.int64), rows[:, 2], rows[:, 3].astype(np.int64)


def build_detector(model, plan: SplitPlan, pools: dict, kind: str = "max_logit"):
    """Alert scorer for ``model``; ``binary_head`` is fitted on train positives vs the train pool."""
    if kind == "max_logit":
        return model
    if kind == "binary_head":
        pairs, labels, _ = candidate_set(plan.train_edges, pools[PoolRole.TRAIN])
        return LogitBinaryHead(model).fit(pairs, labels)
    raise ConfigError(f"unknown detector {kind!r}")


def evaluate_model(name: str, model, plan: SplitPlan, pools: dict, cfg: ExperimentConfig, seed: int,
                   config_hash: str):
    """Calibrate on validation candidates, then score the test candidates.

    Returns ``(report, threshold, test_pairs, test_scores, test_labels, correct)``
    where ``correct`` flags each test edge whose top relation is right.
    Exact-mechanism precision is measured on the test positive edges.
    """
    detector = build_detector(model, plan, pools, cfg.eval.detector)
    v_pairs, v_lab, _ = candidate_set(plan.valid_edges, pools[PoolRole.VALID])
    th = calibrate_threshold(detection_score(v_pairs, detector), v_lab, cfg.eval.target_tpr)

    t_pairs, t_lab, _ = candidate_set(plan.test_edges, pools[PoolRole.TEST])
    scores = detection_score(t_pairs, detector)
    tp, fp, fn, _ = M.confusion_at(scores, t_lab, th.theta_star)
    precision, recall, f1 = M.binary_prf(tp, fp, fn)

    pred = np.argmax(model.decision_function(plan.test_edges.pairs), axis=1)
    correct = (pred == plan.test_edges.relations).astype(float)
    p_hat = M.exact_mechanism_precision(pred, plan.test_edges.relations)
    report = M.EvalReport(
        model=name, regime=plan.regime.value, seeds=[seed], exact_precision=p_hat,
        wilson_ci=M.wilson_ci(p_hat, len(correct)),
        bootstrap_ci=M.bootstrap_ci(correct, cfg.eval.bootstrap_iterations, seed=seed),
        detection_precision=precision, recall=recall, f1=f1,
        roc_auc=M.roc_auc(scores, t_lab), ap_stepwise=M.average_precision_stepwise(scores, t_lab),
        ap_baseline=M.prevalence(t_lab), threshold=th.theta_star,
        n={"mechanism_pairs": len(correct), "test_candidates": len(t_lab),
           "test_positives": int(t_lab.sum()), "valid_candidates": len(v_lab),
           "tp": tp, "fp": fp, "fn": fn},
        pool_checksums={r.value: pools[r].checksum for r in PoolRole},
        config_hash=config_hash)
    report.check()
    return report, th, t_pairs, scores, t_lab, correct


_SPREAD_KEYS = ("exact_precision", "detection_precision", "recall", "f1", "roc_auc", "ap_stepwise",
                "ap_baseline")


def aggregate_reports(reports: list, correct: list, iterations: int = 1000) -> M.EvalReport:
    """Mean over seeds with sample-std spread.

    The Wilson interval uses the mean precision with the pooled pair count;
    the bootstrap resamples within each seed and averages the seed means.
    The threshold field holds the mean of the per-seed thresholds.
    """
    if not reports:
        raise ValueError("nothing to aggregate")
    first = reports[0]
    means = {k: M.mean_std([getattr(r, k) for r in reports]) for k in _SPREAD_KEYS}
    n_total = sum(r.n["mechanism_pairs"] for r in reports)
    seeds = [s for r in reports for s in r.seeds]

    def resample(rng):
        return float(np.mean([c[rng.integers(0, len(c), len(c))].mean() for c in correct]))

    p = means["exact_precision"][0]
    agg = M.EvalReport(
        model=first.model, regime=first.regime, seeds=seeds, exact_precision=p,
        wilson_ci=M.wilson_ci(p, n_total),
        bootstrap_ci=M.bootstrap_ci(resample, iterations, seed=min(seeds)),
        detection_precision=means["detection_precision"][0], recall=means["recall"][0],
        f1=means["f1"][0], roc_auc=means["roc_auc"][0], ap_stepwise=means["ap_stepwise"][0],
        ap_baseline=means["ap_baseline"][0],
        threshold=float(np.mean([r.threshold for r in reports])),
        n={"mechanism_pairs": n_total, "seeds": len(reports),
           "test_candidates": sum(r.n["test_candidates"] for r in reports)},
        pool_checksums={str(s): r.pool_checksums for s, r in zip(seeds, reports)},
        config_hash=first.config_hash,
        spread={k: v[1] for k, v in means.items()})
    agg.check()
    return agg


def save_report(report: M.EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_report(path) -> M.EvalReport:
    with open(path, encoding="utf-8") as fh:
        return M.EvalReport.from_dict(json.load(fh))


@dataclass
class ExperimentResult:
    output_dir: Path
    config_hash: str
    per_seed: dict = field(default_factory=dict)   # model -> [EvalReport]
    aggregate: dict = field(default_factory=dict)  # model -> EvalReport

    def table(self) -> str:
        return M.format_report_table(list(self.aggregate.values()))


def run_seed(cfg: ExperimentConfig, data: Dataset, seed: int, out: Path, config_hash: str,
             on_stage=None) -> dict:
    """One seed of the pipeline; returns ``model -> (report, correctness vector)``."""
    notify = on_stage or (lambda stage, seed, path: None)
    with _stage("split", seed, out / "split"):
        plan = make_split(data.kg, cfg, seed)
        save_split(plan, out / "split")
    notify("split", seed, out / "split")

    with _stage("pools", seed, out / "pools"):
        manifests = build_and_freeze_pools(plan, cfg, seed, out / "pools")
    notify("pools", seed, out / "pools")
    with _stage("pools", seed, *manifests.values()):
        pools = {role: load_pool(m) for role, m in manifests.items()}

    with _stage("leakage", seed, out / "leakage.json"):
        report = verify_no_leakage(plan, plan.train_edges, extra_pairs=pools[PoolRole.TRAIN].pairs)
        with open(out / "leakage.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        report.raise_for_failure()

    with _stage("train", seed, out / "models"):
        models = train_models(cfg, data, plan, pools[PoolRole.TRAIN], seed)
        for name, model in models.items():
            save_model(model, out / "models" / name, tables=_TABLES.get(name, ()),
                       extra={"config_hash": config_hash, "model_name": name})
    notify("train", seed, out / "models")

    results = {}
    with _stage("evaluate", seed, out / "scores", out / "reports", *manifests.values()):
        # the pools must still match what the models were compared on
        for role, m in manifests.items():
            if load_pool(m).checksum != pools[role].checksum:
                raise ChecksumError(f"pool {role.value!r} changed during the run")
        for name, model in models.items():
            rep, th, pairs, scores, labels, correct = evaluate_model(
                name, model, plan, pools, cfg, seed, config_hash)
            (out / "scores").mkdir(parents=True, exist_ok=True)
            write_scores(out / "scores" / f"{name}.tsv", pairs, scores, labels)
            th.save(out / "scores" / f"{name}.threshold.json")
            save_report(rep, out / "reports" / f"{name}.json")
            results[name] = (rep, correct)
    notify("evaluate", seed, out / "reports")
    return results


def run_experiment(cfg: ExperimentConfig, output_dir=None, on_stage=None) -> ExperimentResult:
    """Run every seed and write per-seed plus aggregate reports.

    ``on_stage(stage, seed, path)`` is called after each stage finishes;
    tests use it to tamper with artifacts mid-run.
    """
    cfg.validate()
    out = Path(output_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    with open(out / "config.ini", "w", encoding="utf-8") as fh:
        fh.write(cfg.to_ini())
    with _stage("data", None, cfg.data.triples or "<synthetic>"):
        data = load_dataset(cfg)
    result = ExperimentResult(out, h)
    correct = {}
    for seed in cfg.seed_list:
        per = run_seed(cfg, data, seed, out / f"seed_{seed}", h, on_stage)
        for name, (rep, c) in per.items():
            result.per_seed.setdefault(name, []).append(rep)
            correct.setdefault(name, []).append(c)
    for name, reps in result.per_seed.items():
        agg = aggregate_reports(reps, correct[name], cfg.eval.bootstrap_iterations)
        result.aggregate[name] = agg
        save_report(agg, out / "reports" / f"{name}.json")
    with open(out / "reports" / "table.txt", "w", encoding="utf-8") as fh:
        fh.write(result.table() + "\n")
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump({"config_hash": h, "seeds": list(cfg.seed_list), "models": sorted(result.aggregate),
                   "reports": {m: f"reports/{m}.json" for m in sorted(result.aggregate)}},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    return result


def _pool_signature(report: M.EvalReport) -> str:
    return json.dumps(report.pool_checksums, sort_keys=True)


def compare_models(report_paths, fp_pairs=None) -> str:
    """Side-by-side table of reports evaluated on identical pools.

    ``fp_pairs`` lists ``(fusion_model, baseline_model)`` names for which a
    relative false-positive reduction (from exact-mechanism precision) is
    appended. Reports whose pool checksums differ are refused.
    """
    reports = [load_report(p) if not isinstance(p, M.EvalReport) else p for p in report_paths]
    if not reports:
        raise ConfigError("no reports to compare")
    ref = _pool_signature(reports[0])
    for r in reports[1:]:
        if _pool_signature(r) != ref:
            raise ChecksumError(f"report {r.model!r} was evaluated on different negative pools "
                                f"than {reports[0].model!r}; refusing to compare")
    lines = [M.format_report_table(reports)]
    by_name = {r.model: r for r in reports}
    for fusion, base in fp_pairs or []:
        if fusion not in by_name or base not in by_name:
            raise ConfigError(f"FP reduction needs both {fusion!r} and {base!r} reports")
        try:
            value = f"{M.relative_fp_reduction(by_name[fusion].exact_precision, by_name[base].exact_precision):.4f}"
        except (ValueError, ZeroDivisionError) as exc:
            value = f"n/a ({exc})"
        lines.append(f"relative FP reduction {fusion} vs {base}: {value}")
    return "\n".join(lines)


def verify_pool_files(pool_dir) -> dict:
    """Load every ``*.manifest.json`` under ``pool_dir``; raises ChecksumError on mismatch."""
    return {Path(m).name.split(".")[0]: load_pool(m) for m in sorted(Path(pool_dir).glob("*.manifest.json"))}


__all__ = ["Dataset", "ExperimentResult", "StageError", "aggregate_reports", "build_and_freeze_pools", "build_detector",
           "compare_models", "evaluate_model", "fit_feature_mlp", "load_dataset", "load_report", "make_split", "pool_seed",
           "load_model", "read_scores", "run_experiment", "save_model", "run_seed", "save_report", "train_models", "verify_pool_files",
           "write_scores"]

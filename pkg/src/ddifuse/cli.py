"""Command-line driver.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 leakage
abort, 4 checksum abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import DETECTORS, ExperimentConfig, load_config
from .exceptions import ConfigError, DdiError, FormatError
from .experiment import (build_detector, compare_models, evaluate_model, fit_feature_mlp, load_model,
                         load_report, pool_seed, read_scores, run_experiment, save_model, save_report,
                         verify_pool_files, write_scores)
from .features import EmbeddingTable, concat_tables, load_embedding_table
from .graph import (edge_holdout_split, load_split, load_triples, merge_inverse, node_holdout_split,
                    save_split)
from .negatives import PoolRole, build_pool, candidate_set, freeze_pool
from .student import distill
from .synth import generate
from .teacher import DistMultKG, FusionTeacher
from .two_head import Threshold, calibrate_threshold, detection_score

logger = logging.getLogger("ddifuse")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_LEAKAGE, EXIT_CHECKSUM = 0, 1, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(run={"seeds": (args.seed,)})
    return cfg


def _seed(args, plan=None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return plan.seed if plan is not None else 0


def _table(path):
    return load_embedding_table(path) if path else None


def _pools(pool_dir) -> dict:
    loaded = verify_pool_files(pool_dir)
    missing = [r.value for r in PoolRole if r.value not in loaded]
    if missing:
        raise ConfigError(f"{pool_dir}: missing pool manifest(s): {', '.join(missing)}")
    return {r: loaded[r.value] for r in PoolRole}


# -- subcommands ------------------------------------------------------------

def cmd_gen(args):
    world_cfg = load_config(args.spec).world if args.spec else ExperimentConfig().world
    spec = world_cfg.spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    world = generate(spec)
    world.save(args.out)
    print(f"world: {len(world.kg)} edges over {spec.num_drugs} drugs, {spec.num_relations} relations -> {args.out}")


def cmd_split(args):
    ts = load_triples(args.triples, vocab_path=args.vocab)
    if args.merge_inverse:
        ts = merge_inverse(ts)
    fn = node_holdout_split if args.regime == "node" else edge_holdout_split
    plan = fn(ts, args.train_frac, args.test_frac, args.seed or 0)
    save_split(plan, args.out)
    print(f"{plan.regime.value} split: train {len(plan.train_edges)}, valid {len(plan.valid_edges)}, "
          f"test {len(plan.test_edges)} -> {args.out}")


def cmd_pools(args):
    plan = load_split(args.split)
    seed = _seed(args, plan)
    k = {PoolRole.TRAIN: args.k_train, PoolRole.VALID: args.k_valid, PoolRole.TEST: args.k_test}
    pos = {PoolRole.TRAIN: plan.train_edges, PoolRole.VALID: plan.valid_edges, PoolRole.TEST: plan.test_edges}
    for role in PoolRole:
        pool = build_pool(plan, pos[role], k[role], role, pool_seed(seed, role))
        m = freeze_pool(pool, args.out, role.value)
        print(f"{role.value}: {len(pool)} pairs (shortfall {pool.shortfall}) -> {m}")


def cmd_train_teacher(args):
    cfg = _config(args)
    plan = load_split(args.split)
    t = cfg.teacher
    init = None
    if args.freeze_entities and not args.kg_emb:
        raise ConfigError("--freeze-entities needs --kg-emb")
    if args.kg_emb:
        kge = load_embedding_table(args.kg_emb)
        keep = np.isin(kge.drugs, plan.train_nodes)
        init = EmbeddingTable(kge.drugs[keep], kge.matrix[keep])
    model = FusionTeacher(features=load_embedding_table(args.feat), n_relations=plan.num_relations,
                          n_drugs=plan.num_drugs, dim=t.dim, gate_hidden=t.gate_hidden or None, lr=t.lr,
                          epochs=t.epochs, batch_size=t.batch_size, optimizer=t.optimizer,
                          normalize_features=t.normalize_features, entity_init=init,
                          freeze_entities=args.freeze_entities or t.freeze_entities, seed=_seed(args, plan))
    model.fit(plan.train_edges.pairs, plan.train_edges.relations)
    model.save(args.out, extra={"config_hash": cfg.config_hash(), "model_name": "teacher"})
    print(f"teacher: final loss {model.loss_trace_[-1]:.6f} -> {args.out}")


def cmd_train_baseline(args):
    cfg = _config(args)
    plan = load_split(args.split)
    seed = _seed(args, plan)
    if args.kind == "kg_distmult":
        t = cfg.teacher
        model = DistMultKG(n_relations=plan.num_relations, n_drugs=plan.num_drugs, dim=t.dim, lr=t.lr,
                           epochs=t.epochs, batch_size=t.batch_size, optimizer=t.optimizer, seed=seed)
        model.fit(plan.train_edges.pairs, plan.train_edges.relations)
        save_model(model, args.out, extra={"config_hash": cfg.config_hash(), "model_name": args.kind})
    else:
        if not args.feat:
            raise ConfigError(f"{args.kind} needs --feat")
        table = load_embedding_table(args.feat)
        tables = ("features",)
        if args.kind == "concat_mlp":
            if not args.alt_feat:
                raise ConfigError("concat_mlp needs --alt-feat")
            table = concat_tables(table, load_embedding_table(args.alt_feat))
            tables = ("features", "alt_features")
        pools = _pools(args.pools)
        model = fit_feature_mlp(table, plan, pools[PoolRole.TRAIN], cfg, seed)
        save_model(model, args.out, tables=tables,
                   extra={"config_hash": cfg.config_hash(), "model_name": args.kind})
    print(f"{args.kind} -> {args.out}")


def cmd_distill(args):
    cfg = _config(args)
    plan = load_split(args.split)
    feats = load_embedding_table(args.feat)
    teacher = load_model(args.teacher, feats)
    negatives = _pools(args.pools)[PoolRole.TRAIN].pairs if args.pools else None
    s = cfg.student
    pipe = distill(teacher, plan, feats, negatives=negatives, negative_label=s.negative_label,
                   mode=s.pair_mode, normalize=s.normalize, n_relations=plan.num_relations,
                   hidden=s.hidden, lr=s.lr, weight_decay=s.weight_decay, batch_size=s.batch_size,
                   epochs=s.epochs, optimizer=s.optimizer, alpha=s.alpha, tau=s.tau, kd_mode=s.kd_mode,
                   seed=_seed(args, plan))
    save_model(pipe, args.out, tables=("features",),
               extra={"config_hash": cfg.config_hash(), "model_name": "student"})
    print(f"student: final loss {pipe.steps[-1][1].loss_trace_[-1]:.6f} -> {args.out}")


def cmd_calibrate(args):
    plan = load_split(args.split)
    pools = _pools(args.pools)
    model = load_model(args.model, _table(args.feat), _table(args.alt_feat))
    detector = build_detector(model, plan, pools, args.detector or "max_logit")
    pairs, labels, _ = candidate_set(plan.valid_edges, pools[PoolRole.VALID])
    scores = detection_score(pairs, detector)
    th = calibrate_threshold(scores, labels, args.target_tpr)
    th.save(args.out)
    if args.scores:
        write_scores(args.scores, pairs, scores, labels)
    print(f"theta* = {th.theta_star:.6g} (TPR {th.achieved_tpr:.3f}, precision {th.achieved_precision:.3f})"
          f" -> {args.out}")


def cmd_eval(args):
    cfg = _config(args)
    overrides = {"bootstrap_iterations": args.bootstrap}
    if args.detector:
        overrides["detector"] = args.detector
    cfg = cfg.with_overrides(eval=overrides)
    plan = load_split(args.split)
    pools = _pools(args.pools)
    model = load_model(args.model, _table(args.feat), _table(args.alt_feat))
    manifest = json.loads((Path(args.model) / "manifest.json").read_text(encoding="utf-8"))
    name = args.name or manifest.get("model_name", manifest["kind"])
    rep, th, pairs, scores, labels, _ = evaluate_model(name, model, plan, pools, cfg, _seed(args, plan),
                                                       cfg.config_hash())
    if args.threshold:
        # a stored threshold takes precedence over fresh calibration
        stored = Threshold.load(args.threshold)
        tp, fp, fn, _ = M.confusion_at(scores, labels, stored.theta_star)
        rep.detection_precision, rep.recall, rep.f1 = M.binary_prf(tp, fp, fn)
        rep.threshold = stored.theta_star
        rep.n.update(tp=tp, fp=fp, fn=fn)
    save_report(rep, args.out)
    if args.scores:
        write_scores(args.scores, pairs, scores, labels)
    print(M.format_report_table([rep]))


def cmd_report(args):
    reports = [load_report(p) for p in args.reports]
    text = M.format_report_table(reports)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.kv:
        with open(args.kv, "w", encoding="utf-8") as fh:
            for r in reports:
                for k, v in sorted(r.to_dict().items()):
                    fh.write(f"{r.model}.{k}={json.dumps(v, sort_keys=True)}\n")


def cmd_compare(args):
    fp = []
    for item in args.fp or []:
        if ":" not in item:
            raise ConfigError(f"--fp expects FUSION:BASELINE, got {item!r}")
        fp.append(tuple(item.split(":", 1)))
    print(compare_models(args.reports, fp))


def cmd_plot(args):
    # lazy: only this subcommand needs matplotlib, and it must get the headless backend first
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(10, 4.5))
    for path in args.scores:
        _, s, y = read_scores(path)
        label = Path(path).stem
        fpr, tpr = M.roc_curve_points(s, y)
        rec, prec = M.pr_curve_points(s, y)
        ax_roc.plot(fpr, tpr, label=f"{label} (AUC {M.roc_auc(s, y):.3f})")
        ax_pr.step(rec, prec, where="post", label=f"{label} (AP {M.average_precision_stepwise(s, y):.3f})")
    ax_roc.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax_roc.set(xlabel="false positive rate", ylabel="true positive rate", title="ROC")
    ax_pr.set(xlabel="recall", ylabel="precision", title="Precision-recall")
    for ax in (ax_roc, ax_pr):
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"plot -> {args.out}")


def cmd_run(args):
    cfg = _config(args)
    result = run_experiment(cfg, args.out)
    print(result.table())
    print(f"config hash {result.config_hash[:12]}; reports in {result.output_dir / 'reports'}")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddifuse", description="Drug-pair interaction fusion and distillation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic world")
    sp.add_argument("--spec", help="INI file with a [world] section")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("split", cmd_split, "split a triple file")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--regime", choices=["node", "edge"], default="node")
    sp.add_argument("--train-frac", type=float, default=0.8)
    sp.add_argument("--test-frac", type=float, default=0.1)
    sp.add_argument("--merge-inverse", "--symmetric", dest="merge_inverse", action="store_true",
                    help="keep one direction of (h, r, t)/(t, r, h)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("pools", cmd_pools, "sample and freeze negative pools")
    sp.add_argument("--split", required=True)
    sp.add_argument("--k-train", type=int, default=2)
    sp.add_argument("--k-valid", type=int, default=10)
    sp.add_argument("--k-test", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-teacher", cmd_train_teacher, "train the fusion teacher")
    sp.add_argument("--split", required=True)
    sp.add_argument("--feat", required=True)
    sp.add_argument("--kg-emb", help="pretrained entity vectors; rows of non-training drugs are dropped")
    sp.add_argument("--freeze-entities", action="store_true", help="keep --kg-emb vectors fixed")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-baseline", cmd_train_baseline, "train a baseline model")
    sp.add_argument("--kind", choices=["feature_mlp", "kg_distmult", "concat_mlp"], required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--pools")
    sp.add_argument("--feat")
    sp.add_argument("--alt-feat")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("distill", cmd_distill, "distill a feature-only student")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--feat", required=True)
    sp.add_argument("--pools", help="pool directory; its train pool supplies KD negatives")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("calibrate", cmd_calibrate, "calibrate the alert threshold on validation pairs")
    for name in ("--model", "--split", "--pools", "--out"):
        sp.add_argument(name, required=True)
    sp.add_argument("--feat")
    sp.add_argument("--alt-feat")
    sp.add_argument("--target-tpr", type=float, default=0.90)
    sp.add_argument("--scores", help="also write the validation score file")
    sp.add_argument("--detector", choices=DETECTORS, help="alert scorer (default: max_logit)")

    sp = add("eval", cmd_eval, "evaluate a model on the frozen test pool")
    for name in ("--model", "--split", "--pools", "--out"):
        sp.add_argument(name, required=True)
    sp.add_argument("--feat")
    sp.add_argument("--alt-feat")
    sp.add_argument("--threshold", help="threshold JSON from 'calibrate'")
    sp.add_argument("--name")
    sp.add_argument("--scores", help="write the test score file")
    sp.add_argument("--bootstrap", type=int, default=1000)
    sp.add_argument("--detector", choices=DETECTORS, help="alert scorer (default: max_logit)")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)

    sp = add("report", cmd_report, "print reports as a table")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--kv", help="also write a key=value file")

    sp = add("compare", cmd_compare, "compare reports evaluated on identical pools")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--fp", action="append", metavar="FUSION:BASELINE",
                    help="add a relative false-positive reduction line")

    sp = add("plot", cmd_plot, "ROC and PR curves from score files")
    sp.add_argument("scores", nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("run", cmd_run, "run the full pipeline from a config")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except DdiError as exc:
        stage = getattr(exc, "stage", None)
        prefix = f"stage {stage}: " if stage else ""
        print(f"{prefix}{type(exc).__name__}: {exc}", file=sys.stderr)
        for a in getattr(exc, "artifacts", []):
            print(f"  artifact: {a}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_FAIL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

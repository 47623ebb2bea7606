"""Command-line entry point: ``hatesage <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import demography, evaluation, graph as gs, samplers, training
from .models import ModelConfig, save_checkpoint
from .ndiff import NonFiniteError

log = logging.getLogger("hatesage")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _run_dir(base: str, seed: int) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S")
    root = Path(base)
    d = root / f"{stamp}-seed{seed}"
    i = 1
    while d.exists():
        d = root / f"{stamp}-seed{seed}-{i}"
        i += 1
    d.mkdir(parents=True)
    return d


def _record(d: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    items.update(extra or {})
    (d / "run_config.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(items.items())))


def _load(store: str):
    graph, table = gs.load_store(store)
    if table is None:
        raise ValueError(f"{store}: store has no node table")
    return graph, table


# subcommands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    graph, report = gs.load_edge_list(args.edges, args.delimiter)
    features = {}
    for kind in ("text", "user", "network"):
        pats = getattr(args, f"{kind}_cols")
        if pats:
            features[kind] = [p.strip() for p in pats.split(",") if p.strip()]
    schema = gs.NodeSchema(
        id=args.id_col,
        label=args.label_col,
        group=args.group_col,
        features=features,
    )
    table = gs.load_node_table(args.nodes, schema, graph=graph, delimiter=args.delimiter)
    if args.network_features:
        cols = gs.compute_network_features(graph)
        table = table.with_features(np.column_stack(list(cols.values())), list(cols), "network")
        labeled = table.labeled
        table = table.standardized(labeled if len(labeled) else np.arange(table.node_count))
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ValueError(f"{out}: store directory is not empty")
    gs.save_store(out, graph, table)
    stats = gs.degree_stats(graph)
    counts = table.label_counts()
    lines = [
        f"raw_rows={report.raw_rows}",
        f"self_loops={report.self_loops}",
        f"duplicates={report.duplicates}",
        f"edges={report.edges}",
        f"nodes={stats['node_count']}",
        f"isolated={stats['isolated']}",
        f"hateful={counts['hateful']}",
        f"normal={counts['normal']}",
        f"features={len(table.feature_names)}",
    ]
    text = "\n".join(lines) + "\n"
    (out / "ingest_report.txt").write_text(text)
    _record(out, args)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    graph, _ = gs.load_store(args.store)
    d = _run_dir(args.out, args.seed)
    _record(d, args)
    rng = samplers.RngStream(args.seed)
    if args.method == "durw":
        start = int(graph.dense_ids([args.start])[0]) if args.start is not None else 0
        res = samplers.durw_sample(graph, start, args.jump_weight, args.budget, rng)
        with open(d / "sample.txt", "w") as fh:
            fh.writelines(f"{int(graph.ids[v])}\n" for v in res.nodes)
        if not res.complete:
            log.warning("step cap reached after %d steps; %d of %d nodes", res.steps, len(res.nodes), args.budget)
    else:
        seeds = np.zeros(graph.node_count)
        with open(args.seed_scores) as fh:
            fh.readline()  # header
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    nid, val = line.strip().split(",")[:2]
                    seeds[graph.dense_ids([int(nid)])[0]] = float(val)
                except (ValueError, KeyError) as e:
                    raise ValueError(f"{args.seed_scores}:{lineno}: {e}") from None
        p = samplers.diffusion_scores(graph, seeds, args.alpha, args.iterations)
        with open(d / "diffusion.csv", "w") as fh:
            fh.write("node_id,score\n")
            fh.writelines(f"{int(graph.ids[v])},{float(s)!r}\n" for v, s in enumerate(p))
        if args.per_stratum:
            picks = samplers.select_candidates(p, args.strata, args.per_stratum, rng.child(0))
            with open(d / "sample.txt", "w") as fh:
                fh.writelines(f"{int(graph.ids[v])}\n" for v in picks)
    print(d)
    return EXIT_OK


def cmd_train(args) -> int:
    config, hyper, raw = training.read_config(args.config)
    if args.seed is not None:
        hyper = training.TrainHyper(hyper.lr, hyper.epochs, hyper.batch_size, hyper.k, args.seed)
    graph, table = _load(args.store)
    labeled = table.labeled
    plan = training.stratified_kfold(table.labels[labeled], hyper.k, hyper.seed, nodes=labeled)
    d = _run_dir(args.out, hyper.seed)
    resolved = {f"model.{k}": v for k, v in config.as_dict().items()}
    resolved.update({f"train.{k}": v for k, v in vars(hyper).items()})
    _record(d, args, resolved)
    results = training.train(config, graph, table, plan, samplers.RngStream(hyper.seed), hyper)
    groups = table.groups if args.groups is None else _group_column(graph, args.groups)
    pooled = []
    for r in results:
        fd = d / f"fold{r.run.fold}"
        save_checkpoint(fd / "checkpoint", config, r.run.params, {"pos_weight": repr(r.run.pos_weight), "fold": r.run.fold})
        training.write_predictions(fd / "predictions.csv", graph.ids[r.nodes], r.labels, groups[r.nodes], r.scores)
        (fd / "loss.txt").write_text("".join(f"{x!r}\n" for x in r.run.losses))
        pooled.append(r)
    order = np.argsort(np.concatenate([graph.ids[r.nodes] for r in pooled]), kind="stable")
    cat = lambda f: np.concatenate([f(r) for r in pooled])[order]
    training.write_predictions(
        d / "predictions.csv",
        cat(lambda r: graph.ids[r.nodes]),
        cat(lambda r: r.labels),
        cat(lambda r: groups[r.nodes]),
        cat(lambda r: r.scores),
    )
    print(d)
    return EXIT_OK


def _group_column(graph, path) -> np.ndarray:
    mapping = demography.read_groups(path)
    return np.array([mapping.get(int(i), "other") for i in graph.ids], dtype=object)


def _pred_metrics(pred, threshold):
    m = evaluation.prf(evaluation.confusion(pred["score"], pred["label"], threshold))
    try:
        m["auc"] = evaluation.auc(pred["score"], pred["label"])
    except ValueError:
        m["auc"] = None
    return m


def _write_reports(args, report, fairness=None):
    out = Path(args.report) if args.report else None
    text = evaluation.format_text(report, args.name, fairness)
    sys.stdout.write(text)
    if out is not None:
        evaluation.emit_report(report, out.with_suffix(".txt"), "text", args.name, fairness)
        evaluation.emit_report(report, out.with_suffix(".kv"), "keyvalue")


def cmd_evaluate(args) -> int:
    preds = [training.read_predictions(p) for p in args.pred]
    pooled = {k: np.concatenate([p[k] for p in preds]) for k in preds[0]}
    # headline metrics are pooled over all files; fold means are reported alongside
    report = _pred_metrics(pooled, args.threshold)
    report.update(vars(evaluation.confusion(pooled["score"], pooled["label"], args.threshold)))
    if len(preds) > 1:
        per = [_pred_metrics(p, args.threshold) for p in preds]
        for k in ("accuracy", "precision", "recall", "f1", "auc"):
            vals = [m[k] for m in per if m[k] is not None]
            report[f"foldmean_{k}"] = float(np.mean(vals)) if vals else None
    _write_reports(args, report)
    if args.sweep:
        ts = [float(t) for t in args.sweep.split(",")]
        for row in evaluation.threshold_sweep(pooled["score"], pooled["label"], ts):
            print(" ".join(f"{k}={evaluation._fmt(v)}" for k, v in row.items()))
    return EXIT_OK


def cmd_fairness(args) -> int:
    pred = training.read_predictions(args.pred)
    groups = pred["group"]
    if args.groups:
        mapping = demography.read_groups(args.groups)
        groups = np.array([mapping.get(int(i), "other") for i in pred["node_id"]], dtype=object)
    rep = evaluation.fairness_report(pred["score"], pred["label"], groups, args.protected, args.threshold)
    report = rep.as_dict()
    _write_reports(args, report, rep)
    return EXIT_OK


def cmd_demography(args) -> int:
    rows = demography.read_posteriors(args.posteriors)
    means = demography.average_posteriors(rows)
    removals, additions = demography.read_overrides(args.overrides) if args.overrides else ([], [])
    category = demography.CATEGORIES.index(args.category)
    assign = demography.label_group(means, category, args.threshold, removals, additions)
    demography.write_groups(args.out, assign, args.protected_tag)
    n_model = sum(1 for u, m in means.items() if m[category] > args.threshold)
    print(f"model_labeled={n_model} removed={len(removals)} added={len(additions)} protected={len(assign.protected)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = {"hidden_dim": args.hidden} if not args.model == "lr" else {}
    if args.model.startswith("sage-"):
        overrides["fanouts"] = (3,) * 2
    config = ModelConfig.preset(args.model, **overrides)
    err = training.model_grad_check(config, args.seed, args.points, args.eps)
    print(f"model={args.model} points={args.points} max_rel_error={err:.3e}")
    if err >= 1e-4:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hatesage", description="Hateful-user detection with GraphSAGE and fairness evaluation.")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = reproducible mode)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="edge list + node table -> store directory")
    s.add_argument("--edges", required=True, help="edge list file (src,dst)")
    s.add_argument("--nodes", required=True, help="node table with header")
    s.add_argument("--out", required=True, help="store directory to create")
    s.add_argument("--delimiter", default=",")
    s.add_argument("--id-col", default="user_id")
    s.add_argument("--label-col", default="hate")
    s.add_argument("--group-col", default=None)
    s.add_argument("--text-cols", default="", help="comma-separated glob patterns")
    s.add_argument("--user-cols", default="", help="comma-separated glob patterns")
    s.add_argument("--network-cols", default="", help="comma-separated glob patterns")
    s.add_argument("--network-features", action="store_true", help="append in/out degree and eigenvector centrality")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("sample", help="DURW walk or diffusion candidate selection")
    s.add_argument("method", choices=("durw", "diffusion"))
    s.add_argument("--store", required=True)
    s.add_argument("--out", required=True, help="parent directory for the run directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, default=None, help="durw: start node (original id)")
    s.add_argument("--jump-weight", type=float, default=1.0, help="durw: random-jump weight w")
    s.add_argument("--budget", type=int, default=100, help="durw: distinct nodes to collect")
    s.add_argument("--seed-scores", help="diffusion: node_id,score file")
    s.add_argument("--alpha", type=float, default=0.85, help="diffusion: damping")
    s.add_argument("--iterations", type=int, default=20, help="diffusion: iterations")
    s.add_argument("--strata", type=int, default=4, help="diffusion: quantile bins")
    s.add_argument("--per-stratum", type=int, default=0, help="diffusion: candidates per bin (0 = scores only)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="cross-validated training from a key=value config")
    s.add_argument("--store", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="parent directory for the run directory")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--groups", default=None, help="group file to copy into predictions")
    s.set_defaults(func=cmd_train)

    for name, fn, helptext in (
        ("evaluate", cmd_evaluate, "accuracy metrics from prediction files"),
        ("fairness", cmd_fairness, "per-group false positive rates"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--pred", required=True, nargs="+" if name == "evaluate" else None, help="predictions file(s)")
        s.add_argument("--threshold", type=float, default=0.5)
        s.add_argument("--report", default=None, help="write <report>.txt and <report>.kv")
        s.add_argument("--name", default="model", help="row label in the text report")
        if name == "evaluate":
            s.add_argument("--sweep", default=None, help="comma-separated thresholds")
        else:
            s.add_argument("--groups", default=None, help="node_id,group file (default: predictions' group column)")
            s.add_argument("--protected", required=True, help="protected group tag")
        s.set_defaults(func=fn)

    s = sub.add_parser("demography", help="dialect posteriors + overrides -> group file")
    s.add_argument("--posteriors", required=True)
    s.add_argument("--overrides", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.8)
    s.add_argument("--category", default="p_black", choices=demography.CATEGORIES)
    s.add_argument("--protected-tag", default="AA")
    s.set_defaults(func=cmd_demography)

    s = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    s.add_argument("--model", required=True, choices=("lr", "mlp", "sage-mean", "sage-maxpool", "sage-attention"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--hidden", type=int, default=4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

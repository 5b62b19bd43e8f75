"""Command line front end.

Six subcommands cover the pipeline: prepare caches the preprocessed graph
and split, train writes a checkpoint and an epoch log, evaluate emits a
metrics JSON, fidelity emits the explanation-removal report, explain dumps
per-pair JSON and DOT exports, analyze writes the motif statistics table.
Every command echoes its full configuration and run digest into a
run_<command>.json next to its artifacts.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from .analysis import analyze, explanation_dot, explanation_json, \
    write_stats_tsv
from .config import (ConfigError, flatten, load_config, optional_float,
                     optional_int, run_digest, to_train_config)
from .evaluation import evaluate, fidelity, metrics_json, write_metrics
from .graphs import (load_dataset, load_graph_cache, preprocess,
                     save_graph_cache, split)
from .training import load_model, train

GRAPH_CACHE = "graph.srxg"
CHECKPOINT = "model.srxc"


class CliError(RuntimeError):
    pass


def _configure_threads():
    raw = os.environ.get("SOREX_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"SOREX_THREADS must be an integer, got {raw!r}") \
            from None
    if n < 1:
        raise CliError(f"SOREX_THREADS must be >= 1, got {n}")
    torch.set_num_threads(n)


def _load_cache(outdir):
    path = outdir / GRAPH_CACHE
    if not path.exists():
        raise CliError(f"{path} not found; run `sorex prepare` first")
    return load_graph_cache(path)


def _load_trained(cfg, outdir):
    graph, ds = _load_cache(outdir)
    path = outdir / CHECKPOINT
    if not path.exists():
        raise CliError(f"{path} not found; run `sorex train` first")
    model, _ = load_model(graph, ds, to_train_config(cfg), path)
    return graph, ds, model


def write_run_info(outdir, command, cfg, artifacts):
    payload = {
        "command": command,
        "digest": run_digest(cfg),
        "config": flatten(cfg),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    path = outdir / f"run_{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def cmd_prepare(cfg, outdir, args):
    inter = cfg["data"]["interactions"]
    social = cfg["data"]["social"]
    if not inter or not social:
        raise CliError("data.interactions and data.social paths are "
                       "required (set them in the config or via --set)")
    raw = load_dataset(inter, social,
                       rating_threshold=optional_float(cfg, "data",
                                                       "rating_threshold"))
    graph = preprocess(raw, min_interactions=cfg["data"]["min_interactions"])
    ds = split(graph, ratios=(cfg["split"]["train"], cfg["split"]["valid"],
                              cfg["split"]["test"]),
               seed=cfg["run"]["seed"])
    cache = outdir / GRAPH_CACHE
    save_graph_cache(cache, graph, ds)
    print(f"prepared {graph.m} users x {graph.n} items, "
          f"{graph.num_interactions} interactions, "
          f"{graph.num_social_directed // 2} social pairs; split "
          f"{len(ds.train)}/{len(ds.valid)}/{len(ds.test)}")
    return [cache]


def cmd_train(cfg, outdir, args):
    graph, ds = _load_cache(outdir)
    tc = to_train_config(cfg)
    log_path = outdir / "train.log"
    with open(log_path, "w", encoding="utf-8") as log:
        result = train(graph, ds, tc, out=str(outdir), log=log)
    print(f"best epoch {result.best_epoch}: validation "
          f"ndcg@{tc.eval_k} {result.best_ndcg:.4f}, "
          f"hr@{tc.eval_k} {result.best_hr:.4f}")
    return [outdir / CHECKPOINT, log_path]


def cmd_evaluate(cfg, outdir, args):
    graph, ds, model = _load_trained(cfg, outdir)
    mode = cfg["eval"]["mode"]
    report = evaluate(model, ds, mode=mode, passes=cfg["eval"]["passes"],
                      K=cfg["eval"]["k"], seed=cfg["run"]["seed"],
                      valid_negatives=cfg["eval"]["valid_negatives"])
    payload = metrics_json(report, cfg["data"]["name"], mode)
    path = outdir / f"metrics_{mode}.json"
    write_metrics(path, payload)
    print(f"{mode}: hr@{report.K} {report.hr:.4f}  "
          f"ndcg@{report.K} {report.ndcg:.4f}  mrr {report.mrr:.4f}  "
          f"({report.pairs} pairs, {report.passes} passes)")
    return [path]


def cmd_fidelity(cfg, outdir, args):
    graph, ds, model = _load_trained(cfg, outdir)
    passes = cfg["eval"]["passes"]
    K = cfg["eval"]["k"]
    seed = cfg["run"]["seed"]
    report = evaluate(model, ds, mode="test", passes=passes, K=K, seed=seed,
                      valid_negatives=cfg["eval"]["valid_negatives"])
    fid = fidelity(model, ds, passes=passes, K=K, seed=seed,
                   top5_filter=cfg["eval"]["top5_filter"])
    payload = metrics_json(report, cfg["data"]["name"], "test",
                           fidelity_pct=fid.delta_pct,
                           skipped_pairs=fid.skipped)
    metrics_path = outdir / "metrics_fidelity.json"
    write_metrics(metrics_path, payload)
    detail = {
        "dataset": cfg["data"]["name"],
        "K": fid.K,
        "passes": fid.passes,
        "delta_pct": fid.delta_pct,
        "random_delta_pct": fid.random_delta_pct,
        "pairs_used": fid.pairs_used,
        "skipped": fid.skipped,
        "top5_filter": cfg["eval"]["top5_filter"],
    }
    detail_path = outdir / "fidelity.json"
    with open(detail_path, "w", encoding="utf-8") as fh:
        json.dump(detail, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"fidelity: explanation removal {fid.delta_pct:+.2f}% vs random "
          f"{fid.random_delta_pct:+.2f}% over {fid.pairs_used} pairs "
          f"({fid.skipped} skipped)")
    return [metrics_path, detail_path]


def _analysis_records(cfg, outdir):
    graph, ds, model = _load_trained(cfg, outdir)
    records, rows = analyze(
        model, ds, seed=cfg["run"]["seed"],
        max_pairs=optional_int(cfg, "analysis", "max_pairs"),
        negatives_per_pair=cfg["analysis"]["negatives_per_pair"],
        triangle_any=cfg["analysis"]["triangle_any"],
        rank_filter=cfg["analysis"]["rank_filter"])
    return model, records, rows


def cmd_explain(cfg, outdir, args):
    model, records, _ = _analysis_records(cfg, outdir)
    exp_dir = outdir / "explanations"
    exp_dir.mkdir(exist_ok=True)
    written = []
    for rec in records:
        base = f"u{rec.user}_v{rec.candidate}_{rec.tower}_{rec.group}"
        doc = explanation_json(rec, model.graph, k=cfg["egopath"]["k"],
                               n_w=cfg["egopath"]["n_w"],
                               triangle_any=cfg["analysis"]["triangle_any"])
        json_path = exp_dir / f"{base}.json"
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        dot_path = exp_dir / f"{base}.dot"
        with open(dot_path, "w", encoding="utf-8") as fh:
            fh.write(explanation_dot(rec, model.graph))
        written.extend([json_path, dot_path])
    print(f"wrote {len(written)} explanation files for {len(records)} "
          f"(user, candidate, tower) records under {exp_dir}")
    return written


def cmd_analyze(cfg, outdir, args):
    _, _, rows = _analysis_records(cfg, outdir)
    path = outdir / "motif_stats.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        write_stats_tsv(fh, cfg["data"]["name"], rows)
    print(f"wrote {len(rows)} motif statistic rows to {path}")
    return [path]


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "fidelity": cmd_fidelity,
    "explain": cmd_explain,
    "analyze": cmd_analyze,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="INI config file; defaults apply without one")
    common.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override run.seed")
    common.add_argument("--out", default=None, metavar="DIR",
                        help="override run.out (artifact directory)")
    common.add_argument("--set", action="append", default=None,
                        dest="overrides", metavar="SECTION.KEY=VALUE",
                        help="override any config cell; repeatable")

    parser = argparse.ArgumentParser(
        prog="sorex",
        description="Self-explainable social recommendation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common],
                   help="load, filter, split, and cache the dataset")
    train_p = sub.add_parser("train", parents=[common],
                             help="optimize embeddings; writes checkpoint "
                                  "and epoch log")
    train_p.add_argument("--gamma", type=float, default=None,
                         help="override train.gamma (0 disables the "
                              "friend-ranking task)")
    eval_p = sub.add_parser("evaluate", parents=[common],
                            help="ranking metrics on a held-out part")
    eval_p.add_argument("--mode", choices=("validation", "test"),
                        default=None, help="override eval.mode")
    sub.add_parser("fidelity", parents=[common],
                   help="explanation-removal score drops vs random removal")
    sub.add_parser("explain", parents=[common],
                   help="per-pair explanation JSON and DOT exports")
    sub.add_parser("analyze", parents=[common],
                   help="motif formation and detection statistics")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _configure_threads()
        cfg = load_config(args.config, args.overrides or [])
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.out is not None:
            cfg["run"]["out"] = args.out
        if args.command == "train" and args.gamma is not None:
            cfg["train"]["gamma"] = args.gamma
        if args.command == "evaluate" and args.mode is not None:
            cfg["eval"]["mode"] = args.mode
        outdir = Path(cfg["run"]["out"])
        outdir.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](cfg, outdir, args)
        write_run_info(outdir, args.command, cfg, artifacts)
        return 0
    except (CliError, ConfigError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"sorex: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

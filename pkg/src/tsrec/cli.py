"""Command-line pipeline: generate, ingest, analyze, prepare, train, evaluate,
probe, and gradcheck subcommands.

Config resolution is defaults < --config file (key=value lines) < flags; every
artifact starts with a header carrying the tool version, the resolved config
hash, and the seed.  Exit code is 0 only when the requested operation fully
succeeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, evaluation
from .artifacts import header_dict, header_lines, write_json_report
from .config import ModelConfig, apply_overrides, parse_kv_file
from .model import (Model, pop_rec_baseline, load_checkpoint, save_checkpoint,
                    train, write_history)
from .optim import finite_difference_check
from .synth import SyntheticConfig, generate


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--d", type=int, dest="d")
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--p-min", type=int, dest="p_min")
    p.add_argument("--bin-max", type=int, dest="bin_max")
    p.add_argument("--matrix-m", type=int, dest="matrix_m")
    p.add_argument("--matrix-n", type=int, dest="matrix_n")
    p.add_argument("--conv-channels", type=int, dest="conv_channels")
    p.add_argument("--dropout", type=float, dest="dropout")
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--train-negatives", type=int, dest="train_negatives")
    p.add_argument("--patience", type=int, dest="patience")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--min-item-count", type=int, dest="min_item_count")
    p.add_argument("--split", dest="split_fractions",
                   help="train,val,test fractions, e.g. 0.7,0.1,0.2")
    p.add_argument("--threads", type=int, dest="threads")
    p.add_argument("--no-utrm", action="store_true", help="ablate the user-temporal module")
    p.add_argument("--no-itrm", action="store_true", help="ablate the item-temporal module")
    p.add_argument("--no-sram", action="store_true", help="ablate the sequence-match module")


_MODEL_FIELDS = ("d", "seq_len", "p_min", "bin_max", "matrix_m", "matrix_n",
                 "conv_channels", "dropout", "lr", "batch_size", "train_negatives",
                 "patience", "max_epochs", "seed", "min_item_count",
                 "split_fractions", "threads")


def _resolve_model_config(args) -> ModelConfig:
    cfg = ModelConfig()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, parse_kv_file(args.config))
    overrides = {}
    for name in _MODEL_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "no_utrm", False):
        cfg = dataclasses.replace(cfg, use_utrm=False)
    if getattr(args, "no_itrm", False):
        cfg = dataclasses.replace(cfg, use_itrm=False)
    if getattr(args, "no_sram", False):
        cfg = dataclasses.replace(cfg, use_sram=False)
    return cfg.validate()


def _build_provider(events_path, cfg: ModelConfig):
    """Shared pipeline: ingest, cold-start filter, chronological split, features."""
    log = data.ingest(events_path)
    log = data.filter_cold_start(log, cfg.min_item_count)
    split = data.chronological_split(log, cfg.split_fractions)
    provider = data.FeatureProvider(split, cfg)
    resolved = dataclasses.replace(cfg, p_min=provider.p_min)
    return provider, resolved


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = SyntheticConfig()
    if args.config:
        cfg = apply_overrides(cfg, parse_kv_file(args.config))
    overrides = {name: getattr(args, name) for name in (
        "users", "items", "events_per_user", "periodic_items", "periodic_per_user",
        "period_slots", "jitter_slots", "block_len", "noise_rate", "base_gap", "seed")
        if getattr(args, name) is not None}
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    log = generate(cfg)
    data.write_events(log, args.out, header_lines(cfg, cfg.seed))
    print(f"wrote {log.n_events} events ({log.n_users} users, "
          f"{log.n_items} items) to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    log = data.ingest(args.data, columns=args.columns, delimiter=args.delimiter)
    log.validate()
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    hdr = [f"tsrec {__version__}", f"source={args.data}"]
    data.write_events(log, f"{prefix}.events.csv", hdr)
    data.write_id_map(log.user_raw, f"{prefix}.users.map", hdr)
    data.write_id_map(log.item_raw, f"{prefix}.items.map", hdr)
    print(f"ingested {log.n_events} events; wrote {prefix}.events.csv and id maps")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve_model_config(args)
    log = data.ingest(args.data)
    log = data.filter_cold_start(log, cfg.min_item_count)
    p_min = cfg.p_min if cfg.p_min is not None else data.default_p_min(log)
    hist = evaluation.interval_histogram(log, p_min, item=args.item)
    body = {
        "stats": {
            "users": log.n_users, "items": log.n_items, "interactions": log.n_events,
            "avg_interactions_per_user": evaluation.avg_interactions(log),
            "repeat_ratio_pct": 100.0 * evaluation.repeat_ratio(log),
            "jaccard_pct": 100.0 * evaluation.jaccard_repeat_similarity(log),
            "p_min": p_min,
        },
        "interval_histogram": {str(k): v for k, v in sorted(hist.items())},
    }
    resolved = dataclasses.replace(cfg, p_min=p_min)
    out = args.out or "analysis.json"
    write_json_report(out, resolved, cfg.seed, body)
    print(json.dumps(body["stats"], indent=2, sort_keys=True))
    if args.plot:
        _plot_histogram(hist, args.plot, "repeat interval bin", "count")
        print(f"histogram plot written to {args.plot}")
    print(f"analysis written to {out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _resolve_model_config(args)
    provider, resolved = _build_provider(args.data, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hdr = header_lines(resolved, resolved.seed)
    log = provider.log
    data.write_events(log, out_dir / "events.filtered.csv", hdr)
    data.write_id_map(log.user_raw, out_dir / "users.map", hdr)
    data.write_id_map(log.item_raw, out_dir / "items.map", hdr)
    data.write_rtim_cache(provider.rtim, out_dir / "rtim.cache", hdr)
    counts = {}
    for segment in ("train", "val", "test"):
        instances = provider.instances(segment)
        data.write_instances(instances, out_dir / f"instances.{segment}.tsv", hdr)
        counts[segment] = len(instances)
    with open(out_dir / "config.resolved", "w", encoding="utf-8") as f:
        for line in hdr:
            f.write(f"# {line}\n")
        for key, value in sorted(dataclasses.asdict(resolved).items()):
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            f.write(f"{key}={value}\n")
    print(f"prepared {counts} instances in {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_model_config(args)
    provider, resolved = _build_provider(args.data, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def log_fn(rec):
        print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}  "
              f"val_hr10 {rec['val_hr10']:.4f}  val_ndcg10 {rec['val_ndcg10']:.4f}")

    model, result = train(resolved, provider, log_fn=log_fn)
    meta = header_dict(resolved, resolved.seed)
    meta.update({"p_min": provider.p_min, "best_epoch": result.best_epoch,
                 "epochs_run": result.epochs_run})
    save_checkpoint(out_dir / "checkpoint.tsrec", model, meta)
    write_history(result.history, out_dir / "history.jsonl", meta)
    print(f"trained {result.epochs_run} epochs (best epoch {result.best_epoch}); "
          f"checkpoint and history in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    provider, resolved = _build_provider(args.data, model.cfg)
    if provider.log.n_users != model.n_users or provider.log.n_items != model.n_items:
        raise ValueError(
            f"dataset/checkpoint mismatch: rebuilt vocab ({provider.log.n_users} users, "
            f"{provider.log.n_items} items) vs checkpoint ({model.n_users}, {model.n_items})")
    instances = provider.instances("test")
    negatives = args.negatives if args.negatives is not None else model.cfg.test_negatives
    seed = args.eval_seed if args.eval_seed is not None else model.cfg.seed
    report = evaluation.evaluate_ranking(model, provider, instances, negatives,
                                         seed=seed, threads=model.cfg.threads)
    body = {"metrics": report.as_dict(), "negatives": negatives, "eval_seed": seed}
    if args.with_poprec:
        pop = pop_rec_baseline(provider.split.train)
        pop_report = evaluation.evaluate_ranking(pop, provider, instances, negatives,
                                                 seed=seed)
        body["poprec"] = pop_report.as_dict()
    write_json_report(args.out, resolved, seed, body)
    print(json.dumps(body["metrics"], indent=2, sort_keys=True))
    print(f"evaluation written to {args.out}")
    return 0


def cmd_probe(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    provider, resolved = _build_provider(args.data, model.cfg)
    grid = list(range(0, args.grid_max + 1))
    if args.user is not None and args.item is not None:
        pairs = [(args.user, args.item)]
    else:
        pairs = _top_repeat_pairs(provider, args.auto_pairs)
    curves = []
    for user, item in pairs:
        curve = evaluation.probe_interval_response(model, provider, user, item, grid)
        curves.append(((user, item), curve))
    with open(args.out, "w", encoding="utf-8") as f:
        for line in header_lines(resolved, resolved.seed):
            f.write(f"# {line}\n")
        f.write("user\titem\tbin\tscore\n")
        for (user, item), curve in curves:
            for b, s in curve:
                f.write(f"{user}\t{item}\t{b}\t{s:.10f}\n")
    if args.plot:
        _plot_curves(curves, args.plot)
        print(f"curve plot written to {args.plot}")
    print(f"probed {len(curves)} pair(s); curves written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .data import FeatureProvider, chronological_split, filter_cold_start
    from .model import batch_loss

    cfg = ModelConfig(d=args.d, seq_len=args.seq_len, matrix_m=args.matrix_m,
                      matrix_n=args.matrix_n, conv_channels=4, dropout=0.0,
                      min_item_count=2, bin_max=32, seed=args.seed)
    synth_cfg = SyntheticConfig(users=8, items=12, events_per_user=14,
                                periodic_items=4, periodic_per_user=1,
                                period_slots=4, jitter_slots=1, block_len=3,
                                noise_rate=0.2, seed=args.seed)
    log = filter_cold_start(generate(synth_cfg), cfg.min_item_count)
    provider = FeatureProvider(chronological_split(log, cfg.split_fractions), cfg)
    instances = provider.instances("train")[:args.batch_rows]
    rng = np.random.default_rng(args.seed)
    negs = {i: data.sample_negatives(provider.exclusion[ins.user_id], 1, rng,
                                     provider.log.n_items)
            for i, ins in enumerate(instances)}
    batch = provider.assemble_instances(instances, negs)
    model = Model(cfg, provider.log.n_users, provider.log.n_items,
                  rng=np.random.default_rng(cfg.seed))

    report = finite_difference_check(
        lambda: batch_loss(model.forward_scores(batch), batch.label),
        model.store, h=args.h, max_coords_per_param=args.coords_per_param,
        rng=np.random.default_rng(cfg.seed))
    failed = False
    for name in sorted(report.per_param):
        err = report.per_param[name]
        status = "PASS" if err < args.tolerance else "FAIL"
        failed |= status == "FAIL"
        print(f"{status}  {name:28s} rel_err={err:.3e}")
    print(f"{'FAIL' if failed else 'PASS'}  max relative error "
          f"{report.max_rel_error:.3e} over {report.coords_checked} coordinates "
          f"(tolerance {args.tolerance:g})")
    return 1 if failed else 0


def _top_repeat_pairs(provider, k: int) -> list:
    """(user, item) pairs with the most repeat consumptions, ties by ids."""
    scored = []
    for (u, i), occ in provider._occ.items():
        if len(occ) >= 2:
            scored.append((-(len(occ) - 1), u, i))
    scored.sort()
    return [(u, i) for _, u, i in scored[:k]]


def _plot_histogram(hist: dict, path, xlabel: str, ylabel: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    keys = sorted(hist)
    ax.bar(keys, [hist[k] for k in keys])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_curves(curves, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for (user, item), curve in curves:
        bins = [b for b, _ in curve]
        scores = [s for _, s in curve]
        ax.plot(bins, scores, marker="o", label=f"u{user}/i{item}")
    ax.set_xlabel("target interval bin")
    ax.set_ylabel("score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsrec",
                                     description="repeat-aware sequential recommender")
    parser.add_argument("--version", action="version", version=f"tsrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic event log")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    for name, typ in (("users", int), ("items", int), ("events_per_user", int),
                      ("periodic_items", int), ("periodic_per_user", int),
                      ("period_slots", int), ("jitter_slots", int), ("block_len", int),
                      ("noise_rate", float), ("base_gap", int), ("seed", int)):
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, dest=name)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="normalize a raw event file and persist id maps")
    p.add_argument("--data", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--columns", default="user_id,item_id,timestamp")
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("analyze", help="dataset statistics, overlap, interval histogram")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--item", type=int, help="restrict the histogram to one item")
    p.add_argument("--plot", help="write the histogram as a vector image")
    _add_model_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("prepare", help="materialize instance files and the matrix cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train and write checkpoint + history")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics with new/repeat breakdown")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="metrics.json")
    p.add_argument("--negatives", type=int)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--with-poprec", action="store_true",
                   help="also evaluate the popularity baseline")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="interval-response curve for (user, item) pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="probe.tsv")
    p.add_argument("--user", type=int)
    p.add_argument("--item", type=int)
    p.add_argument("--auto-pairs", type=int, default=10,
                   help="probe the top-K repeat pairs when --user/--item not given")
    p.add_argument("--grid-max", type=int, default=16)
    p.add_argument("--plot")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=4, dest="seq_len")
    p.add_argument("--matrix-m", type=int, default=2, dest="matrix_m")
    p.add_argument("--matrix-n", type=int, default=4, dest="matrix_n")
    p.add_argument("--batch-rows", type=int, default=4)
    p.add_argument("--coords-per-param", type=int, default=6)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

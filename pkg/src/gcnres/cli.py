"""Command line front end.

Exit codes: 0 success, 1 usage or invalid input, 2 output conflict (file
exists and ``--force`` not given), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import save_checkpoint
from .errors import GcnError, NumericalError
from .graph import dataset_summary, save_dataset, symmetric_normalize
from .metrics import score
from .training import prepare_dataset, run_seeds, cs_config, tricks_label

log = logging.getLogger("gcnres")

EXIT_OK, EXIT_USAGE, EXIT_CONFLICT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ConflictError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list[int]:
    """``0..9`` (inclusive range) or a comma separated list."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _claim(out: Path, names, force: bool):
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise ConflictError(f"output exists: {out / clash[0]} (use --force to overwrite)")


def _pct(mean, std):
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def _write_metrics(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric_name", "value"])
        for epoch, split, name, value in result.records():
            w.writerow([epoch, split, name, repr(float(value))])


SUMMARY_FIELDS = ["model", "tricks", "test_mean", "test_std", "valid_mean", "valid_std"]


def _write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r["model"], r["tricks"]] + [repr(float(r[k])) for k in SUMMARY_FIELDS[2:]])


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg):
    out = Path(args.out)
    _claim(out, ["dataset.gcnt", "summary.txt"], args.force)
    ds = prepare_dataset(cfg)
    save_dataset(ds, out / "dataset.gcnt")
    text = dataset_summary(ds, cfg.dataset.metric)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _walk_configs(cfg):
    from .embeddings import SkipGramConfig, WalkConfig

    e = cfg.embedding
    return (WalkConfig(e.p, e.q, e.walk_length, e.walks_per_node, e.seed),
            SkipGramConfig(e.dim, e.window, e.negatives, e.epochs, e.lr))


def cmd_pretrain(args, cfg):
    from .embeddings import pretrain_embeddings, probe_accuracy

    out = Path(args.out)
    _claim(out, ["embeddings.gcne"], args.force)
    ds = prepare_dataset(cfg)
    walk, sg = _walk_configs(cfg)
    emb = pretrain_embeddings(ds, walk, sg, out / "embeddings.gcne")
    print(f"provenance: {emb.provenance}")
    if args.probe:
        print(f"probe accuracy (embeddings): {probe_accuracy(emb, ds, seed=walk.seed):.4f}")
        print(f"probe accuracy (features): {probe_accuracy(ds.features, ds, seed=walk.seed):.4f}")
    return EXIT_OK


def cmd_train(args, cfg):
    from . import plotting
    from .tricks import save_predictions

    out = Path(args.out)
    seeds = args.seeds or cfg.experiment.seeds
    names = ["summary.csv", "learning_curves.png"]
    for s in seeds:
        names += [f"metrics_seed{s}.csv", f"model_seed{s}.gcnw", f"predictions_seed{s}.gcnp"]
    _claim(out, names, args.force)
    ds = prepare_dataset(cfg)
    summary = run_seeds(cfg, seeds, ds)
    for run in summary.runs:
        _write_metrics(out / f"metrics_seed{run.seed}.csv", run.result)
    run0 = summary.runs[0]
    if cfg.tricks.embedding:
        log.info("input width %d -> %d (embedding adds %d columns)", ds.features.shape[1],
                 run0.input_dim, run0.input_dim - ds.features.shape[1]
                 - (ds.num_classes if cfg.tricks.label_usage else 0))
    for run in summary.runs:
        save_checkpoint(out / f"model_seed{run.seed}.gcnw", run.result.best_state)
        save_predictions(run.base_probs, out / f"predictions_seed{run.seed}.gcnp",
                         f"{summary.model} seed={run.seed} best_epoch={run.result.best_epoch}")
    _write_summary(out / "summary.csv", [summary.row()])
    plotting.learning_curves(summary, out / "learning_curves.png")
    tm, ts = summary.test_mean_std
    vm, vs = summary.valid_mean_std
    print(f"{summary.model} {summary.tricks} over {len(seeds)} seed(s)")
    print(f"test: {_pct(tm, ts)}, valid: {_pct(vm, vs)}")
    return EXIT_OK


def cmd_postprocess(args, cfg):
    from .tricks import CorrectSmoothConfig, correct_and_smooth, cs_label_nodes
    from .tricks import load_predictions, save_predictions

    out = Path(args.out)
    _claim(out, ["corrected.gcnp"], args.force)
    ds = prepare_dataset(cfg)
    probs, prov = load_predictions(args.predictions)
    if probs.shape != (ds.num_nodes, ds.num_classes):
        raise UsageError(
            f"prediction matrix {probs.shape} does not match dataset "
            f"({ds.num_nodes} nodes, {ds.num_classes} classes)"
        )
    cs = cs_config(cfg) or CorrectSmoothConfig()
    adj = symmetric_normalize(ds.graph)
    known = cs_label_nodes(ds, cs.label_set)
    log.info("C&S %s label set: %d nodes", cs.label_set, known.size)
    after = correct_and_smooth(probs, ds, cs, adj)
    save_predictions(after, out / "corrected.gcnp", f"C&S_{cs.label_set} of: {prov}")
    metric = cfg.dataset.metric
    print(f"label set ({cs.label_set}): {known.size} nodes")
    for split in ("valid", "test"):
        idx = ds.split(split)
        b = score(np.log(np.clip(probs, 1e-300, None)), ds.labels, idx, metric)
        a = score(np.log(np.clip(after, 1e-300, None)), ds.labels, idx, metric)
        print(f"{split}: before {100 * b:.2f}, after {100 * a:.2f}, delta {100 * (a - b):+.2f}")
    return EXIT_OK


TRICK_TOKENS = {"emb", "cs_v2", "cs_v3", "flag", "label_usage"}


def row_config(cfg, row: str):
    """Experiment config for one ablation row such as ``gcn_res+cs_v2``."""
    tokens = [t.strip().lower() for t in row.split("+") if t.strip()]
    if not tokens or tokens[0] not in ("gcn", "gcn_res"):
        raise UsageError(f"ablation row {row!r} must start with gcn or gcn_res")
    unknown = set(tokens[1:]) - TRICK_TOKENS
    if unknown:
        raise UsageError(f"unknown tricks in row {row!r}: {sorted(unknown)}")
    t = set(tokens[1:])
    if {"cs_v2", "cs_v3"} <= t:
        raise UsageError(f"row {row!r} lists two C&S variants")
    cs = "v2" if "cs_v2" in t else "v3" if "cs_v3" in t else "none"
    tricks = replace(cfg.tricks, embedding="emb" in t, cs=cs, flag="flag" in t,
                     label_usage="label_usage" in t)
    return replace(cfg, model=replace(cfg.model, type=tokens[0]), tricks=tricks)


def _markdown(rows, metric):
    lines = [f"| Model | Tricks | Test {metric} | Valid {metric} |", "|---|---|---|---|"]
    for r in rows:
        if r.get("error"):
            lines.append(f"| {r['model']} | {r['tricks']} | failed: {r['error']} | |")
        else:
            lines.append(f"| {r['model']} | {r['tricks']} | {_pct(r['test_mean'], r['test_std'])} "
                         f"| {_pct(r['valid_mean'], r['valid_std'])} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg):
    from . import plotting

    out = Path(args.out)
    row_names = cfg.ablation.rows or [cfg.model.type]
    row_cfgs = [row_config(cfg, r) for r in row_names]
    seeds = args.seeds or cfg.experiment.seeds
    _claim(out, ["ablation.csv", "ablation.md", "ablation.png"], args.force)
    ds = prepare_dataset(cfg)
    rows = []
    for name, rc in zip(row_names, row_cfgs):
        try:
            summary = run_seeds(rc, seeds, ds)
            row = summary.row()
        except (GcnError, FloatingPointError) as exc:
            log.error("row %s failed: %s", name, exc)
            model = "GCN_res" if rc.model.type == "gcn_res" else "GCN"
            row = {"model": f"{model}({rc.model.layers})", "tricks": tricks_label(rc),
                   "test_mean": float("nan"), "test_std": float("nan"),
                   "valid_mean": float("nan"), "valid_std": float("nan"), "error": str(exc)}
        rows.append(row)
        if "error" not in row:
            print(f"{row['model']:<12} {row['tricks']:<22} test {_pct(row['test_mean'], row['test_std'])}"
                  f"  valid {_pct(row['valid_mean'], row['valid_std'])}")
    _write_summary(out / "ablation.csv", rows)
    table = _markdown(rows, cfg.dataset.metric)
    (out / "ablation.md").write_text(table)
    plotting.ablation_chart(rows, out / "ablation.png", cfg.dataset.metric)
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate or ingest a dataset and write the GCNT container"),
    "pretrain": (cmd_pretrain, "pre-train random-walk embeddings into a GCNE file"),
    "train": (cmd_train, "train over the config seeds; write metrics, checkpoints, predictions"),
    "postprocess": (cmd_postprocess, "apply Correct & Smooth to a GCNP prediction file"),
    "ablate": (cmd_ablate, "run every ablation row and emit a comparison table"),
}


def build_parser():
    p = _Parser(prog="gcnres", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "pretrain":
            sp.add_argument("--probe", action="store_true", help="report a linear-probe accuracy")
        if name in ("train", "ablate"):
            sp.add_argument("--seeds", type=parse_seeds, help="e.g. 0..9 or 0,3,5")
        if name == "postprocess":
            sp.add_argument("--predictions", required=True, help="GCNP prediction file")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = cfgmod.load(args.config)
        return COMMANDS[args.command][0](args, cfg)
    except ConflictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except NumericalError as exc:
        where = f" at epoch {exc.epoch}" if getattr(exc, "epoch", None) else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, GcnError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

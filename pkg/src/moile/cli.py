"""``moile`` command line: gen, train, report, spectrum, embed-dump.

Exit codes: 0 success, 1 validation or I/O error, 2 numerical abort.
``MOILE_THREADS`` caps the number of worker processes used by ``train``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bench import SETUPS, TaskStream, generate_stream
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .ctc import assign_batch
from .metrics import AccuracyMatrix, average_accuracy, forgetting_measure
from .numcore import ContractError, svd
from .trainer import (
    VARIANT_ORDER,
    NumericalAbort,
    RunRecord,
    load_checkpoint,
    run,
    save_checkpoint,
    write_router_trace,
)

log = logging.getLogger("moile")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def stream_path(root, setup: str, order: int, seed: int) -> Path:
    return Path(root) / "streams" / f"{setup}_o{order}_s{seed}.jsonl"


def record_path(root, setup: str, order: int, seed: int, variant: str) -> Path:
    return Path(root) / "records" / f"{setup}_o{order}_s{seed}_{variant}.json"


def write_echo(out_dir, argv, cfg: ExperimentConfig | None = None) -> Path:
    """Command line plus the fully resolved config, enough to rerun."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# argv: " + " ".join(argv)]
    if cfg is not None:
        lines += cfg.to_lines()
    path = out / "config.echo.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _experiment(args) -> ExperimentConfig:
    text = Path(args.config).read_text() if args.config else ""
    extra = "\n".join(args.set or [])
    return parse_config(text + "\n" + extra, args.config or "<args>")


# -- gen ------------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    cfg = _experiment(args)
    setups = SETUPS if args.all else (cfg.setup,)
    out = Path(cfg.output_dir)
    for setup in setups:
        for order in cfg.orders:
            for seed in cfg.seeds:
                s = generate_stream(setup, order, seed, cfg.episodes_per_task, cfg.eval_per_task)
                path = s.write_jsonl(stream_path(out, setup, order, seed))
                print(f"{path}\t{len(s.tasks)} tasks\t{s.digest()[:12]}")
    write_echo(out, argv, cfg)
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _load_or_generate(cfg: ExperimentConfig, order: int, seed: int, generate: bool) -> TaskStream:
    path = stream_path(cfg.output_dir, cfg.setup, order, seed)
    if path.exists():
        return TaskStream.read_jsonl(path)
    if not generate:
        raise FileNotFoundError(f"{path} missing; run 'moile gen' first or pass --generate")
    s = generate_stream(cfg.setup, order, seed, cfg.episodes_per_task, cfg.eval_per_task)
    s.write_jsonl(path)
    return s


def _train_one(job) -> tuple[str, str, float]:
    cfg, order, seed, variant, generate, extras = job
    stream = _load_or_generate(cfg, order, seed, generate)
    tc = cfg.train_config(variant, seed)
    out = record_path(cfg.output_dir, cfg.setup, order, seed, variant)
    try:
        record, model, state = run(stream, tc)
    except NumericalAbort as exc:
        if exc.record is not None:
            exc.record.write(out)
        return str(out), exc.record.status if exc.record else str(exc), float("nan")
    record.write(out)
    if extras:
        ck = out.with_name(out.stem + ".ckpt.json")
        save_checkpoint(ck, model, state, tc)
        write_router_trace(model, stream, state, out.with_name(out.stem + ".routes.csv"))
    return str(out), record.status, record.wall_clock


def workers() -> int:
    try:
        n = int(os.environ.get("MOILE_THREADS", "1"))
    except ValueError:
        raise ConfigError("MOILE_THREADS must be an integer") from None
    return max(1, n)


def cmd_train(args, argv) -> int:
    cfg = _experiment(args)
    write_echo(cfg.output_dir, argv, cfg)
    jobs = [(cfg, o, s, v, args.generate, not args.no_checkpoint)
            for o in cfg.orders for s in cfg.seeds for v in cfg.variants]
    # streams are written before fan-out so workers never race on them
    for o in cfg.orders:
        for s in cfg.seeds:
            _load_or_generate(cfg, o, s, args.generate)
    n = min(workers(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    code = EXIT_OK
    for path, status, secs in results:
        print(f"{path}\t{status}\t{secs:.1f}s")
        if status != "ok":
            code = EXIT_NUMERIC
    return code


# -- report ---------------------------------------------------------------------

def _collect(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(q for q in p.rglob("*.json")
                          if not q.name.endswith((".timing.json", ".ckpt.json")))
        else:
            out.append(p)
    if not out:
        raise ConfigError("no record files given")
    return out


def row_order(variants) -> list[str]:
    rank = {v: i for i, v in enumerate(VARIANT_ORDER)}
    return sorted(set(variants), key=lambda v: (rank.get(v, -1), v))


def summarize(records: list[RunRecord]) -> dict:
    """``{variant: {order: (AA list, FM list)}}`` over seeds."""
    T = {len(r.accuracy) for r in records}
    if len(T) != 1:
        raise ConfigError(f"records disagree on task count: {sorted(T)}")
    table: dict = {}
    for r in records:
        m = AccuracyMatrix(r.accuracy)
        cell = table.setdefault(r.variant, {}).setdefault(r.stream["order"], ([], []))
        cell[0].append(average_accuracy(m))
        cell[1].append(forgetting_measure(m))
    return table


def format_table(table: dict, metric: int, sep: str = " | ") -> list[str]:
    orders = sorted({o for cells in table.values() for o in cells})
    head = ["Method", *(f"Order{o}" for o in orders), "Avg"]
    lines = [sep.join(head)]
    for v in row_order(table):
        vals = [float(np.mean(table[v][o][metric])) * 100 if o in table[v] else float("nan")
                for o in orders]
        avg = float(np.nanmean(vals))
        lines.append(sep.join([v, *(f"{x:.2f}" for x in vals), f"{avg:.2f}"]))
    return lines


def cmd_report(args, argv) -> int:
    from . import plotting

    paths = _collect(args.records)
    records = [RunRecord.read(p) for p in paths]
    table = summarize(records)
    out = Path(args.out)
    write_echo(out, argv)
    for name, metric in (("AA", 0), ("FM", 1)):
        print(f"# {name} (%)")
        for line in format_table(table, metric):
            print(line)
    traj = out / "first_task_trajectory.csv"
    curves: dict[str, list] = {}
    with open(traj, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "order", "seed", "after_task", "accuracy"])
        for r in records:
            ys = [row[0] for row in r.accuracy]
            for i, a in enumerate(ys, start=1):
                w.writerow([r.variant, r.stream["order"], r.stream["seed"], i, a])
            curves.setdefault(r.variant, []).append(ys)
    print(f"# trajectory\t{traj}")
    fig = plotting.plot_trajectories({v: np.mean(c, axis=0) for v, c in curves.items()},
                                     out / "first_task_trajectory.png")
    print(f"# figure\t{fig}")
    with_pref = [r for r in records if r.router_preference]
    if with_pref:
        r = with_pref[0]
        fig = plotting.plot_router_preference(r.router_preference, out / "router_preference.png")
        print(f"# figure\t{fig}")
    return EXIT_OK


# -- spectrum / embed-dump ---------------------------------------------------------

def adapter_spectra(model) -> dict[str, np.ndarray]:
    out = {}
    for li, layer in enumerate(model.layers):
        for level, experts in (("token", layer.token_experts), ("task", layer.task_experts)):
            for i, ad in enumerate(experts):
                out[f"L{li}.{level}{i}"] = svd(ad.weight()).S[: ad.rank]
    return out


def energy_share(s: np.ndarray, p: int) -> float:
    s2 = np.asarray(s) ** 2
    total = s2.sum()
    return float(s2[:p].sum() / total) if total > 0 else 1.0


def cmd_spectrum(args, argv) -> int:
    from . import plotting

    model, _, tc = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    write_echo(out, argv)
    spectra = adapter_spectra(model)
    p = -(-tc.r // 2)
    path = out / "spectrum.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["adapter", "index", "sigma"])
        for name, s in spectra.items():
            for i, v in enumerate(s, start=1):
                w.writerow([name, i, repr(float(v))])
    shares = [energy_share(s, p) for s in spectra.values()]
    print(f"adapters\t{len(spectra)}")
    print(f"top{p}_energy_mean\t{np.mean(shares):.4f}")
    print(f"csv\t{path}")
    print(f"figure\t{plotting.plot_spectrum(spectra, out / 'spectrum.png', p)}")
    return EXIT_OK


def cmd_embed_dump(args, argv) -> int:
    stream = TaskStream.read_jsonl(args.stream)
    out = Path(args.out)
    write_echo(out.parent, argv)
    state = None
    if args.checkpoint:
        _, state, _ = load_checkpoint(args.checkpoint)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = len(stream.tasks[0].eval[0].embedding)
        w.writerow(["task", "task_name", "episode", "cluster", *(f"e{j}" for j in range(dim))])
        for t, task in enumerate(stream.tasks, start=1):
            emb = np.stack([ep.embedding for ep in task.eval])
            labels = assign_batch(state, emb) if state is not None and state.initialized else [-1] * len(emb)
            for i, (row, c) in enumerate(zip(emb, labels)):
                w.writerow([t, task.spec.name, i, int(c), *(repr(float(x)) for x in row)])
    print(f"csv\t{out}")
    return EXIT_OK


# -- entry ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moile", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat dotted-key config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen", help="write benchmark streams as JSON-Lines")
    with_config(p)
    p.add_argument("--all", action="store_true", help="every setup, not just bench.setup")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train every (order, seed, variant) and write RunRecords")
    with_config(p)
    p.add_argument("--generate", action="store_true", help="generate missing streams")
    p.add_argument("--no-checkpoint", action="store_true", help="skip checkpoints and route traces")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="AA/FM tables, trajectory CSV and figures")
    p.add_argument("records", nargs="+", help="record files or directories")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("spectrum", help="singular values of every adapter in a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="spectrum")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("embed-dump", help="fused embeddings and cluster labels as CSV")
    p.add_argument("stream")
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="embeddings.csv")
    p.set_defaults(func=cmd_embed_dump)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, ["moile", *argv])
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

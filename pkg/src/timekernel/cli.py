"""Command-line entry point: every experiment is a seeded, file-based subcommand.

Each run writes its artifacts plus a ``manifest.json`` (the run manifest) into
an output directory.  The directory defaults to ``./runs/<subcommand>`` and can
be redirected with ``--out-dir`` or the ``TIMEKERNEL_OUTPUT_DIR`` environment
variable (the flag wins).

Exit codes: 0 success, 2 usage error, 3 input/data/checkpoint error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .data import TASKS, generate, load_jsonl, task_manifest, write_jsonl
from .embeddings import EMBEDDER_NAMES, export_gram, export_phi_matrix
from .kernels import (
    KERNELS,
    PERIODIC_KERNELS,
    claim1_bound,
    eigenfunction_residual,
    eigenvalue,
    mc_approximation_study,
    truncation_decay,
)
from .model import ModelConfig, export_attention
from .streams import derive_seed
from .training import OptimConfig, load_checkpoint, model_from_checkpoint, save_checkpoint, train
from .validation import CheckpointError, ConfigError, InputError, NumericalError

__all__ = ["main", "build_parser", "UsageError", "EXIT_OK", "EXIT_USAGE", "EXIT_INPUT", "EXIT_NUMERICAL"]

log = logging.getLogger("timekernel")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4
OUTPUT_ENV = "TIMEKERNEL_OUTPUT_DIR"

# Columns whose values depend on the machine rather than on (flags, seed, inputs).
_VOLATILE_COLUMNS = ("seconds",)


class UsageError(Exception):
    """Flags are individually valid but do not form a usable combination."""


# ---------------------------------------------------------------- file output


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    _atomic_write(path, buf.getvalue())


def write_matrix_csv(path: Path, grid: np.ndarray, matrix: np.ndarray) -> None:
    """One row per grid time: a ``t`` column followed by the matrix columns ``0..n-1``."""
    matrix = np.atleast_2d(matrix)
    columns = ["t"] + [str(j) for j in range(matrix.shape[1])]
    rows = [dict(zip(columns, [t, *r])) for t, r in zip(grid, matrix)]
    write_csv(path, rows, columns)


def write_json(path: Path, payload) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def artifact_digest(path: Path) -> str:
    """sha256 of a file's deterministic content.

    For CSV files the wall-clock columns are dropped before hashing, so two
    runs with the same flags and seed produce the same digest.
    """
    data = Path(path).read_bytes()
    if Path(path).suffix == ".csv":
        rows = list(csv.reader(io.StringIO(data.decode("utf-8"))))
        if rows:
            keep = [i for i, c in enumerate(rows[0]) if c not in _VOLATILE_COLUMNS]
            data = "\n".join(",".join(r[i] for i in keep) for r in rows).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def write_manifest(out_dir: Path, args: argparse.Namespace, outputs: list[Path], started: float, extra=None) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "subcommand": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "artifacts": {p.name: artifact_digest(p) for p in outputs},
        "wall_time_seconds": time.perf_counter() - started,
    }
    if extra:
        manifest.update(extra)
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def _output_dir(args) -> Path:
    base = args.out_dir or os.environ.get(OUTPUT_ENV) or str(Path("runs") / args.command)
    out = Path(base)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- parsing helpers


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    if min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            return start + step * np.arange(n)
        values = np.array([float(x) for x in text.split(",") if x.strip()])
        if values.size == 0:
            raise ValueError
        return values
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use start:stop:step or a comma list") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    started = time.perf_counter()
    task = _make_task(args)
    ds = generate(task, args.seed)
    out = _output_dir(args)
    paths = []
    for split, seqs in zip(("train", "valid", "test"), ds):
        p = out / f"{split}.jsonl"
        write_jsonl(p, seqs)
        paths.append(p)
    write_manifest(out, args, paths, started, {"task": task_manifest(task)})
    print(f"wrote {sum(map(len, ds))} sequences to {out}")
    return EXIT_OK


def cmd_kernel_approx(args) -> int:
    started = time.perf_counter()
    spec = KERNELS[args.kernel](t_max=args.t_max)
    seeds = [derive_seed(args.seed, f"kernel-approx.rep{i}") for i in range(args.seeds)]
    study = mc_approximation_study(spec, args.d_list, seeds=seeds, grid_step=args.grid_step)
    rows = []
    for row in study:
        b = claim1_bound(spec.sigma_p2, args.bound_t_max, args.eps, row["d"])
        rows.append({**row, "bound": b.value, "bound_raw": b.raw})
    out = _output_dir(args)
    path = out / "kernel_approx.csv"
    write_csv(path, rows)
    write_manifest(
        out,
        args,
        [path],
        started,
        {"sigma_p2": spec.sigma_p2, "sigma_p": math.sqrt(spec.sigma_p2), "bound_t_max": args.bound_t_max},
    )
    for r in rows:
        print(f"d={r['d']:6d} mean_sup={r['mean_sup_error']:.5f} max_sup={r['max_sup_error']:.5f} bound={r['bound']:.5f}")
    return EXIT_OK


def cmd_mercer_check(args) -> int:
    started = time.perf_counter()
    pspec = PERIODIC_KERNELS[args.kernel]()
    rows = [
        {
            "j": j,
            "c_j": pspec.coeff(j),
            "c_j_quadrature": eigenvalue(pspec, j, quad_points=args.quad_points),
            "residual": eigenfunction_residual(pspec, j, quad_points=args.quad_points),
        }
        for j in range(1, args.jmax + 1)
    ]
    trunc = truncation_decay(pspec, list(range(1, args.jmax + 1)))
    out = _output_dir(args)
    p1, p2 = out / "residuals.csv", out / "truncation.csv"
    write_csv(p1, rows)
    write_csv(p2, trunc)
    write_manifest(out, args, [p1, p2], started)
    print(f"{args.kernel}: c_1 = {rows[0]['c_j_quadrature']:.5f}, max residual = {max(r['residual'] for r in rows):.3e}")
    print(f"truncation sup-error at d=1: {trunc[0]['sup_error']:.5f}, d={args.jmax}: {trunc[-1]['sup_error']:.5f}")
    return EXIT_OK


def _make_task(args):
    overrides = {
        k: getattr(args, k)
        for k in ("n_train", "n_valid", "n_test", "seq_len")
        if getattr(args, k, None) is not None
    }
    return TASKS[args.task](**overrides)


def _load_data(args):
    """Training data from ``--data-dir`` JSONL files, else from the synthetic task."""
    if args.data_dir:
        d = Path(args.data_dir)
        splits = []
        for name in ("train", "valid", "test"):
            p = d / f"{name}.jsonl"
            if not p.exists():
                raise InputError(f"missing {p}")
            splits.append(load_jsonl(p, vocab_size=args.vocab_size))
        vocab = args.vocab_size or 1 + max(int(s.events.max()) for split in splits for s in split if len(s))
        return splits, vocab, {"data_dir": str(d)}
    task = _make_task(args)
    return list(generate(task, args.seed)), task.vocab_size, {"task": task_manifest(task)}


def model_config_from_args(args, vocab_size: int, param: str | None = None, value: int | None = None) -> ModelConfig:
    """Map CLI flags onto a :class:`ModelConfig`; rejects flag combinations that do not apply."""
    k, d = args.k, args.d
    if param == "k":
        k = value
    elif param == "d":
        d = value
    emb = args.embedder
    mercer_only = [f for f, v in (("--k", k), ("--no-intercept", args.no_intercept), ("--tied", args.tied),
                                  ("--train-frequencies", args.train_frequencies)) if v]
    if emb != "mercer" and mercer_only:
        raise UsageError(f"{', '.join(mercer_only)} only applies to --embedder mercer, not {emb}")
    params: dict = {}
    if emb == "mercer":
        params["k"] = 5 if k is None else k
        params["jmax"] = 8 if d is None else d
        params["intercept"] = not args.no_intercept
        params["tied"] = args.tied
        params["train_frequencies"] = args.train_frequencies
    elif d is not None:
        params["d"] = d
    try:
        return ModelConfig(
            vocab_size=vocab_size,
            event_dim=args.event_dim,
            embedder=emb,
            embedder_params=params,
            num_blocks=args.blocks,
            num_heads=args.heads,
            interaction=args.interaction,
            hidden_dim=args.hidden_dim,
            max_seq_len=args.max_seq_len,
            n_neg=args.n_neg,
            dropout=args.dropout,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def optim_config_from_args(args) -> OptimConfig:
    try:
        return OptimConfig(
            learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    started = time.perf_counter()
    (tr, va, te), vocab, data_info = _load_data(args)
    cfg = model_config_from_args(args, vocab)
    result = train(cfg, optim_config_from_args(args), tr, va, te, seed=args.seed)
    out = _output_dir(args)
    ckpt_path, epochs_path = out / "checkpoint.tkc", out / "epochs.csv"
    metrics_path, cfg_path = out / "metrics.json", out / "model.cfg"
    save_checkpoint(ckpt_path, result.checkpoint)
    write_csv(epochs_path, result.history, ["epoch", "train_loss", "valid_metric", "seconds"])
    metrics = {
        "best_epoch": result.checkpoint.epoch,
        "valid": result.valid_report.to_dict(),
        "test": result.test_report.to_dict() if result.test_report else None,
    }
    write_json(metrics_path, metrics)
    _atomic_write(cfg_path, result.model.config.to_kv())
    write_manifest(out, args, [ckpt_path, epochs_path, metrics_path, cfg_path], started, data_info)
    rep = result.test_report or result.valid_report
    print(f"{cfg.embedder}: best epoch {result.checkpoint.epoch}, accuracy {rep.accuracy:.4f}, hit@10 {rep.hit_at_10:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    if args.param == "k" and args.embedder != "mercer":
        raise UsageError("--param k only applies to --embedder mercer")
    if getattr(args, args.param) is not None:
        raise UsageError(f"--{args.param} is set by the sweep; drop the flag")
    (tr, va, te), vocab, data_info = _load_data(args)
    optim = optim_config_from_args(args)
    configs = [model_config_from_args(args, vocab, args.param, v) for v in args.values]
    rows = []
    for value, cfg in zip(args.values, configs):
        for r in range(args.repeat):
            # Repeat r shares its seed across values so the comparison is paired.
            run_seed = derive_seed(args.seed, f"sweep.repeat{r}")
            res = train(cfg, optim, tr, va, te, seed=run_seed)
            rep = res.test_report or res.valid_report
            rows.append({"param": args.param, "value": value, "repeat": r, "seed": run_seed,
                         "best_epoch": res.checkpoint.epoch, **rep.to_dict()})
            log.info("%s=%s repeat %d: accuracy %.4f", args.param, value, r, rep.accuracy)
    metrics = [c for c in rows[0] if c not in ("param", "value", "repeat", "seed", "best_epoch")]
    summary = []
    for value in args.values:
        group = [row for row in rows if row["value"] == value]
        entry = {"param": args.param, "value": value, "runs": len(group)}
        for m in metrics:
            arr = np.array([g[m] for g in group], dtype=float)
            entry[f"{m}_mean"] = float(arr.mean())
            entry[f"{m}_std"] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        summary.append(entry)
    out = _output_dir(args)
    p1, p2 = out / "sweep_runs.csv", out / "sweep_summary.csv"
    write_csv(p1, rows)
    write_csv(p2, summary)
    write_manifest(out, args, [p1, p2], started, data_info)
    for s in summary:
        print(f"{args.param}={s['value']}: accuracy {s['accuracy_mean']:.4f} +/- {s['accuracy_std']:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    started = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    out = _output_dir(args)
    grid = args.grid
    if args.what == "attention":
        seq = _attention_sequence(args, model.config.vocab_size)
        if np.any(grid < 0):
            raise InputError("attention grid holds offsets after the last event and must be >= 0")
        weights = export_attention(model, seq, seq.times[-1] + grid)
        rows = [{"offset": g, **{f"e{j}": w for j, w in enumerate(r)}} for g, r in zip(grid, weights)]
        path = out / "attention.csv"
        write_csv(path, rows)
    else:
        fn = export_phi_matrix if args.what == "phi" else export_gram
        path = out / f"{args.what}.csv"
        write_matrix_csv(path, grid, fn(model.embedder, grid))
    write_manifest(out, args, [path], started, {"config_hash": model.config.hash()})
    print(f"wrote {path}")
    return EXIT_OK


def _attention_sequence(args, vocab_size: int):
    if args.sequences:
        seqs = load_jsonl(args.sequences, vocab_size=vocab_size)
    else:
        seqs = generate(TASKS[args.task](), args.seed).test
    if not 0 <= args.index < len(seqs):
        raise InputError(f"--index {args.index} out of range for {len(seqs)} sequences")
    seq = seqs[args.index]
    if len(seq) == 0:
        raise InputError("cannot export attention for an empty sequence")
    if seq.events.max() >= vocab_size:
        raise InputError(f"sequence uses event id {seq.events.max()} >= checkpoint vocab {vocab_size}")
    return seq


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed for every random stream (default 0)")
    p.add_argument("--out-dir", default=None, help=f"output directory (overrides ${OUTPUT_ENV})")


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=sorted(TASKS), default="gap-rule")
    p.add_argument("--n-train", type=_positive_int, default=None)
    p.add_argument("--n-valid", type=_positive_int, default=None)
    p.add_argument("--n-test", type=_positive_int, default=None)
    p.add_argument("--seq-len", type=_positive_int, default=None)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    _add_task_flags(p)
    p.add_argument("--data-dir", default=None, help="directory with train/valid/test.jsonl (replaces --task)")
    p.add_argument("--vocab-size", type=_positive_int, default=None)
    p.add_argument("--embedder", choices=EMBEDDER_NAMES, default="mercer")
    p.add_argument("--k", type=_positive_int, default=None, help="Mercer: number of base frequencies")
    p.add_argument(
        "--d", type=_positive_int, default=None,
        help="Mercer: Fourier degree per frequency; Bochner: frequency samples; posenc: vector size",
    )
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--tied", action="store_true")
    p.add_argument("--train-frequencies", action="store_true")
    p.add_argument("--event-dim", type=_positive_int, default=32)
    p.add_argument("--hidden-dim", type=_positive_int, default=64)
    p.add_argument("--blocks", type=_positive_int, default=1)
    p.add_argument("--heads", type=_positive_int, default=1)
    p.add_argument("--interaction", choices=("linear", "mlp_relu"), default="mlp_relu")
    p.add_argument("--max-seq-len", type=_positive_int, default=8)
    p.add_argument("--n-neg", type=_positive_int, default=100)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=_positive_int, default=256)
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--patience", type=_positive_int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timekernel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/valid/test JSONL files")
    _add_common(p)
    _add_task_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("kernel-approx", help="Monte-Carlo random-feature error versus the concentration bound")
    _add_common(p)
    p.add_argument("--kernel", choices=sorted(KERNELS), default="gaussian")
    p.add_argument("--d-list", type=_int_list, default=[64, 256, 1024, 4096])
    p.add_argument("--seeds", type=_positive_int, default=20)
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--t-max", type=float, default=4.0, help="largest time difference on the error grid")
    p.add_argument("--eps", type=float, default=0.5, help="error level for the bound column")
    p.add_argument("--bound-t-max", type=float, default=1.0, help="time range used in the bound column")
    p.set_defaults(func=cmd_kernel_approx)

    p = sub.add_parser("mercer-check", help="Fourier eigenfunction residuals and truncation decay")
    _add_common(p)
    p.add_argument("--kernel", choices=sorted(PERIODIC_KERNELS), default="triangle")
    p.add_argument("--jmax", type=_positive_int, default=31)
    p.add_argument("--quad-points", type=_positive_int, default=512)
    p.set_defaults(func=cmd_mercer_check)

    p = sub.add_parser("train", help="train one next-event model")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per value per repeat and aggregate")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--param", choices=("d", "k"), required=True)
    p.add_argument("--values", type=_int_list, required=True)
    p.add_argument("--repeat", type=_positive_int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="write embedding, Gram or attention matrices from a checkpoint")
    _add_common(p)
    p.add_argument("--what", choices=("phi", "gram", "attention"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=parse_grid, default=parse_grid("0:10:0.5"),
                   help="time grid (phi/gram) or offsets after the last event (attention)")
    p.add_argument("--sequences", default=None, help="JSONL file holding the sequence for attention export")
    p.add_argument("--index", type=int, default=0, help="sequence index for attention export")
    p.add_argument("--task", choices=sorted(TASKS), default="periodic",
                   help="synthetic task used when --sequences is absent")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"timekernel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"timekernel {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, CheckpointError, ConfigError, OSError) as exc:
        print(f"timekernel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

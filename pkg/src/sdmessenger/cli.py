"""Command-line entry point: ``sdmessenger {gen-data,train,eval,sweep,report}``.

Exit codes: 0 success, 2 configuration or user error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

from .config import RunConfig, load_config_file
from .datagen import PRESETS, build_corpus, load_manifest, make_config
from .errors import CheckpointError, ConfigError, ContractError, ManifestError, NumericalError

log = logging.getLogger("sdmessenger")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
CONFIG_FILE = "config.txt"
METRICS_CSV, METRICS_TXT = "metrics.csv", "metrics.txt"
DIAGNOSTICS = "diagnostics.json"
SWEEP_CSV, SWEEP_PLOT = "sweep.csv", "sweep.png"
SWEEP_AXES = {"alpha": float, "patch_size": int}
USER_ERRORS = (ConfigError, ManifestError, CheckpointError, ContractError, FileNotFoundError)


class UserError(Exception):
    """Problem with the invocation itself, reported with exit code 2."""


def set_deterministic(enabled: bool):
    import torch

    torch.use_deterministic_algorithms(enabled)


# ---------------------------------------------------------------------------
# configuration from files and flags
# ---------------------------------------------------------------------------


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    flag_keys = {
        "preset": "preset", "corpus": "corpus", "alpha": "alpha", "l2u_patch_size": "patch_size",
        "iters": "total_iters", "batch_size": "batch_size", "lr": "lr_init", "seed": "seed",
        "checkpoint_every": "checkpoint_every", "split": "eval_split",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "deterministic", False):
        out["deterministic"] = "true"
    return out


def run_config_from_args(args) -> RunConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    values.update(_overrides(args))
    cfg = RunConfig.from_values(values)
    if not cfg.corpus:
        raise ConfigError("no corpus given (use --corpus or corpus= in the config file)")
    return cfg


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def write_diagnostics(run_dir: Path, exc: NumericalError) -> Path:
    path = run_dir / DIAGNOSTICS
    payload = {"error": str(exc), **{k: v for k, v in exc.diagnostics.items()}}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def execute_run(cfg: RunConfig, run_dir: str | Path, until: int | None = None):
    """Train into ``run_dir`` (resuming if it holds checkpoints), then evaluate.

    Returns the MetricReport, or None when stopped early by ``until``.
    """
    from .dataio import CorpusTensors
    from .metrics import evaluate
    from .training import latest_checkpoint, load_checkpoint, train

    run_dir = Path(run_dir)
    set_deterministic(cfg.deterministic)
    data = CorpusTensors(load_manifest(cfg.corpus))
    snapshot = cfg.to_text()
    cfg_path = run_dir / CONFIG_FILE
    if cfg_path.exists() and cfg_path.read_text() != snapshot:
        raise UserError(f"{run_dir} already holds a run with a different config; pick a fresh --out")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(snapshot)

    state = None
    ckpt = latest_checkpoint(run_dir)
    if ckpt is not None:
        state = load_checkpoint(ckpt)
        log.info("resuming %s at iteration %d", run_dir, state.iteration)
    try:
        state = train(cfg.train, data, run_dir=run_dir, state=state, until=until)
    except NumericalError as exc:
        exc.diagnostics["diagnostics_path"] = str(write_diagnostics(run_dir, exc))
        raise
    if state.iteration < cfg.train.total_iters:
        return None
    report = evaluate(state.model, data, split=cfg.eval_split, seed=cfg.train.seed)
    (run_dir / METRICS_CSV).write_text(report.to_csv())
    (run_dir / METRICS_TXT).write_text(report.to_text())
    return report


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    report = execute_run(cfg, args.out, until=args.until)
    if report is None:
        print(f"stopped at iteration {args.until}; rerun the same command to resume")
    else:
        print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import CorpusTensors
    from .metrics import evaluate
    from .training import latest_checkpoint, load_checkpoint

    run_dir = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(run_dir)
    if ckpt is None or not ckpt.is_file():
        raise UserError(f"no checkpoint found under {run_dir}")
    corpus = args.corpus
    if corpus is None:
        if not (run_dir / CONFIG_FILE).is_file():
            raise UserError(f"{run_dir} has no {CONFIG_FILE}; pass --corpus")
        corpus = RunConfig.from_text((run_dir / CONFIG_FILE).read_text(), str(run_dir / CONFIG_FILE)).corpus
    set_deterministic(args.deterministic)
    state = load_checkpoint(ckpt)
    report = evaluate(state.model, CorpusTensors(load_manifest(corpus)), split=args.split or "test",
                      seed=state.config.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_CSV).write_text(report.to_csv())
        (out / METRICS_TXT).write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    kwargs = {k: v for k, v in dict(size=args.size, num_classes=args.classes, labeled=args.labeled,
                                     unlabeled=args.unlabeled, test=args.test).items() if v is not None}
    cfg = make_config(args.out, args.preset, domains=args.domains, seed=args.seed or 0, **kwargs)
    path = build_corpus(cfg)
    index = load_manifest(path)
    print(f"wrote {path} ({', '.join(f'{k}={v}' for k, v in index.counts().items())})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _format_value(axis: str, value) -> str:
    return repr(float(value)) if SWEEP_AXES[axis] is float else str(int(value))


def parse_sweep_values(axis: str, text: str) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    try:
        values = [SWEEP_AXES[axis](v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: cannot parse {text!r} as {SWEEP_AXES[axis].__name__} list") from None
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    if len(set(values)) != len(values):
        raise ConfigError("sweep values must be distinct")
    return values


def _sweep_member(values: dict[str, str], run_dir: str) -> dict:
    """Run one sweep point; failures come back as a status instead of raising."""
    try:
        report = execute_run(RunConfig.from_values(values), run_dir)
        return {"status": "ok", **{f"mean_{k}": v for k, v in report.mean.items()}}
    except NumericalError as exc:
        return {"status": f"numeric: {exc}"}
    except (UserError, *USER_ERRORS) as exc:
        return {"status": f"error: {exc}"}


SWEEP_COLUMNS = ("value", "status", "mean_dice", "mean_jaccard", "mean_asd", "mean_hd95", "run_dir")


def cmd_sweep(args) -> int:
    base = run_config_from_args(args)
    axis = args.axis
    values = parse_sweep_values(axis, args.values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for v in values:
        member = base.to_values()
        member[axis] = _format_value(axis, v)
        # validate every point before launching anything
        RunConfig.from_values(member)
        jobs.append((member, str(out / f"{axis}={_format_value(axis, v)}")))

    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(args.parallel, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_sweep_member, *zip(*jobs)))
    else:
        results = [_sweep_member(m, d) for m, d in jobs]

    rows = []
    for v, (_, run_dir), res in zip(values, jobs, results):
        rows.append({"value": _format_value(axis, v), "run_dir": Path(run_dir).name,
                     **{c: repr(res.get(c, math.nan)) for c in SWEEP_COLUMNS if c.startswith("mean_")},
                     "status": res["status"]})
        print(f"{axis}={rows[-1]['value']}: {res['status']}"
              + (f" dice={res['mean_dice']:.4f}" if res["status"] == "ok" else ""))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["axis", *SWEEP_COLUMNS], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"axis": axis, **r})
    (out / SWEEP_CSV).write_text(buf.getvalue())
    plot_sweep(out / SWEEP_CSV, out / SWEEP_PLOT)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC if any(
        r["status"].startswith("numeric") for r in rows) else EXIT_USER


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path):
    # no software/date metadata, so reruns write identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)


def read_sweep(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_sweep(csv_path: Path, png_path: Path):
    rows = read_sweep(csv_path)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [float(r["value"]) for r in rows]
    ys = [float(r["mean_dice"]) * 100 for r in rows]
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(rows[0]["axis"] if rows else "value")
    ax.set_ylabel("mean Dice (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, png_path)


def report_run(run_dir: Path) -> str:
    from .metrics import METRICS, MetricReport
    from .training import LOSS_LOG, read_loss_log

    log_path = run_dir / LOSS_LOG
    if not log_path.is_file():
        raise UserError(f"{run_dir}: no {LOSS_LOG}")
    history = read_loss_log(log_path)
    if not history:
        raise UserError(f"{log_path} holds no iterations")

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = [h[0] for h in history]
    ax.plot(it, [h[2] for h in history], label="supervised", lw=0.8)
    ax.plot(it, [h[3] for h in history], label="unsupervised", lw=0.8)
    ax.plot(it, [h[2] + h[3] for h in history], label="total", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    _save(fig, run_dir / "loss_curve.png")

    head = history[:20]
    lines = [f"run: {run_dir.name}",
             f"iterations: {len(history)} (last {history[-1][0]})",
             f"supervised loss: first-20 mean {sum(h[2] for h in head) / len(head):.6f}, final {history[-1][2]:.6f}",
             f"unsupervised loss: final {history[-1][3]:.6f}"]
    metrics_path = run_dir / METRICS_CSV
    if metrics_path.is_file():
        rep = MetricReport.from_csv(metrics_path.read_text())
        lines.append("mean: " + " ".join(f"{m}={rep.mean[m]:.6f}" for m in METRICS))
        lines.append(rep.to_text().rstrip("\n"))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        classes = list(rep.per_class)
        ax.bar([str(c) for c in classes], [rep.per_class[c]["dice"] * 100 for c in classes])
        ax.set_xlabel("class")
        ax.set_ylabel("Dice (%)")
        fig.tight_layout()
        _save(fig, run_dir / "metrics_bar.png")
    else:
        lines.append("metrics: none (run unfinished)")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    target = Path(args.dir)
    if not target.is_dir():
        raise UserError(f"{target} is not a directory")
    if (target / SWEEP_CSV).is_file():
        rows = read_sweep(target / SWEEP_CSV)
        parts = [f"sweep over {rows[0]['axis'] if rows else '?'}: {len(rows)} values"]
        for r in rows:
            parts.append(f"  {r['axis']}={r['value']} status={r['status']} mean_dice={float(r['mean_dice']):.6f}")
        plot_sweep(target / SWEEP_CSV, target / SWEEP_PLOT)
        for r in rows:
            run = target / r["run_dir"]
            if (run / "loss.csv").is_file():
                try:
                    parts.append(report_run(run).rstrip("\n"))
                except UserError as exc:
                    parts.append(f"{r['run_dir']}: {exc}")
        summary = "\n".join(parts) + "\n"
    else:
        summary = report_run(target)
    (target / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    return p


def _run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--corpus", help="corpus directory (holding manifest.tsv)")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--alpha", type=float, help="U2L blend weight")
    p.add_argument("--l2u-patch-size", type=int, help="L2U patch side s (0 disables pasting)")
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--split", choices=("test", "labeled"), help="split evaluated at the end")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="sdmessenger", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--preset", choices=PRESETS, default="semimdg")
    p.add_argument("--size", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--labeled", type=int)
    p.add_argument("--unlabeled", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--domains", help="train domains / test domains, e.g. 0,1,2/3")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train (or resume) a run")
    p.add_argument("--out", required=True, help="run directory")
    _run_flags(p)
    p.add_argument("--until", type=int, help="stop after this iteration; rerun to resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a run's checkpoint")
    p.add_argument("run", help="run directory")
    p.add_argument("--checkpoint", help="explicit checkpoint file (default: latest)")
    p.add_argument("--corpus", help="corpus to evaluate on (default: the run's)")
    p.add_argument("--split", choices=("test", "labeled"))
    p.add_argument("--out", help="directory for metrics.csv / metrics.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="one run per value of alpha or patch_size")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--parallel", type=int, default=0, help="worker processes (default: sequential)")
    _run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="plots and summary for a run or sweep directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        where = exc.diagnostics.get("diagnostics_path")
        print(f"numeric failure: {exc}" + (f" (diagnostics: {where})" if where else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())

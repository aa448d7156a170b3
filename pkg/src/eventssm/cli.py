"""``eventssm`` command-line tool.

Subcommands: ``train``, ``eval``, ``synth``, ``inspect``, ``gradcheck``,
``ablation``. Exit status is 0 only when the requested outputs were fully
written; configuration and data problems exit with 2, failed checks with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import training
from .checkpoint import CheckpointError, load_train_state, save_train_state
from .config import ConfigError, RunConfig
from .events import (
    EventStreamError, SynthConfig, event_count_stats, gen_synthetic_timing_task, load_dataset,
    save_dataset, two_significant,
)
from .model import init_weights
from .ssm import DiscretizationMode

log = logging.getLogger("eventssm")

CONFIG_ECHO = "config.echo"
METRICS = "metrics.ndjson"
REPORT = "report.txt"
CKPT_RE = re.compile(r"^ckpt_(\d+)$")


class CLIError(Exception):
    """User-facing failure; ``code`` becomes the exit status."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _load_data(root) -> dict:
    if root is None:
        raise CLIError("no dataset given (set data.root or pass --data)")
    try:
        return load_dataset(root)
    except FileNotFoundError as exc:
        raise CLIError(f"dataset not found: {exc}") from None
    except EventStreamError as exc:
        raise CLIError(f"malformed dataset {root}: {exc}") from None


def _dataset_channels(data: dict) -> int:
    js = {s.num_channels for streams in data.values() for s in streams}
    if len(js) != 1:
        raise CLIError(f"dataset mixes channel counts {sorted(js)}")
    return js.pop()


def _dataset_classes(data: dict) -> int:
    return 1 + max(s.hard_label for streams in data.values() for s in streams)


def checkpoints(run_dir: Path) -> dict[int, Path]:
    out = {}
    for p in run_dir.iterdir() if run_dir.is_dir() else ():
        m = CKPT_RE.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return dict(sorted(out.items()))


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _select_split(splits, select_on_test: bool) -> str | None:
    if "val" in splits:
        return "val"
    if select_on_test and "test" in splits:
        return "test"
    return None


def _format_report(records: list[dict], selection: str | None) -> str:
    last_epoch = max(r["epoch"] for r in records)
    lines = [f"epochs completed: {last_epoch}", "", "final metrics:"]
    for r in records:
        if r["epoch"] == last_epoch:
            lines.append(
                f"  {r['split']:<6} loss={r['loss']:.6f} accuracy={r['accuracy']:.4f} "
                f"events/s={r['events_per_second']:.0f}"
            )
    if selection is None:
        lines.append("\nmodel selection: none (no validation split; see --select-on-test)")
    else:
        cands = [r for r in records if r["split"] == selection]
        best = max(cands, key=lambda r: (r["accuracy"], -r["epoch"]))
        lines.append(
            f"\nmodel selection on '{selection}': epoch {best['epoch']} "
            f"(accuracy={best['accuracy']:.4f}, checkpoint ckpt_{best['epoch']})"
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    out_dir = Path(args.out) if args.out else None
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.data:
        overrides.append(f"data.root={json.dumps(args.data)}")
    if args.select_on_test:
        overrides.append("data.select_on_test=true")

    config_path = args.config
    if args.resume and config_path is None and out_dir is not None and (out_dir / CONFIG_ECHO).exists():
        config_path = out_dir / CONFIG_ECHO
    cfg = RunConfig.load(config_path, overrides)
    if out_dir is None:
        out_dir = Path(cfg.run["out_dir"])
    cfg.run["out_dir"] = str(out_dir)

    data = _load_data(cfg.data["root"])
    train_split = cfg.data["train_split"]
    if not data.get(train_split):
        raise CLIError(f"dataset has no samples in split '{train_split}'")
    mcfg = cfg.model_config(_dataset_channels(data), _dataset_classes(data))
    cfg.model = mcfg.to_dict()
    tcfg = cfg.train_config()
    eval_sets = {k: v for k, v in sorted(data.items()) if k != train_split}
    selection = _select_split(eval_sets, cfg.data["select_on_test"])

    existing = checkpoints(out_dir)
    metrics_path = out_dir / METRICS
    if args.resume and existing:
        last = max(existing)
        state, _, start = load_train_state(existing[last])
        kept = [r for r in _read_metrics(metrics_path) if r["epoch"] <= start]
        _write_text(metrics_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
        log.info("resuming from %s (epoch %d, step %d)", existing[last], start, state.step)
    else:
        if existing:
            raise CLIError(f"{out_dir} already holds checkpoints; pass --resume or pick another --out")
        out_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(tcfg.seed)
        state = training.TrainState.create(init_weights(mcfg, rng, tcfg.dtype), rng)
        start = 0
        metrics_path.write_text("")
        save_train_state(out_dir / "ckpt_0", state, cfg.to_dict(), 0)
    _write_text(out_dir / CONFIG_ECHO, cfg.echo())

    def on_epoch(st, epoch, records):
        with metrics_path.open("a") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
        save_train_state(out_dir / f"ckpt_{epoch}", st, cfg.to_dict(), epoch)
        log.info(
            "epoch %d: %s", epoch,
            "  ".join(f"{r.split} loss={r.loss:.4f} acc={r.accuracy:.4f}" for r in records),
        )

    training.fit(mcfg, tcfg, data[train_split], eval_sets, state, start + 1, on_epoch)
    records = _read_metrics(metrics_path)
    if not records:
        raise CLIError("no epochs were run (train.epochs is 0?)", code=1)
    _write_text(out_dir / REPORT, _format_report(records, selection))
    print(f"run directory: {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CLIError(f"checkpoint not found: {ckpt}")
    state, config, epoch = load_train_state(ckpt)
    cfg = RunConfig.from_dict(config)
    data = _load_data(args.data)
    streams = data.get(args.split, [])
    if not streams:
        raise CLIError(f"split '{args.split}' of {args.data} is empty")
    mcfg = cfg.model_config()
    j = _dataset_channels({args.split: streams})
    if j != mcfg.num_channels:
        raise CLIError(f"channel count mismatch: checkpoint expects J={mcfg.num_channels}, data has J={j}")
    labels = {s.hard_label for s in streams}
    if max(labels) >= mcfg.num_classes:
        raise CLIError(f"data has class {max(labels)} but the model has K={mcfg.num_classes} classes")
    record = training.evaluate(state.weights, streams, mcfg, cfg.train_config(), epoch, args.split, state.step)
    out = Path(args.output) if args.output else ckpt.with_name(f"eval_{ckpt.name}_{args.split}.json")
    _write_text(out, record.to_json() + "\n")
    print(record.to_json())
    return 0


def _default_means(k: int) -> list[float]:
    # 1 ms .. 4 ms, geometric; K=2 gives the default task
    return [1000.0 * 4.0 ** (i / max(k - 1, 1)) for i in range(k)]


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(
            num_channels=args.num_channels, num_classes=args.num_classes,
            events_per_sample=args.events, interval_means_us=args.interval_means or _default_means(args.num_classes),
            n_train=args.n_train, n_test=args.n_test, n_val=args.n_val,
        )
    except ValueError as exc:
        raise CLIError(f"invalid synthetic task: {exc}") from None
    splits = gen_synthetic_timing_task(cfg, np.random.default_rng(args.seed or 0))
    save_dataset(args.out, splits)
    print(f"wrote {sum(map(len, splits.values()))} samples to {args.out}")
    return 0


def inspect_report(data: dict) -> str:
    lines = [f"{'split':<10} {'samples':>8} {'median events':>14}"]
    for split, streams in sorted(data.items()):
        st = event_count_stats(streams)
        lines.append(f"{split:<10} {st['n']:>8} {two_significant(st['median']):>14}")
    lines += ["", f"{'split':<10} {'class':>5} {'n':>6} {'min':>8} {'median':>8} {'max':>8}"]
    for split, streams in sorted(data.items()):
        by_class: dict[int, list] = {}
        for s in streams:
            by_class.setdefault(s.hard_label, []).append(s)
        for k in sorted(by_class):
            st = event_count_stats(by_class[k])
            lines.append(
                f"{split:<10} {k:>5} {st['n']:>6} {two_significant(st['min']):>8} "
                f"{two_significant(st['median']):>8} {two_significant(st['max']):>8}"
            )
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    data = _load_data(args.data)
    if not data:
        raise CLIError(f"manifest in {args.data} lists no samples")
    print(inspect_report(data), end="")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.epsilon > 0:
        raise CLIError("--epsilon must be positive")
    rng = np.random.default_rng(args.seed or 0)
    ok = True
    lines = []
    for mode in args.modes:
        report = training.gradcheck_model(training.tiny_config(mode), rng, args.epsilon, args.threshold)
        ok &= report.passed
        name, err = report.worst
        lines.append(f"{report.mode:<16} {'PASS' if report.passed else 'FAIL'}  worst {err:.2e} ({name})")
        if args.verbose:
            lines += [f"    {k:<28} {v:.2e}" for k, v in report.errors.items()]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.output:
        _write_text(Path(args.output), text)
    return 0 if ok else 1


def cmd_ablation(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    synth, data_seed = cfg.synth_config()
    if args.seed is not None:
        data_seed = args.seed
    if len(args.seeds) < 2:
        raise CLIError("--seeds needs at least two values")
    mcfg = cfg.model_config(synth.num_channels, synth.num_classes)
    tcfg = cfg.train_config()
    rows = training.run_ablation(mcfg, tcfg, args.modes, args.seeds, synth, data_seed, log=log.info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / CONFIG_ECHO, cfg.echo())
    _write_text(out / "ablation.json", training.ablation_json(rows) + "\n")
    table = training.format_ablation(rows)
    _write_text(out / REPORT, table)
    print(table, end="")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _modes(text: str) -> str:
    try:
        return DiscretizationMode.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 = bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eventssm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. train.lr=1e-3 (repeatable)")
    t.add_argument("--data", help="dataset directory (overrides data.root)")
    t.add_argument("--out", help="run directory (overrides run.out_dir)")
    t.add_argument("--resume", action="store_true", help="continue from the latest ckpt_<epoch>")
    t.add_argument("--select-on-test", action="store_true",
                   help="allow model selection on the test split when no val split exists")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--output", help="metrics file (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic timing task")
    s.add_argument("--out", required=True)
    s.add_argument("--num-channels", type=int, default=16)
    s.add_argument("--num-classes", type=int, default=2)
    s.add_argument("--events", type=int, default=512, help="events per sample")
    s.add_argument("--interval-means", type=float, nargs="+", metavar="US",
                   help="mean inter-event interval per class, microseconds")
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-val", type=int, default=0)
    s.add_argument("--n-test", type=int, default=500)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", parents=[common], help="per-split and per-class event statistics")
    i.add_argument("data")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny model")
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--threshold", type=float, default=1e-3)
    g.add_argument("--modes", type=_modes, nargs="+", default=[m.value for m in DiscretizationMode])
    g.add_argument("--output", help="also write the report here")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablation", parents=[common], help="discretization ablation on the synthetic task")
    a.add_argument("--config", help="JSON run config (model/train/synth sections)")
    a.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--modes", type=_modes, nargs="+", default=["async", "zoh_unit_delta"])
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--out", required=True, help="output directory for report.txt and ablation.json")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command in ("train", "ablation") else logging.WARNING,
        format="%(message)s", stream=sys.stderr,
    )
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except CLIError as exc:
        print(f"eventssm {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointError) as exc:
        print(f"eventssm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

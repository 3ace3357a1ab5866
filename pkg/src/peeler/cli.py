"""Command-line entry point: gen-data, train, eval, sweep, inspect.

Delimited dataset files are UTF-8 text with one sample per line: the
feature values followed by an integer class label, separated by commas
(or tabs with ``--delimiter tab``). A non-numeric first line is treated
as a header.

Run directories default to ``$PEELER_OUT_ROOT/<command>-<config hash>``
(``runs/`` when the variable is unset).

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
abort, 5 run directory locked by another process.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, TrainConfig, build_dataset, build_split, dump_config, load_config
from .datasets import DataError, SyntheticSpec, generate_gaussian_mixture, write_delimited
from .episodes import EpisodeConfig
from .evaluation import AggregateReport, evaluate
from .optim import NumericalError, train

logger = logging.getLogger("peeler")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_LOCKED = 5

SWEEP_AXES = ("open_way", "eval_open_way", "eval_open_query_per_class", "way", "eval_way", "lam")


class LockedError(RuntimeError):
    pass


@contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out_dir} is in use (remove {lock} if no other run is active)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def default_out(command: str, config: TrainConfig) -> Path:
    root = Path(os.environ.get("PEELER_OUT_ROOT", "runs"))
    return root / f"{command}-{config.content_hash()[:12]}"


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _resolve_config(args, **extra) -> TrainConfig:
    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["base_seed"] = args.seed
    overrides.update(extra)
    return load_config(args.config, args.preset, **overrides)


def write_report(report: AggregateReport, out_dir: Path, header: dict) -> None:
    summary = {**header, **report.summary()}
    (out_dir / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "eval_episodes.jsonl", "w", encoding="utf-8") as fh:
        for r in report.episodes:
            fh.write(json.dumps(r.as_record()) + "\n")


# --- commands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.n_classes,
        dim=args.dim,
        samples_per_class=args.samples_per_class,
        center_scale=args.center_scale,
        within_std=args.within_std,
        seed=args.seed if args.seed is not None else 0,
    )
    ds = generate_gaussian_mixture(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_delimited(ds, out, "\t" if args.delimiter == "tab" else args.delimiter)
    print(f"wrote {out}: {ds.n_classes} classes, {ds.n_samples} samples, {ds.dim} features")
    return EXIT_OK


def run_training(config: TrainConfig, out_dir: Path, resume_doc: dict | None = None, until: int | None = None):
    dataset = build_dataset(config)
    split = build_split(config, dataset)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(config), encoding="utf-8")
    state = None
    if resume_doc is not None:
        state = ckpt.load_state(resume_doc, config, dataset, split)
    log_path = out_dir / "train_log.jsonl"
    mode = "a" if resume_doc is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log:

        def on_log(rec):
            log.write(json.dumps(rec) + "\n")
            log.flush()
            logger.info("episode %d lr %.2g loss %.4f", rec["episode"], rec["lr"], rec["total"])

        def on_checkpoint(st):
            ckpt.save_checkpoint(out_dir / "checkpoints" / f"ckpt_{st.episode:06d}.json", st, config)

        state = train(dataset, split, config, state=state, until=until, on_log=on_log, on_checkpoint=on_checkpoint)
    ckpt.save_checkpoint(out_dir / "checkpoint.json", state, config)
    return state, dataset, split


def cmd_train(args) -> int:
    resume_doc = None
    if args.resume:
        path = Path(args.resume)
        resume_doc = ckpt.read_checkpoint(path / "checkpoint.json" if path.is_dir() else path)
        if args.config or args.preset or args.set or args.seed is not None:
            config = _resolve_config(args)
            if config.training_hash() != resume_doc["training_hash"]:
                raise ConfigError("resume: config hash does not match the checkpoint's training config")
        else:
            config = ckpt.config_from_document(resume_doc)
    else:
        config = _resolve_config(args)
    resumed_dir = None
    if args.resume:
        # a run directory continues in place; a bare checkpoint file continues next to it
        resumed_dir = path if path.is_dir() else path.parent
        if resumed_dir.name == "checkpoints":
            resumed_dir = resumed_dir.parent
    out_dir = Path(args.out or resumed_dir or config.out_dir or default_out("train", config))
    with run_lock(out_dir):
        state, _, _ = run_training(config, out_dir, resume_doc, args.until)
    print(f"trained {state.episode} episodes; checkpoint: {out_dir / 'checkpoint.json'}")
    print(f"config hash {config.content_hash()}")
    return EXIT_OK


def eval_episode_config(config: TrainConfig) -> EpisodeConfig:
    e = config.resolved_eval
    return EpisodeConfig(e["way"], e["shot"], e["query_per_class"], e["open_way"], e["open_query_per_class"])


def run_eval(config: TrainConfig, doc: dict, out_dir: Path, base_seed: int, workers: int = 1, classes: str = "test"):
    dataset = build_dataset(config)
    split = build_split(config, dataset)
    state = ckpt.load_state(doc, config, dataset, split)
    if classes == "val":
        split = type(split)(split.train_classes, split.val_classes, split.val_classes)
    cfg = eval_episode_config(config)
    report = evaluate(
        state.model,
        dataset,
        split,
        cfg,
        n_episodes=config.eval_episodes,
        base_seed=base_seed,
        mode=config.mode,
        holdout_fraction=config.holdout_fraction,
        holdout_seed=config.base_seed,
        workers=workers,
    )
    header = {
        "checkpoint_episode": doc["episode"],
        "config_hash": config.content_hash(),
        "eval_seed": base_seed,
        "classes": classes,
        "episode_shape": cfg.__dict__,
    }
    write_report(report, out_dir, header)
    return report


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    doc = ckpt.read_checkpoint(path / "checkpoint.json" if path.is_dir() else path)
    stored = ckpt.config_from_document(doc)
    extra = {
        k: v
        for k, v in {
            "eval_episodes": args.episodes,
            "eval_way": args.way,
            "eval_shot": args.shot,
            "eval_open_way": args.open_way,
            "eval_open_query_per_class": args.open_query,
        }.items()
        if v is not None
    }
    overrides = _overrides(args.set)
    if args.config or args.preset:
        config = load_config(args.config, args.preset, **overrides, **extra)
        if config.training_hash() != doc["training_hash"]:
            raise ConfigError("eval: config does not match the checkpoint's training config")
    else:
        config = stored.replace(**overrides, **extra)
        if config.training_hash() != doc["training_hash"]:
            raise ConfigError("eval: overrides change the trained model's configuration")
    seed = args.seed if args.seed is not None else config.base_seed
    out_dir = Path(args.out or default_out("eval", config))
    with run_lock(out_dir):
        report = run_eval(config, doc, out_dir, seed, args.workers, args.classes)
    print(report.format())
    print(f"report: {out_dir / 'eval_summary.json'}")
    return EXIT_OK


def sweep_config(base: TrainConfig, axis: str, value, open_total: int | None = None) -> TrainConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid axes: {', '.join(SWEEP_AXES)}")
    ev = base.resolved_eval
    if axis == "open_way":
        # vary the training episodes only; evaluation keeps the base shape
        return base.replace(open_way=int(value), eval_open_way=ev["open_way"])
    if axis == "way":
        return base.replace(way=int(value), eval_way=None)
    if axis == "lam":
        return base.replace(lam=float(value))
    changes = {axis: int(value)}
    if axis == "eval_open_way" and open_total is not None:
        per = open_total // int(value)
        if per < 1:
            raise ConfigError(f"open total {open_total} is too small for {value} open classes")
        changes["eval_open_query_per_class"] = per
    return base.replace(**changes)


def run_sweep(base: TrainConfig, axis: str, values, out_dir: Path, open_total=None, workers: int = 1) -> list[dict]:
    rows = []
    trained: dict[str, dict] = {}
    for value in values:
        config = sweep_config(base, axis, value, open_total)
        key = config.training_hash()
        run_dir = out_dir / f"{axis}={value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        if key not in trained:
            run_training(config, run_dir)
            trained[key] = ckpt.read_checkpoint(run_dir / "checkpoint.json")
        report = run_eval(config, trained[key], run_dir, config.base_seed, workers)
        rows.append(
            {
                "axis": axis,
                "value": value,
                "accuracy": report.accuracy_mean,
                "accuracy_halfwidth": report.accuracy_halfwidth,
                "auroc": report.auroc_mean,
                "auroc_halfwidth": report.auroc_halfwidth,
                "eval_shape": config.resolved_eval,
            }
        )
    with open(out_dir / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    (out_dir / "sweep.tsv").write_text(format_sweep(rows), encoding="utf-8")
    return rows


def format_sweep(rows) -> str:
    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    lines = ["\t".join(["value", "accuracy", "acc_pm", "auroc", "auroc_pm"])]
    for r in rows:
        lines.append(
            "\t".join(
                [str(r["value"]), fmt(r["accuracy"]), fmt(r["accuracy_halfwidth"]), fmt(r["auroc"]), fmt(r["auroc_halfwidth"])]
            )
        )
    return "\n".join(lines) + "\n"


def _parse_values(text: str) -> list:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    return out


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; valid axes: {', '.join(SWEEP_AXES)}")
    base = _resolve_config(args)
    values = _parse_values(args.values)
    out_dir = Path(args.out or default_out(f"sweep-{args.axis}", base))
    with run_lock(out_dir):
        rows = run_sweep(base, args.axis, values, out_dir, args.open_total, args.workers)
    print(format_sweep(rows), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    doc = ckpt.read_checkpoint(path / "checkpoint.json" if path.is_dir() else path)
    n_params = sum(int(__import__("math").prod(p["shape"])) for p in doc["parameters"])
    print(f"format        {doc['format']}")
    print(f"episode       {doc['episode']}")
    print(f"base_seed     {doc['base_seed']}")
    print(f"config_hash   {doc['config_hash']}")
    print(f"mode          {doc['config']['mode']}")
    print(f"head          {doc['head']['kind']} (prototypes {doc['head']['prototype_source']}, "
          f"precisions {doc['head']['precision_source']})")
    print(f"adam steps    {doc['adam']['t']} (rejected {doc['adam']['rejected_steps']})")
    print(f"parameters    {n_params} values in {len(doc['parameters'])} tensors")
    for p in doc["parameters"]:
        print(f"  {p['name']:<22} {tuple(p['shape'])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peeler", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--preset", help="desk (default), paper-fewshot or paper-largescale")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="base seed")
        sp.add_argument("--out", help="run directory")

    g = sub.add_parser("gen-data", help="write a synthetic Gaussian-mixture dataset")
    g.add_argument("--n-classes", type=int, default=20)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--samples-per-class", type=int, default=200)
    g.add_argument("--center-scale", type=float, default=1.0)
    g.add_argument("--within-std", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--delimiter", default=",", help="',' or 'tab'")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic training")
    config_flags(t)
    t.add_argument("--resume", help="checkpoint file or run directory to continue from")
    t.add_argument("--until", type=int, help="stop after this many episodes (total)")
    t.add_argument("--workers", type=int, default=1, help="unused by training (single owner)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="repeated-episode evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--preset")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--seed", type=int, help="evaluation seed (default: the run's base seed)")
    e.add_argument("--out")
    e.add_argument("--episodes", type=int)
    e.add_argument("--way", type=int)
    e.add_argument("--shot", type=int)
    e.add_argument("--open-way", type=int)
    e.add_argument("--open-query", type=int, help="samples per open class")
    e.add_argument("--classes", choices=("test", "val"), default="test")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train/eval once per value of one config axis")
    config_flags(s)
    s.add_argument("--axis", required=True, help=f"one of {', '.join(SWEEP_AXES)}")
    s.add_argument("--values", required=True, help="comma list or inclusive range lo..hi")
    s.add_argument("--open-total", type=int, help="with axis eval_open_way: keep total open samples fixed")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LockedError as exc:
        print(f"locked: {exc}", file=sys.stderr)
        return EXIT_LOCKED


if __name__ == "__main__":
    sys.exit(main())

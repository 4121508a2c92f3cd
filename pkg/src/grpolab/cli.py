"""``grpolab`` command line: make-pool, sample, train, predict, score, eval, report.

Exit codes: 0 success, 2 usage or infeasible request, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from . import grpo, metrics, policy as pol, toyenv
from .config import ConfigError, RunConfig
from .parser import FormatSpec, parse_completion
from .rewards import (
    CollapseMonitor,
    RepetitionRewardConfig,
    hard_reward,
    nuanced_reward,
    repetition_reward,
)
from .sampler import InsufficientPoolError, SamplePlan, read_pool, split_disjoint, write_pool
from .sft import train_sft
from .vocab import LabelSet, LabelStats, label_stats, parse_label

log = logging.getLogger("grpolab")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
EMA_ALPHA = 0.95


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except OSError as e:
        raise CliError(f"cannot read config: {e}", EXIT_USAGE) from e
    return cfg.override(args.set or [])


def _read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as e:
                        raise CliError(f"{path}:{lineno}: {e}") from e
    except OSError as e:
        raise CliError(str(e)) from e
    return rows


def _read_items(path: str | Path):
    try:
        return read_pool(path)
    except OSError as e:
        raise CliError(str(e)) from e
    except ValueError as e:
        raise CliError(str(e)) from e


def write_metrics_csv(path: str | Path, rows: Sequence[dict], alpha: float = EMA_ALPHA, index: str = "step") -> None:
    """Raw columns followed by ``<name>_ema`` columns for every numeric series."""
    if not rows:
        return
    raw = [k for k in rows[0] if k != index]
    cols = {k: [float(r[k]) for r in rows] for k in raw}
    smoothed = {f"{k}_ema": _ema_skip_nan(v, alpha) for k, v in cols.items()}
    header = [index, *raw, *smoothed]
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, r in enumerate(rows):
            w.writerow([r[index], *(_num(cols[k][i]) for k in raw), *(_num(smoothed[k][i]) for k in smoothed)])
    tmp.replace(path)


def _ema_skip_nan(xs: list[float], alpha: float) -> list[float]:
    # NaN entries (e.g. no train loss before the first SFT epoch) are passed through.
    finite = [i for i, x in enumerate(xs) if not math.isnan(x)]
    out = [math.nan] * len(xs)
    if finite:
        for i, s in zip(finite, metrics.ema([xs[i] for i in finite], alpha)):
            out[i] = s
    return out


def _num(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------


def cmd_make_pool(args) -> int:
    cfg = _load_config(args)
    task = toyenv.gen_task(cfg.task.pool_size, cfg.task.d, cfg.task.seed)
    out = Path(args.output or cfg.io.pool)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pool(out, task.pool_items())
    print(f"wrote {len(task)} items to {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    pool = _read_items(cfg.io.pool)
    s = cfg.sampler
    plan = SamplePlan(s.sft_n, s.min_fraction, s.overrepresentation_penalty, s.seed)
    try:
        sft, rl = split_disjoint(pool, s.sft_n, s.rl_n, plan)
    except InsufficientPoolError as e:
        raise CliError(str(e), EXIT_USAGE) from e
    report = {}
    for name, sel in (("sft", sft), ("rl", rl)):
        counts = sel.label_counts()
        report[name] = {
            "n": len(sel),
            "target": sel.target,
            "counts": counts,
            "shortfall": {k: sel.target - c for k, c in counts.items() if c < sel.target},
        }
    out = Path(cfg.io.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pool(out / "sft.jsonl", sft)
    write_pool(out / "rl.jsonl", rl)
    _write_json(out / "coverage.json", report)
    cfg.dump(out / "config.ini")
    short = {k: v["shortfall"] for k, v in report.items() if v["shortfall"]}
    if short:
        print(f"coverage infeasible: every label needs >= {s.min_fraction:.0%} of each split", file=sys.stderr)
        for split, labels in short.items():
            for name, missing in labels.items():
                print(f"  {split}: {name} short by {missing}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(sft)} sft and {len(rl)} rl items to {out}")
    return EXIT_OK


def _heldout(cfg: RunConfig):
    return toyenv.gen_task(cfg.task.heldout_size, cfg.task.d, cfg.task.heldout_seed)


def _train_sft(cfg: RunConfig, run: Path) -> dict:
    items = _read_items(Path(cfg.io.data_dir) / "sft.jsonl")
    task = toyenv.task_from_pool(items)
    seqs = [toyenv.teacher_tokens(x, y) for x, y in zip(task.features, task.labels)]
    ckpt = run / "checkpoint.bin"

    def on_epoch(epoch, params, row):
        if cfg.io.checkpoint_every > 0 and epoch % cfg.io.checkpoint_every == 0:
            pol.save_checkpoint(ckpt, params, cfg.sft.seed, stage="sft", epoch=epoch)

    result = train_sft(cfg.sft, task.features, seqs, on_epoch=on_epoch)
    pol.save_checkpoint(run / "sft.bin", result.params, cfg.sft.seed, stage="sft", epoch=result.best_epoch)
    write_metrics_csv(run / "metrics.csv", result.log, index="epoch")
    held = _heldout(cfg)
    ev = grpo.evaluate_policy(result.params, held.features, held.labels)
    return {
        "stage": "sft",
        "checkpoint": str(run / "sft.bin"),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "heldout": {k: ev[k] for k in ("jaccard", "fail_rate", "length")},
    }


def make_reward_fn(cfg: RunConfig, stats: LabelStats | None = None):
    """Completion-level reward for the configured reward; returns (fn, monitor)."""
    kind = cfg.grpo.reward
    if kind == "hard":
        return (lambda c, y: hard_reward(c.parsed, y, cfg.hard)), None
    if kind == "repetition":
        rc = RepetitionRewardConfig(cfg.repetition.repeat_bonus, cfg.hard)
        return (lambda c, y: repetition_reward(c.parsed, c.text, y, rc)), None
    monitor = CollapseMonitor(cfg.nuanced.window_size)
    stats = stats if stats is not None else LabelStats.zeros()
    return (lambda c, y: nuanced_reward(c.parsed, y, stats, monitor, cfg.nuanced)), monitor


def _train_grpo(cfg: RunConfig, run: Path, resume: bool) -> dict:
    ref_path = Path(cfg.io.sft_checkpoint) if cfg.io.sft_checkpoint else None
    if ref_path is None or not ref_path.is_file():
        raise CliError(f"grpo stage needs an SFT checkpoint; io.sft_checkpoint={cfg.io.sft_checkpoint!r} not found")
    try:
        ref, _ = pol.load_checkpoint(ref_path)
    except ValueError as e:
        raise CliError(str(e)) from e
    items = _read_items(Path(cfg.io.data_dir) / "rl.jsonl")
    task = toyenv.task_from_pool(items)
    reward_fn, monitor = make_reward_fn(cfg, label_stats(task.labels))

    state_path = run / "state.npz"
    state = None
    if resume and state_path.is_file():
        state, extra = grpo.load_state(state_path)
        if monitor is not None and extra.get("monitor"):
            restored = CollapseMonitor.from_state(extra["monitor"])
            monitor.window, monitor.counts = restored.window, restored.counts
        log.info("resuming from step %d", state.step)

    def on_step(st: grpo.GrpoState, row: dict):
        every = cfg.io.checkpoint_every
        if every > 0 and st.step % every == 0:
            _checkpoint(st)

    def _checkpoint(st: grpo.GrpoState):
        extra = {"monitor": monitor.state()} if monitor is not None else {}
        grpo.save_state(state_path, st, **extra)
        pol.save_checkpoint(run / "checkpoint.bin", st.params, cfg.grpo.seed, stage="grpo", step=st.step)
        write_metrics_csv(run / "metrics.csv", st.history)

    state = grpo.train_grpo(ref, task.features, task.labels, reward_fn, cfg.grpo, state=state, on_step=on_step)
    _checkpoint(state)
    pol.save_checkpoint(run / "grpo.bin", state.params, cfg.grpo.seed, stage="grpo", step=state.step)
    held = _heldout(cfg)
    ev = grpo.evaluate_policy(state.params, held.features, held.labels)
    return {
        "stage": "grpo",
        "checkpoint": str(run / "grpo.bin"),
        "reference_policy": str(ref_path),
        "steps": state.step,
        "heldout": {k: ev[k] for k in ("jaccard", "fail_rate", "length")},
    }


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run = Path(cfg.io.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.dump(run / "config.ini")
    if args.stage == "sft":
        manifest = _train_sft(cfg, run)
    else:
        manifest = _train_grpo(cfg, run, args.resume)
    manifest["config"] = str(run / "config.ini")
    _write_json(run / "manifest.json", manifest)
    print(json.dumps(manifest["heldout"], sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    try:
        params, _ = pol.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        raise CliError(str(e)) from e
    items = _read_items(args.input)
    task = toyenv.task_from_pool(items)
    gen = pol.GenerationConfig(args.temperature, cfg.grpo.top_p, cfg.grpo.max_len)
    comps = pol.sample_batch(params, task.features, gen, np.random.default_rng(args.seed))
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for item, c in zip(items, comps):
            out.write(json.dumps({"id": item.id, "text": c.text}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _gold_labels(raw) -> tuple[LabelSet, list[str]]:
    names, bad = [], []
    for name in raw:
        lab = parse_label(name) if isinstance(name, str) else None
        if lab is None:
            bad.append(name)
        else:
            names.append(lab.name)
    return LabelSet.from_names(names), bad


def score_stream(inp: TextIO, out: TextIO, cfg: RunConfig, reward: str, stats: LabelStats, dialect: str) -> int:
    """One output object per input line, in order. Returns the number of lines read."""
    spec = FormatSpec.parse(dialect)
    monitor = CollapseMonitor(cfg.nuanced.window_size)
    n = 0
    for line in inp:
        n += 1
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not an object")
        except ValueError:
            out.write(json.dumps({"id": None, "error": "parse"}) + "\n")
            continue
        ident = obj.get("id")
        text, gold = obj.get("text"), obj.get("gold")
        if not isinstance(text, str) or not isinstance(gold, list):
            out.write(json.dumps({"id": ident, "error": "schema"}) + "\n")
            continue
        y, bad = _gold_labels(gold)
        if bad:
            out.write(json.dumps({"id": ident, "error": "gold_label", "labels": bad}) + "\n")
            continue
        parsed = parse_completion(text, spec)
        if reward == "hard":
            b = hard_reward(parsed, y, cfg.hard)
        else:
            b = nuanced_reward(parsed, y, stats, monitor, cfg.nuanced)
        row = {
            "id": ident,
            "valid": parsed.valid,
            "predicted": list(parsed.predicted.names()),
            "reward_total": b.total,
            "components": b.components,
        }
        out.write(json.dumps(row) + "\n")
    out.flush()
    return n


def cmd_score(args) -> int:
    cfg = _load_config(args)
    stats = LabelStats.zeros()
    if args.stats:
        stats = label_stats([item.labels for item in _read_items(args.stats)])
    score_stream(sys.stdin, sys.stdout, cfg, args.reward, stats, args.dialect or cfg.eval.dialect)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    label_set = args.labels or cfg.eval.labels
    spec = FormatSpec.parse(args.dialect or cfg.eval.dialect)
    preds = {}
    for row in _read_jsonl(args.predictions):
        if "id" not in row or not isinstance(row.get("text"), str):
            raise CliError(f"{args.predictions}: prediction rows need id and text")
        preds[str(row["id"])] = row["text"]
    golds = {item.id: item.labels for item in _read_items(args.gold)}
    if set(preds) != set(golds):
        only_p, only_g = len(set(preds) - set(golds)), len(set(golds) - set(preds))
        raise CliError(f"id mismatch: {only_p} ids only in predictions, {only_g} only in gold")
    ids = sorted(golds)
    parsed = [parse_completion(preds[i], spec) for i in ids]
    counts = metrics.confusion(parsed, [golds[i] for i in ids], metrics.LABEL_FILTERS[label_set])
    report = metrics.EvalReport.from_counts(counts)
    out = Path(args.out or cfg.io.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.jsonl").write_text("\n".join(report.jsonl_rows()) + "\n")
    (out / "per_category.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.metrics, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise CliError(str(e)) from e
    if not rows:
        raise CliError(f"{args.metrics}: no rows")
    index = "step" if "step" in rows[0] else next(iter(rows[0]))
    raw = [k for k in rows[0] if k != index and not k.endswith("_ema")]
    cols = args.columns.split(",") if args.columns else raw
    missing = [c for c in cols if c not in rows[0]]
    if missing:
        raise CliError(f"unknown column(s): {', '.join(missing)}", EXIT_USAGE)
    curves = [{index: r[index], **{c: float(r[c]) for c in cols}} for r in rows]
    if args.output:
        write_metrics_csv(args.output, curves, args.alpha, index=index)
    else:
        _print_csv(curves, args.alpha, index)
    return EXIT_OK


def _print_csv(rows, alpha, index):
    w = csv.writer(sys.stdout)
    cols = [k for k in rows[0] if k != index]
    smoothed = {c: _ema_skip_nan([r[c] for r in rows], alpha) for c in cols}
    w.writerow([index, *cols, *(f"{c}_ema" for c in cols)])
    for i, r in enumerate(rows):
        w.writerow([r[index], *(_num(r[c]) for c in cols), *(_num(smoothed[c][i]) for c in cols)])


# -- wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grpolab", description="SFT + GRPO toy pipeline, reward scoring and multilabel evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="INI run config (defaults apply to missing keys)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("make-pool", cmd_make_pool, "write a synthetic toy pool")
    sp.add_argument("-o", "--output")
    add("sample", cmd_sample, "balanced, disjoint SFT/RL selection from the pool")
    sp = add("train", cmd_train, "run the SFT or GRPO stage")
    sp.add_argument("--stage", choices=("sft", "grpo"), required=True)
    sp.add_argument("--resume", action="store_true", help="continue GRPO from the run's last state.npz")
    sp = add("predict", cmd_predict, "generate completions for pool items")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("-o", "--output")
    sp.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    sp.add_argument("--seed", type=int, default=0)
    sp = add("score", cmd_score, "score {id, text, gold} JSONL from stdin")
    sp.add_argument("--reward", choices=("hard", "nuanced"), default="nuanced")
    sp.add_argument("--stats", help="pool JSONL for label prevalence (default: zero prevalence)")
    sp.add_argument("--dialect", choices=[f.value for f in FormatSpec])
    sp = add("eval", cmd_eval, "micro/macro P/R/F1, fail rate and per-category F1")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--gold", required=True)
    sp.add_argument("--labels", choices=tuple(metrics.LABEL_FILTERS))
    sp.add_argument("--dialect", choices=[f.value for f in FormatSpec])
    sp.add_argument("--out")
    sp = add("report", cmd_report, "extract training curves with EMA columns")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--columns", help="comma-separated subset (default: all raw columns)")
    sp.add_argument("--alpha", type=float, default=EMA_ALPHA)
    sp.add_argument("-o", "--output")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())

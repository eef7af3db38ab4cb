"""Command-line entry points: gen-data, train, eval and inspect.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every artifact goes
under the directory given with --out.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

from .datagen import BenchmarkError, BenchmarkSpec, generate_benchmark, load_benchmark, write_benchmark
from .interpreter import CLOSE, CurriculumConstraints, Program, ProgramError, replay, var_index
from .kb import KBLoadError, format_value, value_sort_key
from .learning import PRESETS, TrainConfig, run_iml_reinforce
from .metrics import evaluate, prf1
from .model import load_checkpoint
from .search import beam_decode

logger = logging.getLogger("nsm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- config


def _coerce(name: str, text: str, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(kind, str)
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text.strip())
    except ValueError:
        raise UsageError(f"{name}: expected {kind.__name__}, got {text!r}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the preset, then the config file, then explicit flags."""
    values = dict(PRESETS[args.preset])
    if args.config:
        values.update(read_config_file(args.config))
    for f in fields(TrainConfig):
        flag = getattr(args, f"cfg_{f.name}", None)
        if flag is not None:
            values[f.name] = flag
    if args.mode == "iml-only":
        values["n_rl"] = 0
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("training hyperparameters (override preset and config file)")
    for f in fields(TrainConfig):
        kind = {"int": int, "float": float, "bool": bool}.get(f.type, f.type) if isinstance(f.type, str) else f.type
        flag = "--" + f.name.replace("_", "-")
        if kind is bool:
            group.add_argument(flag, dest=f"cfg_{f.name}", type=lambda s, n=f.name: _coerce(n, s, bool),
                               default=None, metavar="BOOL")
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", type=kind, default=None, metavar=kind.__name__.upper())


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = BenchmarkSpec(
        seed=args.seed,
        entities=args.entities,
        properties=args.properties,
        questions=args.questions,
        train_fraction=args.train_fraction,
        valid_fraction=args.valid_fraction,
    )
    kb, lexicon, splits = generate_benchmark(spec)
    out = write_benchmark(args.out, spec, kb, lexicon, splits)
    counts = {k: len(v) for k, v in splits.items()}
    print(json.dumps({"out": str(out), "triples": len(kb), **counts}, sort_keys=True))
    return EXIT_OK


def _require_benchmark(path):
    if not (Path(path) / "kb.tsv").exists():
        raise FileNotFoundError(f"no benchmark at {path} (run gen-data first)")
    return load_benchmark(path)


def _split(bench, name: str):
    if name not in bench.splits:
        raise FileNotFoundError(f"benchmark has no {name!r} split")
    return bench.questions(name)


def cmd_train(args) -> int:
    from .plotting import plot_complexity, plot_training_curves

    config = resolve_train_config(args)
    bench = _require_benchmark(args.data)
    train = _split(bench, "train")
    valid = bench.questions("valid") if "valid" in bench.splits else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"train_config": asdict(config), "data": str(args.data),
                                                 "workers": args.workers, "mode": args.mode}, indent=2,
                                                sort_keys=True) + "\n")
    start = time.time()
    model, cache, log = run_iml_reinforce(
        bench.kb, train, valid, config, workers=args.workers, checkpoint_dir=out / "checkpoints",
        log_path=out / "train_log.jsonl", resume=args.resume,
    )
    elapsed = time.time() - start
    summary = {"iterations": len(log), "seconds": round(elapsed, 1), "cache_coverage": cache.coverage(len(train)),
               "checkpoint": str(out / "checkpoints" / "final.npz")}
    report_dir = out / "report"
    if log:
        plot_training_curves(log, report_dir / "training_curves.png")
    if valid:
        report = evaluate(model, bench.kb, valid, config.eval_beam, workers=args.workers)
        report.write(report_dir, "valid")
        plot_complexity(report.per_complexity, report_dir / "valid_complexity.png", "valid split")
        summary["valid_avg_f1"] = report.avg_f1
    (report_dir).mkdir(parents=True, exist_ok=True)
    (report_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_model(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, extra, _ = load_checkpoint(path)
    return model, extra


def cmd_eval(args) -> int:
    from .plotting import plot_complexity

    model, _ = _load_model(args.checkpoint)
    bench = _require_benchmark(args.data)
    questions = _split(bench, args.split)
    report = evaluate(model, bench.kb, questions, args.beam, workers=args.workers)
    out = Path(args.out)
    report.write(out, args.split)
    plot_complexity(report.per_complexity, out / f"{args.split}_complexity.png", f"{args.split} split")
    sys.stdout.write(report.table())
    return EXIT_OK


def _show_set(values, limit: int = 4) -> str:
    items = sorted(values, key=value_sort_key)
    text = ", ".join(format_value(v) for v in items[:limit])
    if len(items) > limit:
        text += f", ... +{len(items) - limit}"
    return text


def annotate_program(states) -> list[str]:
    """One line per expression, with variable values in parentheses."""
    final = states[-1]
    store = final.store
    lines, current = [], []
    for tok in final.tokens:
        i = var_index(tok)
        current.append(f"{tok}({_show_set(store[tok])})" if i is not None and i < len(store) else tok)
        if tok == CLOSE:
            new_var = f"R{len(lines) + store.num_linked + 1}"
            lines.append(" ".join(current) + f"  =>  {new_var}({_show_set(store[new_var])})")
            current = []
    if current:
        lines.append(" ".join(current))
    return lines


def inspect_question(model, kb, q, beam: int, max_tokens: int = 30) -> dict:
    decoded = beam_decode(model, kb, q, beam, max_tokens=max_tokens)
    rows = []
    for d in decoded:
        states = replay(kb, q.linked_store, d.program.tokens)
        steps = [{"step": t, "valid": list(s.valid_tokens()), "chosen": d.program.tokens[t]}
                 for t, s in enumerate(states[:-1])]
        rows.append({
            "program": str(d.program),
            "log_prob": d.log_prob,
            "f1": prf1(d.answer, q.answer)[2],
            "answer": sorted(format_value(v) for v in d.answer),
            "annotated": annotate_program(states),
            "steps": steps,
        })
    return {
        "id": q.id,
        "question": q.text,
        "words": list(q.words),
        "linked": [{"var": f"R{i + 1}", "entity": s[2], "span": [s[0], s[1]]} for i, s in enumerate(q.spans)],
        "gold": sorted(format_value(v) for v in q.answer),
        "beam": rows,
    }


def render_inspection(info: dict) -> str:
    out = [f"[{info['id']}] {info['question']}", "input: " + " ".join(info["words"])]
    out += [f"  {l['var']} = {l['entity']}" for l in info["linked"]]
    out.append("gold: " + ", ".join(info["gold"]))
    for rank, row in enumerate(info["beam"], 1):
        out.append("")
        out.append(f"#{rank}  log_prob={row['log_prob']:.4f}  F1={row['f1']:.3f}")
        out += ["    " + line for line in row["annotated"]]
        out.append("    answer: " + (", ".join(row["answer"]) or "(empty)"))
        for s in row["steps"]:
            out.append(f"    step {s['step']:2d}  {s['chosen']:<40} valid={{{', '.join(s['valid'])}}}")
    return "\n".join(out) + "\n"


def cmd_inspect(args) -> int:
    model, _ = _load_model(args.checkpoint)
    bench = _require_benchmark(args.data)
    if args.question:
        from .datagen import Example, link_examples

        q = link_examples([Example("adhoc", args.question, frozenset())], bench.lexicon)[0]
    else:
        questions = {q.id: q for q in _split(bench, args.split)}
        if args.id not in questions:
            raise LookupError(f"no question with id {args.id!r} in the {args.split} split")
        q = questions[args.id]
    info = inspect_question(model, bench.kb, q, args.beam)
    if args.json:
        print(json.dumps(info, sort_keys=True))
    else:
        sys.stdout.write(render_inspection(info))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nsm", description="Neural symbolic machine on a synthetic knowledge base.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    g.add_argument("--out", required=True, help="benchmark directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entities", type=int, default=200)
    g.add_argument("--properties", type=int, default=20)
    g.add_argument("--questions", type=int, default=500)
    g.add_argument("--train-fraction", type=float, default=0.6)
    g.add_argument("--valid-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="iterative ML followed by augmented REINFORCE")
    t.add_argument("--data", required=True, help="benchmark directory")
    t.add_argument("--out", required=True, help="run directory (checkpoints, log, report)")
    t.add_argument("--config", help="flat key=value file of training settings")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--mode", choices=["full", "iml-only"], default="full")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--resume", action="store_true", help="continue from checkpoints/latest.npz")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a split and write an evaluation report")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "valid", "test"], default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="show the decoded beam for one question")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    which = i.add_mutually_exclusive_group(required=True)
    which.add_argument("--id", help="question id")
    which.add_argument("--question", help="free question text, linked with the benchmark lexicon")
    i.add_argument("--split", choices=["train", "valid", "test"], default="test")
    i.add_argument("--beam", type=int, default=5)
    i.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("nsm: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nsm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, LookupError, BenchmarkError, KBLoadError, ProgramError, ValueError, OSError) as exc:
        print(f"nsm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

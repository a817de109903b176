"""Command-line entry point: ``rmrouter <command> [options]``.

Commands: synth, convert, train, eval, bench, report-params.

Exit codes: 0 success, 2 usage error, 3 validation error (config, data,
checkpoint integrity), 4 runtime failure. Outputs are written only under
``--out``, which defaults to ``$RMROUTER_HOME/<command>`` (or
``./rmrouter-out/<command>`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import (
    CONVERTERS,
    DataError,
    DatasetManifest,
    convert,
    language_filter,
    load_examples,
    make_manifest,
    manifest_path,
    save_examples,
    synth_generate,
)
from .evaluation import (
    EvalReport,
    accuracy_table,
    binary_accuracy,
    bench_inference,
    corpus_vocab,
    inference_table,
    params_table,
    router_accuracy,
    training_time_table,
    TimingReport,
)
from .pipeline import METHODS, IntegrityError, count_assembly_parameters, load_assembly, read_manifest, save_assembly, train_method
from .router import parameter_report, toy_report

log = logging.getLogger("rmrouter")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
HOME_ENV = "RMROUTER_HOME"
VALIDATION_ERRORS = (ConfigError, DataError, IntegrityError, CheckpointError, FileNotFoundError)


def output_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(HOME_ENV, "rmrouter-out")) / args.command


def _write_report(out: Path, stem: str, payload: dict, table: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / f"{stem}.txt").write_text(table + "\n", encoding="utf-8")
    print(table)


def _domains(data_dir: Path, split: str = "train") -> list[str] | None:
    path = manifest_path(data_dir / f"{split}.jsonl")
    return list(DatasetManifest.load(path).counts) if path.exists() else None


def _load_split(data_dir: Path, split: str, domains=None):
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"{path}: file not found")
    return load_examples(path, domains, split)[0]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.domains < 1 or args.per_domain < 1 or (args.per_domain_test is not None and args.per_domain_test < 1):
        raise ConfigError("--domains, --per-domain and --per-domain-test must be positive")
    out = output_dir(args)
    train, test = synth_generate(args.domains, args.per_domain, args.mode, args.seed, args.per_domain_test, out)
    print(f"wrote {len(train)} train / {len(test)} test pairs to {out}")
    print(DatasetManifest.load(manifest_path(out / "train.jsonl")).table())
    return EXIT_OK


def cmd_convert(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed line ({exc.msg})") from None
    if args.lang:
        records = language_filter(records, args.lang)
    examples = convert(args.source, records, args.domain, args.seed)
    target = output_dir(args) / f"{args.domain}.jsonl"
    save_examples(target, examples)
    make_manifest(examples, [args.domain], "train", args.seed).save(manifest_path(target))
    print(f"wrote {len(examples)} pairs to {target}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.build(
        args.config, method=args.method, seeds=args.seed, preset=args.preset, data=args.data,
        jobs=args.jobs, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
    )
    if run.method is None:
        raise ConfigError("no method given (use --method or 'method:' in the config file)")
    if run.data is None:
        raise ConfigError("no data directory given (use --data or 'data:' in the config file)")
    settings = run.settings()
    data_dir = Path(run.data)
    domains = _domains(data_dir)
    train = _load_split(data_dir, "train", domains)
    domains = domains or list(dict.fromkeys(ex.domain for ex in train))
    vocab = corpus_vocab(train, settings.encoder.vocab_size)
    if args.out is None and run.out:
        args.out = run.out
    out = output_dir(args)
    timings = []
    for seed in run.seeds:
        target = out / run.method / f"seed-{seed}"
        target.mkdir(parents=True, exist_ok=True)
        lines: list[str] = []

        def sink(line: str) -> None:
            lines.append(line)
            log.info(line)

        assembly, times = train_method(run.method, train, domains, vocab, settings, seed, sink)
        save_assembly(assembly, target, settings, seed, {"training": times.to_dict(), "preset": run.preset})
        (target / "train_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        timings.append(times)
        print(f"{run.method} seed={seed}: {len(list(target.glob('*.ckpt')))} checkpoints in {target}")
    report = TimingReport.from_training(run.method, timings)
    _write_report(out / run.method, "timing", report.to_dict(), training_time_table({run.method: report}))
    return EXIT_OK


def _assemblies(paths: Sequence[str]) -> list[tuple[dict, object]]:
    return [(read_manifest(p), load_assembly(p)) for p in paths]


def cmd_eval(args) -> int:
    loaded = _assemblies(args.assemblies)
    data_dir = Path(args.data)
    test = _load_split(data_dir, "test", _domains(data_dir, "test"))
    reports: dict[str, EvalReport] = {}
    for manifest, assembly in loaded:
        rows = [ex for ex in test if ex.domain in assembly.domains]
        if not rows:
            raise DataError(f"no test pairs for domains {assembly.domains}")
        counts = {d: sum(ex.domain == d for ex in rows) for d in assembly.domains}
        report = reports.setdefault(assembly.method, EvalReport(assembly.method, list(assembly.domains), counts))
        result = binary_accuracy(assembly.score_batch, rows, args.tie_mode, args.eps)
        r_acc = router_accuracy(assembly, rows) if hasattr(assembly, "route_many") else None
        report.add(manifest["seed"], result, r_acc)
    payload = {m: r.to_dict() for m, r in reports.items()}
    _write_report(output_dir(args), "eval", payload, accuracy_table(reports))
    return EXIT_OK


def cmd_bench(args) -> int:
    loaded = _assemblies(args.assemblies)
    data_dir = Path(args.data)
    test = _load_split(data_dir, "test", _domains(data_dir, "test"))
    named = {}
    for manifest, assembly in loaded:
        name = assembly.method if assembly.method not in named else f"{assembly.method}@{manifest['seed']}"
        named[name] = assembly
    stats = bench_inference(named, test, args.samples_per_domain, args.seed, args.order, args.repeats, args.warmup)
    payload = {k: v.to_dict() for k, v in stats.items()}
    _write_report(output_dir(args), "bench", payload, inference_table(stats))
    return EXIT_OK


def cmd_report_params(args) -> int:
    out = output_dir(args)
    if args.assemblies:
        rows = []
        for path in args.assemblies:
            m = read_manifest(path)
            rows.append({"path": str(path), "method": m["method"], "domains": len(m["domains"]), "total": count_assembly_parameters(path)})
        table = "\n".join(f"{r['method']:<10} {r['total']:>12,}  ({r['domains']} domains)  {r['path']}" for r in rows)
        _write_report(out, "params", {"assemblies": rows}, table)
        return EXIT_OK
    if args.backbone_params is not None:
        if args.adapter_params is None:
            raise ConfigError("--backbone-params needs --adapter-params")
        methods = [m for m in METHODS if m != "more" or args.moe_params is not None]
        reports = []
        for m in methods:
            r = toy_report(m, args.backbone_params, args.adapter_params, args.domains)
            if m == "more":
                r.components["moe"] = args.moe_params
            reports.append(r)
    else:
        settings = RunConfig.build(args.config, preset=args.preset).settings()
        reports = [
            parameter_report(m, settings.reference if m == "baseline" else settings.encoder,
                             settings.adapter if m in ("base-lora", "arliss") else None,
                             args.domains, settings.reference, settings.moe)
            for m in METHODS
        ]
    _write_report(out, "params", {r.method: r.to_dict() for r in reports}, params_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmrouter", description="Router-based reward models at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training lines")
    sub = p.add_subparsers(dest="command", required=True)

    def out_flag(sp):
        sp.add_argument("--out", help=f"output directory (default: ${HOME_ENV}/<command>)")

    s = sub.add_parser("synth", help="generate the synthetic multi-domain benchmark")
    s.add_argument("--domains", type=int, required=True)
    s.add_argument("--per-domain", type=int, required=True)
    s.add_argument("--per-domain-test", type=int)
    s.add_argument("--mode", choices=("disjoint", "overlapping"), default="disjoint")
    s.add_argument("--seed", type=int, default=0)
    out_flag(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("convert", help="convert raw preference records to JSONL pairs")
    s.add_argument("--source", choices=sorted(CONVERTERS), required=True)
    s.add_argument("--input", required=True, help="JSONL file of raw records")
    s.add_argument("--domain", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lang", nargs="+", help="keep only records whose 'lang' is listed")
    out_flag(s)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("train", help="train one method's assembly for one or more seeds")
    s.add_argument("--config", help="YAML run file; flags override its values")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--data", help="directory holding train.jsonl")
    s.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    s.add_argument("--preset", choices=("desk", "paper"))
    s.add_argument("--jobs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int)
    out_flag(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="binary accuracy of trained assemblies")
    s.add_argument("--assemblies", nargs="+", required=True)
    s.add_argument("--data", required=True, help="directory holding test.jsonl")
    s.add_argument("--tie-mode", choices=("strict", "half"), default="strict")
    s.add_argument("--eps", type=float, default=0.0)
    out_flag(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="per-call inference latency")
    s.add_argument("--assemblies", nargs="+", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--samples-per-domain", type=int, default=500)
    s.add_argument("--order", choices=("shuffled", "sorted"), default="shuffled")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    out_flag(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report-params", help="parameter accounting per method")
    s.add_argument("--domains", type=int, default=5)
    s.add_argument("--config")
    s.add_argument("--preset", choices=("desk", "paper"))
    s.add_argument("--backbone-params", type=int, help="toy mode: backbone size")
    s.add_argument("--adapter-params", type=int, help="toy mode: adapter size")
    s.add_argument("--moe-params", type=int, help="toy mode: MoE block size")
    s.add_argument("--assemblies", nargs="+", help="brute-force count over saved checkpoints")
    out_flag(s)
    s.set_defaults(func=cmd_report_params)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Batch entry points for the full pipeline: ingest/synth -> train -> explain.

Every command is a thin wrapper over the library modules. Output goes to
stdout as JSON (or an aligned text table where noted); failures print a
machine-readable {"error", "detail"} object on stderr and exit nonzero.
All randomness flows from --seed (default 42).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import cfengine as cf
from . import eventlog as el
from . import evaluation as ev
from . import predictor as pr
from . import synthgen

ERROR_CODES = {
    el.MissingColumn: "missing_column",
    el.MalformedRow: "malformed_row",
    el.NegativeAmount: "negative_amount",
    el.EmptyLog: "empty_log",
    pr.UnknownToken: "unknown_token",
    pr.VersionMismatch: "version_mismatch",
    pr.CorruptCheckpoint: "corrupt_checkpoint",
    cf.NoReachableMilestone: "no_reachable_milestone",
    cf.NoCounterfactualFound: "no_counterfactual_found",
    cf.EmptyKnowledgeBase: "empty_knowledge_base",
    FileNotFoundError: "file_not_found",
    ValueError: "invalid_value",
}


def _fail(exc: Exception) -> int:
    code = "internal_error"
    for klass, name in ERROR_CODES.items():
        if isinstance(exc, klass):
            code = name
            break
    print(json.dumps({"error": code, "detail": str(exc)}), file=sys.stderr)
    return 1


def _read_json(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _parse_schema(raw: str | None) -> dict | None:
    if not raw:
        return None
    pairs = [item.split("=", 1) for item in raw.split(",")]
    return {k.strip(): v.strip() for k, v in pairs}


def cmd_ingest(args) -> int:
    log = el.parse_csv(args.csv, _parse_schema(args.schema))
    el.save_log(log, args.out)
    print(json.dumps({
        "out": str(args.out), "n_cases": len(log.cases),
        "n_activities": len(log.vocab.activities),
        "n_resources": len(log.vocab.resources),
    }, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    overrides = _read_json(args.config) if args.config else {}
    overrides.setdefault("seed", args.seed)
    config = synthgen.SynthConfig(**overrides)
    log = synthgen.generate(config)
    if str(args.out).endswith(".csv"):
        el.write_csv(log, args.out)
    else:
        el.save_log(log, args.out)
    print(json.dumps({
        "out": str(args.out), "n_cases": len(log.cases), "seed": config.seed,
    }, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    log = el.load_log(args.log)
    overrides = _read_json(args.config) if args.config else {}
    overrides.setdefault("seed", args.seed)
    config = pr.ModelConfig(**overrides)
    model, report = pr.train(log, config)
    pr.save(model, args.out)
    print(json.dumps({
        "out": str(args.out),
        "parameters": model.param_count(),
        "accuracy": round(report.accuracy, 6),
        "macro_f1": round(report.macro_f1, 6),
    }, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model = pr.load(args.model)
    doc = _read_json(args.prefix)
    prefix = [(a, r) for a, r in doc["prefix"]]
    token, probs = pr.predict_next(model, prefix, float(doc["amount"]))
    print(json.dumps({
        "next_activity": token,
        "top_k": [
            {"activity": a, "probability": round(p, 6)}
            for a, p in pr.top_k_activities(model, probs, args.top_k)
        ],
    }, sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    model = pr.load(args.model)
    bank = cf.KnowledgeBank(
        el.EventLog(el.load_log(args.log).cases, model.vocab), model.config.max_len)
    doc = _read_json(args.query)
    query = cf.CounterfactualQuery(
        prefix=[(a, r) for a, r in doc["prefix"]],
        amount=float(doc["amount"]),
        desired_activity=doc["milestone"],
        amount_mutable=args.amount_mutable or bool(doc.get("amount_mutable", False)),
        k=args.k if args.k is not None else int(doc.get("k", 3)),
    )
    query.validate(model.vocab)
    results = cf.generate(query, model, bank)
    print(json.dumps({
        "query": doc,
        "results": [ev.result_to_dict(r) for r in results],
    }, sort_keys=True, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    model = pr.load(args.model)
    bank = cf.KnowledgeBank(
        el.EventLog(el.load_log(args.log).cases, model.vocab), model.config.max_len)
    milestones, queries = ev.load_queries(_read_json(args.suite))
    for q in queries:
        q.validate(model.vocab)
    report = ev.run_milestone_suite(model, bank, queries, milestones,
                                    run_baseline=not args.skip_baseline)
    out = Path(args.out)
    out.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.data_dir, explain_timeout=args.explain_timeout,
                     explain_workers=args.explain_workers, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a CSV event log into canonical JSON")
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", help="comma-separated column overrides, e.g. case_id=Case ID")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic loan-process log")
    p.add_argument("--config", help="JSON file of SynthConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the next-activity model")
    p.add_argument("log")
    p.add_argument("--config", help="JSON file of ModelConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict the next activity for a prefix")
    p.add_argument("model")
    p.add_argument("--prefix", required=True, help="JSON file {prefix, amount}")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="generate milestone counterfactuals")
    p.add_argument("model")
    p.add_argument("--query", required=True, help="JSON file {prefix, amount, milestone}")
    p.add_argument("--log", required=True, help="training log JSON (knowledge bank)")
    p.add_argument("--amount-mutable", action="store_true")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="run a milestone query suite and report")
    p.add_argument("model")
    p.add_argument("--suite", required=True, help="JSON file {milestones, queries}")
    p.add_argument("--log", required=True, help="training log JSON (knowledge bank)")
    p.add_argument("--out", required=True, help="report path prefix (.json/.txt)")
    p.add_argument("--skip-baseline", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--explain-timeout", type=float, default=60.0)
    p.add_argument("--explain-workers", type=int, default=2)
    p.add_argument("--ui-dir", help="serve a built explorer UI at /ui")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - translated to stable error codes
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``calens <command> ...``.

Exit codes: 0 success, 1 verification failure, 2 parse/format/config error,
3 empty input, 4 misaligned inputs, 5 unknown strategy.
"""
from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import io, oracle, synthetic
from .calibration import DEFAULT_TOL, average_confidence, ece, fit_temperature
from .core import EmptyInputError, LabeledScores, ShapeError, ValidationError, accuracy
from .ensemble import Strategy, combine, fit_ensemble
from .evaluation import ROBUST, STANDARD, aggregate, evaluate_models, gap_closed, EvalRow

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_FORMAT = 2
EXIT_EMPTY = 3
EXIT_MISALIGNED = 4
EXIT_STRATEGY = 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _warn(msg):
    print(f"calens: warning: {msg}", file=sys.stderr)


# -- shift grammar ----------------------------------------------------------------

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _split_top(body: str):
    parts, depth, cur = [], 0, ""
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ValueError("unbalanced parentheses")
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if depth:
        raise ValueError("unbalanced parentheses")
    parts.append(cur)
    return parts


def _kv(body: str, keys):
    out = {}
    for part in _split_top(body):
        if "=" not in part:
            raise ValueError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in keys or k in out:
            raise ValueError(f"unexpected or repeated key {k!r}")
        out[k] = v.strip()
    if set(out) != set(keys):
        raise ValueError(f"expected keys {sorted(keys)}")
    return out


def _num(v: str) -> float:
    if not re.fullmatch(_NUM, v):
        raise ValueError(f"not a number: {v!r}")
    return float(v)


def parse_shift(spec: str):
    """Parse the shift grammar; ``id`` returns None (in-distribution sampling).

    missing | suppressed:tau=F | anticorrelated:alpha=F,beta=F
    | mix:w=F,a=(SPEC),b=(SPEC)
    """
    spec = spec.strip()
    try:
        if spec == "id":
            return None
        if spec == "missing":
            return synthetic.MissingSpurious()
        head, _, body = spec.partition(":")
        if head == "suppressed":
            return synthetic.Suppressed(_num(_kv(body, {"tau"})["tau"]))
        if head == "anticorrelated":
            kv = _kv(body, {"alpha", "beta"})
            return synthetic.Anticorrelated(_num(kv["alpha"]), _num(kv["beta"]))
        if head == "mix":
            kv = _kv(body, {"w", "a", "b"})
            comps = []
            for key in ("a", "b"):
                v = kv[key]
                if not (v.startswith("(") and v.endswith(")")):
                    raise ValueError(f"mixture component {key} must be parenthesised")
                comp = parse_shift(v[1:-1])
                if comp is None:
                    raise ValueError("id is not a mixture component")
                comps.append(comp)
            return synthetic.Mixture(_num(kv["w"]), comps[0], comps[1])
    except (ValueError, ValidationError) as exc:
        raise CliError(f"bad shift spec {spec!r}: {exc}", EXIT_FORMAT) from None
    raise CliError(f"bad shift spec {spec!r}", EXIT_FORMAT)


# -- helpers ---------------------------------------------------------------------------

def _labeled(path) -> LabeledScores:
    try:
        return io.read_labeled(path)
    except ValidationError as exc:
        raise CliError(str(exc), EXIT_FORMAT) from None


def _pair(arg: str):
    parts = [p for p in arg.split(",") if p]
    if len(parts) != 2:
        raise CliError(f"expected STD_PATH,ROB_PATH, got {arg!r}", EXIT_FORMAT)
    std, rob = _labeled(parts[0]), _labeled(parts[1])
    _check_aligned(std, rob, arg)
    return std, rob


def _check_aligned(std: LabeledScores, rob: LabeledScores, what: str):
    if std.scores.scores.shape != rob.scores.scores.shape or not np.array_equal(std.labels, rob.labels):
        raise CliError(f"misaligned standard/robust inputs: {what}", EXIT_MISALIGNED)
    if std.row_count == 0:
        raise CliError(f"empty input: {what}", EXIT_EMPTY)


def _emit(doc, out):
    text = io.dumps(doc)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- commands ----------------------------------------------------------------------------

def cmd_fit_temperature(args):
    d = _labeled(args.scores)
    if d.row_count == 0:
        raise CliError(f"{args.scores}: no rows", EXIT_EMPTY)
    t = fit_temperature(d, tol=args.tol)
    acc = accuracy(d)
    conf = average_confidence(d.scores, t)
    if t.clamped:
        _warn(f"temperature clamped to {t.t!r}: accuracy {acc:.4f} is outside the reachable confidence range")
    rel_before = ece(d, bins=args.bins)
    rel_after = ece(d, t, bins=args.bins)
    io.write_json(args.out, {
        "schema_version": io.SCHEMA_VERSION,
        "temperature": t.t,
        "clamped": t.clamped,
        "achieved_confidence": conf,
        "accuracy": acc,
        "tol": args.tol,
        "rows": d.row_count,
        "ece_before": rel_before.ece,
        "ece_after": rel_after.ece,
        "reliability_after": rel_after.to_dict(),
    })
    return EXIT_OK


def cmd_ensemble(args):
    try:
        strategy = Strategy.parse(args.strategy)
    except ValidationError as exc:
        raise CliError(str(exc), EXIT_STRATEGY) from None
    std_val, rob_val = _labeled(args.id_val_std), _labeled(args.id_val_rob)
    _check_aligned(std_val, rob_val, "ID validation files")
    id_test = _pair(args.eval_id)
    ood_test = _pair(args.eval_ood) if args.eval_ood else None
    k = std_val.class_count
    for pair in filter(None, (id_test, ood_test)):
        if pair[0].class_count != k:
            raise CliError("class count differs between validation and test files", EXIT_MISALIGNED)

    cfg = fit_ensemble(std_val, rob_val, strategy, tol=args.tol)
    if cfg.few_validation_rows:
        _warn("fewer validation rows than classes")
    for name, t in (("standard", cfg.t_std), ("robust", cfg.t_rob)):
        if t.clamped:
            _warn(f"{name} temperature clamped to {t.t!r}")

    ens_name = strategy.value
    rows = evaluate_models({STANDARD: STANDARD, ROBUST: ROBUST, ens_name: cfg}, id_test, ood_test)
    by_name = {r.model: r for r in rows}
    gaps = {"id": gap_closed(by_name[STANDARD].id_accuracy, by_name[ROBUST].id_accuracy,
                             by_name[ens_name].id_accuracy).to_dict()}
    if ood_test is not None:
        gaps["ood"] = gap_closed(by_name[STANDARD].ood_accuracy, by_name[ROBUST].ood_accuracy,
                                 by_name[ens_name].ood_accuracy).to_dict()

    if args.std or args.rob:
        if not (args.std and args.rob and args.ensemble_out):
            raise CliError("--std, --rob and --ensemble-out go together", EXIT_FORMAT)
        s_std, l_std, _ = io.read_score_file(args.std)
        s_rob, _, _ = io.read_score_file(args.rob)
        try:
            out = combine(s_std, s_rob, cfg)
        except ShapeError as exc:
            raise CliError(str(exc), EXIT_MISALIGNED) from None
        io.write_score_file(args.ensemble_out, out, l_std)

    report = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "ensemble_report",
        "dataset": args.dataset,
        "tag": args.tag,
        "n_classes": k,
        "ensemble_model": ens_name,
        "rows": [r.to_dict() for r in rows],
        "gap_closed": gaps,
        "config": cfg.to_dict(),
        "provenance": {
            "tol": args.tol,
            "validation_rows": std_val.row_count,
            "id_test_rows": id_test[0].row_count,
            "ood_test_rows": None if ood_test is None else ood_test[0].row_count,
        },
    }
    io.write_json(args.report, report)
    return EXIT_OK


def _load_world(cfg_world, base: Path):
    if isinstance(cfg_world, str):
        cfg_world = io.read_json(base / cfg_world)
    return synthetic.WorldSpec.from_dict(cfg_world)


def cmd_simulate(args):
    world = _load_world(args.world, Path.cwd())
    shift = parse_shift(args.shift)
    if args.n < 1:
        raise CliError("--n must be >= 1", EXIT_FORMAT)
    if shift is None:
        ss = synthetic.sample_id(world, args.n, seed=args.seed)
    else:
        ss = synthetic.sample_ood(world, shift, args.n, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_score_file(out / "std.csv", ss.std_scores, ss.labels)
    io.write_score_file(out / "rob.csv", ss.rob_scores, ss.labels)
    kinds = [synthetic.ROW_KINDS[i] for i in ss.row_kind]
    io.write_conditionals(out / "conditionals.csv", ss.exact_conditionals, kinds)
    io.write_json(out / "meta.json", {
        "schema_version": io.SCHEMA_VERSION,
        "world": world.to_dict(),
        "shift": ss.description,
        "n": args.n,
        "seed": args.seed,
        "label_symmetric": ss.label_symmetric,
        "files": ["std.csv", "rob.csv", "conditionals.csv"],
    })
    return EXIT_OK


_DEFAULT_SHIFT = {
    "1": "id",
    "2": "mix:w=0.5,a=(missing),b=(suppressed:tau=2)",
    "3": "anticorrelated:alpha=1,beta=1",
}


def _tables_from_config(cfg):
    if "table" in cfg:
        return [oracle.table_from_dict(cfg["table"])]
    if "tables" in cfg:
        return [oracle.table_from_dict(t) for t in cfg["tables"]]
    if "corpus" in cfg:
        c = cfg["corpus"] or {}
        return oracle.fixture_corpus(int(c.get("count", 24)), int(c.get("seed", 0)))
    raise ValidationError("config needs one of 'table', 'tables' or 'corpus'")


def cmd_verify(args):
    cfg = io.read_json(args.config)
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object", EXIT_FORMAT)
    prop = args.prop
    try:
        if prop in ("1", "2", "3"):
            if "world" not in cfg:
                raise ValidationError("config needs a 'world'")
            world = _load_world(cfg["world"], Path(args.config).parent)
            n = int(cfg.get("n", 100_000))
            seed = int(cfg.get("seed", world.seed))
            shift = parse_shift(cfg.get("shift", _DEFAULT_SHIFT[prop]))
            if shift is None:
                ss = synthetic.sample_id(world, n, seed=seed)
            else:
                ss = synthetic.sample_ood(world, shift, n, seed=seed)
            rep = synthetic.verify_proposition(ss, prop, seed=seed)
            doc = rep.to_dict()
            doc["seed"] = seed
        else:
            tables = _tables_from_config(cfg)
            drop = bool(cfg.get("drop_marginal", False))
            results = []
            for t in tables:
                if prop == "lemma":
                    results.append(oracle.check_lemma_softmax(t, drop_marginal=drop))
                elif prop == "prop1-exhaustive":
                    results.append(oracle.check_prop1_exhaustive(t))
                else:
                    results.append(oracle.check_corollary_trivial_bound(t))
            passed = all(r.passed for r in results)
            first = next((i for i, r in enumerate(results) if not r.passed), None)
            doc = {
                "proposition": prop,
                "verdict": "PASS" if passed else "FAIL",
                "tables": len(results),
                "first_violation": None if first is None else {
                    "table": first, **(results[first].first_violation or {})},
                "results": [dict(r.to_dict(), table=t.to_dict()) for r, t in zip(results, tables)],
            }
    except synthetic.UsageError as exc:
        raise CliError(str(exc), EXIT_FORMAT) from None
    except (ValidationError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"config error: {exc}", EXIT_FORMAT) from None
    doc = {"schema_version": io.SCHEMA_VERSION, **doc}
    _emit(doc, args.out)
    return EXIT_OK if doc["verdict"] == "PASS" else EXIT_FAIL


def _fmt_pct(v):
    return "" if v is None else f"{v:.1f}"


def cmd_report(args):
    reports = []
    for path in args.inputs:
        doc = io.read_json(path)
        if (not isinstance(doc, dict) or doc.get("schema_version") != io.SCHEMA_VERSION
                or not isinstance(doc.get("rows"), list) or "n_classes" not in doc):
            raise CliError(f"{path}: not an ensemble report", EXIT_FORMAT)
        reports.append(doc)
    ks = {d["n_classes"] for d in reports}
    if len(ks) > 1:
        raise CliError(f"reports disagree on the class count: {sorted(ks)}", EXIT_FORMAT)

    datasets, grouped, tags = [], {}, {}
    for i, doc in enumerate(reports):
        name = doc.get("dataset") or f"dataset{i}"
        if name in grouped:
            name = f"{name}#{i}"
        datasets.append(name)
        tags[name] = doc.get("tag") or "untagged"
        try:
            grouped[name] = [EvalRow.from_dict(r) for r in doc["rows"]]
        except (TypeError, ValidationError) as exc:
            raise CliError(f"bad row in {name}: {exc}", EXIT_FORMAT) from None

    avgs = aggregate(grouped, tags)
    models = list(avgs)
    has_ood = any(r.ood_accuracy is not None for rows in grouped.values() for r in rows)
    columns = ["model"] + [f"{d} ID" for d in datasets]
    if has_ood:
        columns += [f"{d} OOD" for d in datasets]
    columns += ["avg ID"] + (["avg OOD"] if has_ood else []) + ["gap closed"]

    def gap_for(model):
        if STANDARD not in avgs or ROBUST not in avgs:
            return None
        key = "ood_mean" if has_ood else "id_mean"
        vals = [getattr(avgs[m], key) for m in (STANDARD, ROBUST, model)]
        if None in vals:
            return None
        g = gap_closed(*vals)
        return None if g.degenerate else g.fraction

    table = []
    for m in models:
        by_ds = {d: next((r for r in grouped[d] if r.model == m), None) for d in datasets}
        row = {"model": m}
        for d in datasets:
            row[f"{d} ID"] = by_ds[d].id_accuracy if by_ds[d] else None
        if has_ood:
            for d in datasets:
                row[f"{d} OOD"] = by_ds[d].ood_accuracy if by_ds[d] else None
        row["avg ID"] = avgs[m].id_mean
        if has_ood:
            row["avg OOD"] = avgs[m].ood_mean
        row["gap closed"] = gap_for(m)
        table.append(row)

    if args.format == "json":
        text = io.dumps({
            "schema_version": io.SCHEMA_VERSION,
            "kind": "merged_report",
            "datasets": datasets,
            "columns": columns,
            "table": table,
            "averages": {m: a.to_dict() for m, a in avgs.items()},
            "reports": reports,
        })
    else:
        lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
        for row in table:
            cells = []
            for c in columns:
                v = row[c]
                if c == "model":
                    cells.append(str(v))
                elif c == "gap closed":
                    cells.append("" if v is None else f"{v:.3f}")
                else:
                    cells.append(_fmt_pct(v))
            lines.append("| " + " | ".join(cells) + " |")
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_FORMAT)


def build_parser():
    p = _Parser(prog="calens", description="ID-calibrated ensembles of standard and robust models")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit-temperature", help="fit a confidence-matching temperature")
    f.add_argument("--scores", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--tol", type=float, default=DEFAULT_TOL)
    f.add_argument("--bins", type=int, default=10)
    f.set_defaults(func=cmd_fit_temperature)

    e = sub.add_parser("ensemble", help="fit an ensemble on ID validation data and evaluate it")
    e.add_argument("--id-val-std", required=True)
    e.add_argument("--id-val-rob", required=True)
    e.add_argument("--strategy", default=Strategy.CALIBRATED_PROBS.value)
    e.add_argument("--eval-id", required=True, metavar="STD,ROB")
    e.add_argument("--eval-ood", metavar="STD,ROB")
    e.add_argument("--report", required=True)
    e.add_argument("--std", help="score file to transform with the fitted ensemble")
    e.add_argument("--rob", help="paired robust score file")
    e.add_argument("--ensemble-out", help="where to write the ensemble scores for --std/--rob")
    e.add_argument("--dataset", default="dataset")
    e.add_argument("--tag", default="natural", choices=["natural", "adversarial"])
    e.add_argument("--tol", type=float, default=DEFAULT_TOL)
    e.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("simulate", help="sample a synthetic ID or OOD set")
    s.add_argument("--world", required=True, help="WorldSpec JSON file")
    s.add_argument("--shift", required=True, help="id | missing | suppressed:tau=F | "
                   "anticorrelated:alpha=F,beta=F | mix:w=F,a=(SPEC),b=(SPEC)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="run a verification check")
    v.add_argument("--prop", required=True,
                   choices=["1", "2", "3", "lemma", "prop1-exhaustive", "corollary"])
    v.add_argument("--config", required=True)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="merge ensemble reports into one table")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--format", choices=["json", "markdown"], default="json")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "simulate":
            args.world = io.read_json(args.world)
        return args.func(args)
    except CliError as exc:
        print(f"calens: error: {exc}", file=sys.stderr)
        return exc.code
    except EmptyInputError as exc:
        print(f"calens: error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except ShapeError as exc:
        print(f"calens: error: {exc}", file=sys.stderr)
        return EXIT_MISALIGNED
    except ValidationError as exc:
        print(f"calens: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

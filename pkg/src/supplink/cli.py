"""Command-line entry point: ``supplink synth | train | eval | predict``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from urllib.parse import quote

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, InvariantError, SamplingError
from .evaluator import (DEFAULT_NS, STRATA_KEYS, EncoderScorer, build_validation_split, compute_metrics,
                        rank_heldout, render_metrics_report, stratified_report, write_rank_dump)
from .graph import CompanyGraph, FeatureBlockSchema, load_graph
from .synthgen import generate, load_synth_config, write_dataset
from .trainer import TrainedModel, load_training_config, train, two_step_train

log = logging.getLogger("supplink")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

PREDICTION_COLUMNS = ["supplier_id", "supplier_name", "customer_id", "customer_name",
                      "score", "rank", "url_1", "url_2"]

# Joint-name web searches; with domains.csv, {supplier_domain}/{customer_domain} may be used instead.
DEFAULT_URL_TEMPLATES = (
    "https://www.google.com/search?q=%22{customer}%22+%22{supplier}%22+supplier",
    "https://www.google.com/search?q=%22{supplier}%22+%22{customer}%22+customer",
)
NAME_FIELDS = ("supplier", "customer")
DOMAIN_FIELDS = ("supplier_domain", "customer_domain")
_PLACEHOLDER = re.compile(r"\{([^{}]*)\}")


# --- search URLs -------------------------------------------------------------------

def validate_templates(templates: Sequence[str], domains_available: bool = False) -> tuple[str, str]:
    """Fail fast on a bad template pair; returns it as a tuple."""
    if len(templates) != 2:
        raise ConfigError(f"expected exactly two URL templates, got {len(templates)}")
    allowed = set(NAME_FIELDS) | (set(DOMAIN_FIELDS) if domains_available else set())
    for t in templates:
        found = set(_PLACEHOLDER.findall(t))
        unknown = sorted(found - allowed)
        if unknown:
            hint = " (domain placeholders need --domains)" if set(unknown) & set(DOMAIN_FIELDS) else ""
            raise ConfigError(f"URL template {t!r} uses unknown placeholder(s) {unknown}{hint}")
        for name in NAME_FIELDS:
            if name not in found and f"{name}_domain" not in found:
                raise ConfigError(f"URL template {t!r} is missing a {{{name}}} placeholder")
    return templates[0], templates[1]


def search_urls(supplier: str, customer: str, templates: Sequence[str] = DEFAULT_URL_TEMPLATES,
                supplier_domain: str = "", customer_domain: str = "") -> tuple[str, str]:
    """Render both templates with percent-encoded names."""
    if not supplier or not customer:
        raise ConfigError("supplier and customer names must be non-empty")
    values = {"supplier": supplier, "customer": customer,
              "supplier_domain": supplier_domain, "customer_domain": customer_domain}
    t1, t2 = validate_templates(templates, domains_available=True)

    def render(t: str) -> str:
        return _PLACEHOLDER.sub(lambda m: quote(values[m.group(1)], safe=""), t)

    return render(t1), render(t2)


# --- prediction --------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionRecord:
    supplier_id: str
    supplier_name: str
    customer_id: str
    customer_name: str
    score: float
    rank: int
    url_1: str
    url_2: str

    def row(self) -> list[str]:
        return [self.supplier_id, self.supplier_name, self.customer_id, self.customer_name,
                repr(self.score), str(self.rank), self.url_1, self.url_2]


def top_k(scores: np.ndarray, keep: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best kept candidates; ties go to the lower index."""
    cand = np.flatnonzero(keep)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def predict(g: CompanyGraph, scorer, k: int, names: Mapping[str, str] | None = None,
            domains: Mapping[str, str] | None = None,
            templates: Sequence[str] = DEFAULT_URL_TEMPLATES,
            suppliers: Sequence[str] | None = None) -> tuple[list[PredictionRecord], list[str]]:
    """Top-``k`` customers per covered supplier, known supply edges (any year) filtered.

    Returns the records and the suppliers left with no eligible candidate.
    """
    if k < 1:
        raise ConfigError(f"--top must be >= 1, got {k}")
    names = names or {}
    domains = domains or {}
    templates = validate_templates(templates, domains_available=bool(domains))
    n = g.num_companies
    known = g.supply_keys()
    if suppliers is None:
        suppliers = [c for c in g.ids if g.is_covered(c)]
    records: list[PredictionRecord] = []
    empty: list[str] = []
    for sup in suppliers:
        s = g.company_index(sup)
        keep = np.ones(n, dtype=bool)
        keep[s] = False
        keep[known[(known // n) == s] % n] = False
        if not keep.any():
            empty.append(sup)
            continue
        scores = np.asarray(scorer.supplier_scores(sup), dtype=np.float64)
        sname = names.get(sup, sup)
        for rank, c in enumerate(top_k(scores, keep, k), start=1):
            cid = g.ids[c]
            if g.has_supply_edge_any_year(sup, cid):
                raise InvariantError(f"prediction ({sup}, {cid}) is a known supply edge")
            cname = names.get(cid, cid)
            u1, u2 = search_urls(sname, cname, templates, domains.get(sup, ""), domains.get(cid, ""))
            records.append(PredictionRecord(sup, sname, cid, cname, float(scores[c]), rank, u1, u2))
    return records, empty


def write_predictions(path: str | Path, records: Sequence[PredictionRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_id_map(path: str | Path, column: str) -> dict[str, str]:
    """Two-column CSV ``company_id,<column>`` into a dict."""
    path = Path(path)
    out: dict[str, str] = {}
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["company_id", column]:
                raise DataError(f"{path}:1: expected header company_id,{column}, got {header}")
            for line, row in enumerate(reader, start=2):
                if len(row) != 2 or not row[0] or not row[1]:
                    raise DataError(f"{path}:{line}: expected two non-empty cells")
                if row[0] in out:
                    raise DataError(f"{path}:{line}: duplicate company_id {row[0]!r}")
                out[row[0]] = row[1]
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return out


# --- dataset helpers ---------------------------------------------------------------

def load_dataset(data_dir: str | Path) -> CompanyGraph:
    d = Path(data_dir)
    schema = FeatureBlockSchema.load(d / "schema.json")
    return load_graph(d / "nodes.csv", d / "edges.csv", schema)


def _split_from(model: TrainedModel, g: CompanyGraph):
    info = model.provenance.get("split")
    if not info:
        raise DataError("model provenance has no validation split; retrain with this version")
    return build_validation_split(g, info["degree_ceiling"], info["per_company"], info["seed"])


# --- commands ----------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    config = load_synth_config(args.config, args.seed)
    graph, truth = generate(config)
    paths = write_dataset(graph, truth, args.out, config)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = load_training_config(args.config, args.seed)
    g = load_dataset(args.data)
    split = build_validation_split(g, config.split_degree_ceiling, config.split_per_company, config.seed)
    log.info("validation split: %d held-out pairs, %d suppliers",
             len(split.held_out), len(split.suppliers()))
    out = Path(args.out)
    if args.two_step:
        result = two_step_train(split.train_graph, config)
        result.model1.provenance["split"] = split.provenance
        result.model2.provenance["split"] = split.provenance
        step1 = out.with_name(f"{out.stem}.step1{out.suffix}")
        result.model1.save(step1)
        result.model2.save(out)
        log.info("wrote %s (step 1) and %s (step 2)", step1, out)
    else:
        model = train(split.train_graph, config, "random", step=1)
        model.provenance["split"] = split.provenance
        model.save(out)
        log.info("wrote %s (step 1)", out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    g = load_dataset(args.data)
    model = TrainedModel.load(args.model, g.schema)
    split = _split_from(model, g)
    seed = model.provenance.get("seed", 0) if args.seed is None else args.seed
    results = rank_heldout(EncoderScorer(model.encoder, split.train_graph, seed=seed), split)
    ns = sorted(set(args.n))
    overall = compute_metrics(results, ns)
    strata = {by: stratified_report(results, by, ns) for by in args.stratify}
    out = Path(args.out)
    out.write_text(render_metrics_report(overall, strata, ns), encoding="utf-8")
    ranks = Path(args.ranks) if args.ranks else out.with_name(f"{out.stem}.ranks.csv")
    write_rank_dump(ranks, results)
    print(f"mean_rank={overall.mean_rank:.2f} "
          + " ".join(f"recall@{k}={overall.recall[k]:.4f}" for k in ns) + " "
          + " ".join(f"hit@{k}={overall.hit[k]:.4f}" for k in ns))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    domains = read_id_map(args.domains, "domain") if args.domains else {}
    templates = validate_templates(args.url_template or DEFAULT_URL_TEMPLATES, bool(domains))
    names = read_id_map(args.names, "name") if args.names else {}
    g = load_dataset(args.data)
    model = TrainedModel.load(args.model, g.schema)
    seed = model.provenance.get("seed", 0) if args.seed is None else args.seed
    scorer = EncoderScorer(model.encoder, g, seed=seed)
    suppliers = [c for c in g.ids if g.is_covered(c)]
    scorer.prefetch(suppliers)
    records, empty = predict(g, scorer, args.top, names, domains, templates, suppliers)
    write_predictions(args.out, records)
    print(f"predict: {len(records)} records for {len(suppliers) - len(empty)} suppliers; "
          f"{len(empty)} supplier(s) had no eligible candidate")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="supplink", description="Supply-chain link prediction with graph attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="synth config (JSON); defaults used when omitted")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="training config (JSON)")
    t.add_argument("--two-step", action="store_true", help="also mine hard negatives and train step 2")
    t.add_argument("--out", required=True, help="model file; step 1 goes to <stem>.step1.json with --two-step")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="filtered-rank evaluation on the validation split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True, help="metrics report path")
    e.add_argument("--ranks", help="rank dump CSV (default: <out stem>.ranks.csv)")
    e.add_argument("--stratify", action="append", default=[], choices=STRATA_KEYS)
    e.add_argument("--n", type=int, action="append", help="cutoffs for recall@N / hit@N")
    e.add_argument("--seed", type=int, help="neighbor-sampling seed (default: the model's)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="top-K customer predictions with search URLs")
    r.add_argument("--data", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--top", type=int, default=20)
    r.add_argument("--names", help="CSV company_id,name")
    r.add_argument("--domains", help="CSV company_id,domain")
    r.add_argument("--url-template", action="append", help="give exactly twice to replace the defaults")
    r.add_argument("--seed", type=int, help="neighbor-sampling seed (default: the model's)")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "n", None) is None and args.command == "eval":
        args.n = list(DEFAULT_NS)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"supplink: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SamplingError) as exc:
        print(f"supplink: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"supplink: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, ContractError, DimensionError) as exc:
        print(f"supplink: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

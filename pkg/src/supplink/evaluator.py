"""Validation split, filtered ranks, rank metrics and stratified reports.

Conventions used throughout:

* candidates are every company in the graph except the supplier itself;
* candidates already linked to the supplier in the training graph (any
  year) are filtered out before ranking;
* ties are pessimistic: a candidate scoring exactly the same as the true
  customer is ranked ahead of it.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .encoder import DualEncoder, embed_all
from .errors import ContractError, DataError
from .graph import CompanyGraph, remove_edges

DEFAULT_NS = (20, 100)
STRATA_KEYS = ("supplier_industry", "supplier_country", "customer_industry", "customer_country")

REPORT_NOTES = (
    "ties: pessimistic (a candidate with an equal score ranks ahead of the true customer)",
    "candidates: every company except the supplier; known training supply edges (any year) filtered",
    "recall@N and hit@N are lower bounds: unobserved true edges in the top N count as misses",
)


@dataclass(frozen=True)
class ValidationSplit:
    held_out: frozenset[tuple[str, str]]
    train_graph: CompanyGraph
    provenance: dict = field(default_factory=dict)

    def suppliers(self) -> list[str]:
        return sorted({a for a, _ in self.held_out})


def build_validation_split(g: CompanyGraph, degree_ceiling: int = 20, per_company: int = 2,
                           seed: int = 0) -> ValidationSplit:
    """Hold out ``per_company`` customers of every supplier with 2..ceiling customers.

    Degrees are counted in the latest year.  Held-out pairs are removed from
    every year of the returned training graph.
    """
    year = g.latest_year()
    customers: dict[str, list[str]] = {}
    for a, b in g.snapshot(year).supply_edges:
        customers.setdefault(a, []).append(b)
    floor = max(2, per_company)
    eligible = sorted(a for a, cs in customers.items() if floor <= len(cs) <= degree_ceiling)
    if not eligible:
        raise DataError(f"no supplier has between {floor} and {degree_ceiling} customers in {year}")
    rng = np.random.default_rng(seed)
    held: set[tuple[str, str]] = set()
    for a in eligible:
        cs = sorted(customers[a])
        for j in rng.choice(len(cs), size=per_company, replace=False):
            held.add((a, cs[j]))
    single = sorted(a for a, cs in customers.items() if len(cs) < floor)
    provenance = {
        "seed": seed,
        "per_company": per_company,
        "degree_ceiling": degree_ceiling,
        "year": year,
        "eligible_suppliers": len(eligible),
        "excluded_below_floor": len(single),
        "excluded_above_ceiling": sum(1 for cs in customers.values() if len(cs) > degree_ceiling),
    }
    return ValidationSplit(frozenset(held), remove_edges(g, held), provenance)


@dataclass(frozen=True)
class RankResult:
    supplier: str
    customer: str
    filtered_rank: int
    candidates: int
    strata: tuple[str, str, str, str]

    def stratum(self, by: str) -> str:
        try:
            return self.strata[STRATA_KEYS.index(by)]
        except ValueError:
            raise ContractError(f"unknown stratum {by!r}; expected one of {STRATA_KEYS}") from None


class Scorer(Protocol):
    def supplier_scores(self, supplier: str) -> np.ndarray:
        """Scores of ``supplier`` against every company, in graph index order."""
        ...


class EncoderScorer:
    """Caches customer-tower embeddings of all companies for one year and seed."""

    def __init__(self, model: DualEncoder, graph: CompanyGraph, year: int | None = None, seed: int = 0):
        self.model = model
        self.graph = graph
        self.year = graph.latest_year() if year is None else year
        self.seed = seed
        self._customers = embed_all(graph, self.year, "customer", model, seed)
        self._suppliers: dict[str, np.ndarray] = {}

    def prefetch(self, suppliers: Iterable[str]) -> None:
        todo = sorted(set(suppliers) - set(self._suppliers))
        if not todo:
            return
        idx = np.array([self.graph.company_index(s) for s in todo])
        emb = embed_all(self.graph, self.year, "supplier", self.model, self.seed, nodes=idx)
        self._suppliers.update(zip(todo, emb))

    def supplier_scores(self, supplier: str) -> np.ndarray:
        if supplier not in self._suppliers:
            self.prefetch([supplier])
        return self._customers @ self._suppliers[supplier]


def _strata(g: CompanyGraph, supplier: str, customer: str) -> tuple[str, str, str, str]:
    si, sc = g.strata[supplier]
    ci, cc = g.strata[customer]
    return (si, sc, ci, cc)


def rank_among(scores: np.ndarray, true_pos: int, keep: np.ndarray) -> int:
    """1 + number of kept candidates (other than the true one) scoring >= the true score."""
    others = keep.copy()
    others[true_pos] = False
    return 1 + int(np.count_nonzero(scores[others] >= scores[true_pos]))


def filtered_rank(scorer: Scorer, split: ValidationSplit, supplier: str, customer: str,
                  universe: Sequence[str] | None = None) -> RankResult:
    """Rank of a held-out customer among filtered candidates for ``supplier``."""
    g = split.train_graph
    if (supplier, customer) not in split.held_out:
        raise ContractError(f"{(supplier, customer)} is not a held-out pair")
    n = g.num_companies
    keep = np.zeros(n, dtype=bool)
    if universe is None:
        keep[:] = True
    else:
        keep[[g.company_index(c) for c in universe]] = True
    s = g.company_index(supplier)
    keep[s] = False
    known = g.supply_keys()
    linked = known[(known // n) == s] % n
    keep[linked] = False
    t = g.company_index(customer)
    if not keep[t]:
        raise ContractError(f"true customer {customer!r} was filtered out of the candidates for {supplier!r}")
    scores = np.asarray(scorer.supplier_scores(supplier), dtype=np.float64)
    rank = rank_among(scores, t, keep)
    return RankResult(supplier, customer, rank, int(keep.sum()), _strata(g, supplier, customer))


def rank_heldout(scorer: Scorer, split: ValidationSplit) -> list[RankResult]:
    """Filtered ranks for every held-out pair, sorted by (supplier, customer)."""
    if isinstance(scorer, EncoderScorer):
        scorer.prefetch(split.suppliers())
    return [filtered_rank(scorer, split, a, b) for a, b in sorted(split.held_out)]


@dataclass(frozen=True)
class MetricsReport:
    mean_rank: float
    recall: dict[int, float]
    hit: dict[int, float]
    count: int
    suppliers: int

    def row(self, ns: Sequence[int]) -> list[str]:
        return ([str(self.count), str(self.suppliers), f"{self.mean_rank:.4f}"]
                + [f"{self.recall[k]:.6f}" for k in ns] + [f"{self.hit[k]:.6f}" for k in ns])


def compute_metrics(results: Sequence[RankResult], ns: Sequence[int] = DEFAULT_NS) -> MetricsReport:
    """Mean rank, recall@N (per edge) and hit@N (per supplier, any edge <= N)."""
    if not results:
        raise ContractError("compute_metrics needs at least one result")
    ranks = np.array([r.filtered_rank for r in results], dtype=np.float64)
    best: dict[str, int] = {}
    for r in results:
        best[r.supplier] = min(best.get(r.supplier, r.filtered_rank), r.filtered_rank)
    best_arr = np.array(list(best.values()))
    ns = sorted(set(int(k) for k in ns))
    return MetricsReport(
        mean_rank=float(ranks.mean()),
        recall={k: float(np.mean(ranks <= k)) for k in ns},
        hit={k: float(np.mean(best_arr <= k)) for k in ns},
        count=len(results),
        suppliers=len(best),
    )


def stratified_report(results: Sequence[RankResult], by: str,
                      ns: Sequence[int] = DEFAULT_NS) -> dict[str, MetricsReport]:
    """Metrics per label of one stratum; each report carries its bucket count."""
    if by not in STRATA_KEYS:
        raise ContractError(f"unknown stratum {by!r}; expected one of {STRATA_KEYS}")
    groups: dict[str, list[RankResult]] = {}
    for r in results:
        groups.setdefault(r.stratum(by), []).append(r)
    return {label: compute_metrics(rs, ns) for label, rs in sorted(groups.items())}


def estimate_true_hit(found_rate: float, n: int) -> float:
    """Chance at least one of ``n`` predictions is real if each is found with ``found_rate``."""
    if not (0.0 <= found_rate <= 1.0) or math.isnan(found_rate):
        raise ValueError(f"found_rate must be in [0, 1], got {found_rate}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return 1.0 - (1.0 - found_rate) ** n


# --- report files -----------------------------------------------------------------------

RANK_COLUMNS = ["supplier", "customer", "rank", "candidates",
                "sup_industry", "sup_country", "cus_industry", "cus_country"]


def metrics_header(ns: Sequence[int]) -> list[str]:
    return (["stratum", "count", "suppliers", "mean_rank"]
            + [f"recall@{k}" for k in ns] + [f"hit@{k}" for k in ns])


def render_metrics_report(overall: MetricsReport, strata: Mapping[str, Mapping[str, MetricsReport]],
                          ns: Sequence[int] = DEFAULT_NS, title: str = "filtered-rank evaluation") -> str:
    ns = sorted(ns)
    buf = io.StringIO()
    buf.write(f"# {title}\n")
    for note in REPORT_NOTES:
        buf.write(f"# {note}\n")
    w = csv.writer(buf, lineterminator="\n")
    buf.write("\n[global]\n")
    w.writerow(metrics_header(ns))
    w.writerow(["all", *overall.row(ns)])
    for by, table in strata.items():
        buf.write(f"\n[{by}]\n")
        w.writerow(metrics_header(ns))
        for label, rep in table.items():
            w.writerow([label, *rep.row(ns)])
    return buf.getvalue()


def write_rank_dump(path: str | Path, results: Sequence[RankResult]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANK_COLUMNS)
        for r in results:
            w.writerow([r.supplier, r.customer, r.filtered_rank, r.candidates, *r.strata])

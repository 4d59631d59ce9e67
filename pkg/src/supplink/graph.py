"""Company graph: feature blocks, yearly supply edges, competitor edges.

Supply edges are directed ``(supplier, customer)`` pairs.  Competitor edges
are undirected and stored as lexicographically ordered pairs.  Companies
are indexed by their position in the sorted id list, so integer order and
id order agree everywhere (neighbor lists, CSR rows, reports).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

BLOCK_KINDS = ("one-hot", "simplex", "real", "multi-hot", "embedding")
EDGE_TYPES = ("supplier", "customer", "competitor")
UNKNOWN_LABEL = "unknown"
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class FeatureBlock:
    name: str
    kind: str
    width: int

    def columns(self) -> list[str]:
        return [f"{self.name}_{j}" for j in range(self.width)]


@dataclass(frozen=True)
class FeatureBlockSchema:
    blocks: tuple[FeatureBlock, ...]

    def __post_init__(self):
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate block names in schema: {names}")
        for b in self.blocks:
            if b.kind not in BLOCK_KINDS:
                raise DataError(f"block {b.name!r}: unknown kind {b.kind!r} (expected one of {BLOCK_KINDS})")
            if int(b.width) < 1:
                raise DataError(f"block {b.name!r}: width must be >= 1, got {b.width}")
            if not b.name or "," in b.name or b.name.strip() != b.name:
                raise DataError(f"bad block name {b.name!r}")

    @property
    def total_width(self) -> int:
        return sum(b.width for b in self.blocks)

    @property
    def input_width(self) -> int:
        """Width of the model input: values followed by one mask bit per block."""
        return self.total_width + len(self.blocks)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.width)
            start += b.width
        return out

    def columns(self) -> list[str]:
        return [c for b in self.blocks for c in b.columns()]

    def to_dict(self) -> dict:
        return {"blocks": [{"name": b.name, "kind": b.kind, "width": b.width} for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureBlockSchema":
        try:
            return cls(tuple(FeatureBlock(str(b["name"]), str(b["kind"]), int(b["width"]))
                             for b in d["blocks"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed schema document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBlockSchema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read schema: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class CompanyFeatures:
    values: np.ndarray
    presence_mask: np.ndarray

    def __eq__(self, other) -> bool:
        return (isinstance(other, CompanyFeatures)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.presence_mask, other.presence_mask))

    @classmethod
    def absent(cls, schema: FeatureBlockSchema) -> "CompanyFeatures":
        return cls(np.zeros(schema.total_width), np.zeros(len(schema.blocks)))


def check_block(block: FeatureBlock, values: np.ndarray) -> str | None:
    """Return a description of the violated constraint, or None if valid."""
    if values.shape != (block.width,):
        return f"block {block.name!r} has {values.shape[0]} values, expected {block.width}"
    if not np.all(np.isfinite(values)):
        return f"block {block.name!r} has non-finite values"
    if block.kind == "simplex":
        if np.any(values < 0):
            return f"simplex block {block.name!r} has negative entries"
        if abs(values.sum() - 1.0) > SIMPLEX_TOL:
            return f"simplex block {block.name!r} sums to {values.sum():.6g}, expected 1"
    elif block.kind == "one-hot":
        if not (np.all((values == 0) | (values == 1)) and values.sum() == 1):
            return f"one-hot block {block.name!r} must contain exactly one 1 and zeros elsewhere"
    elif block.kind == "multi-hot":
        if not np.all((values == 0) | (values == 1)):
            return f"multi-hot block {block.name!r} must contain only 0/1"
    return None


def validate_features(schema: FeatureBlockSchema, f: CompanyFeatures) -> str | None:
    if f.values.shape != (schema.total_width,) or f.presence_mask.shape != (len(schema.blocks),):
        return "feature vector or mask has the wrong width"
    for k, (block, sl) in enumerate(zip(schema.blocks, schema.slices().values())):
        present = f.presence_mask[k]
        if present == 1:
            err = check_block(block, f.values[sl])
            if err:
                return err
        elif present == 0:
            if np.any(f.values[sl] != 0):
                return f"absent block {block.name!r} must be all zeros"
        else:
            return f"presence mask for block {block.name!r} must be 0 or 1"
    return None


def canonical_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class GraphSnapshot:
    year: int
    supply_edges: frozenset[tuple[str, str]]
    competitor_edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        for a, b in self.supply_edges:
            if a == b:
                raise DataError(f"year {self.year}: supply self-loop on {a!r}")
        for a, b in self.competitor_edges:
            if a == b:
                raise DataError(f"year {self.year}: competitor self-loop on {a!r}")
            if a > b:
                raise DataError(f"year {self.year}: competitor pair {(a, b)} is not canonical")


class CompanyGraph:
    """Immutable multi-year company graph with cached integer indexes."""

    def __init__(self, schema: FeatureBlockSchema, features: Mapping[str, CompanyFeatures],
                 snapshots: Sequence[GraphSnapshot], strata: Mapping[str, tuple[str, str]] | None = None):
        self.schema = schema
        self.features = dict(sorted(features.items()))
        self.snapshots = tuple(snapshots)
        years = [s.year for s in self.snapshots]
        if any(b <= a for a, b in zip(years, years[1:])):
            raise DataError(f"snapshot years must be strictly increasing, got {years}")
        strata = dict(strata or {})
        self.strata = {c: strata.get(c, (UNKNOWN_LABEL, UNKNOWN_LABEL)) for c in self.features}
        for snap in self.snapshots:
            for pair in (*snap.supply_edges, *snap.competitor_edges):
                for c in pair:
                    if c not in self.features:
                        raise DataError(f"year {snap.year}: edge endpoint {c!r} has no features entry")
        self.ids: tuple[str, ...] = tuple(self.features)
        self.index: dict[str, int] = {c: i for i, c in enumerate(self.ids)}
        self._csr: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
        self._inputs: np.ndarray | None = None
        self._supply_keys: np.ndarray | None = None

    # -- basic accessors ---------------------------------------------------
    @property
    def years(self) -> list[int]:
        return [s.year for s in self.snapshots]

    @property
    def num_companies(self) -> int:
        return len(self.ids)

    def snapshot(self, year: int) -> GraphSnapshot:
        for s in self.snapshots:
            if s.year == year:
                return s
        raise DataError(f"unknown year {year}; available years: {self.years}")

    def latest_year(self) -> int:
        if not self.snapshots:
            raise DataError("graph has no snapshots")
        return self.snapshots[-1].year

    def company_index(self, company: str) -> int:
        try:
            return self.index[company]
        except KeyError:
            raise DataError(f"unknown company {company!r}") from None

    def is_covered(self, company: str) -> bool:
        return bool(self.features[company].presence_mask.any())

    def __eq__(self, other) -> bool:
        return (isinstance(other, CompanyGraph) and self.schema == other.schema
                and self.features == other.features and self.snapshots == other.snapshots
                and self.strata == other.strata)

    def __repr__(self) -> str:
        n_edges = sum(len(s.supply_edges) for s in self.snapshots)
        return f"CompanyGraph(companies={self.num_companies}, years={self.years}, supply_edges={n_edges})"

    # -- graph queries -----------------------------------------------------
    def all_supply_pairs(self) -> set[tuple[str, str]]:
        out: set[tuple[str, str]] = set()
        for s in self.snapshots:
            out |= s.supply_edges
        return out

    def supply_keys(self) -> np.ndarray:
        """Sorted int64 keys ``supplier_idx * n + customer_idx`` over all years."""
        if self._supply_keys is None:
            n = self.num_companies
            keys = [self.index[a] * n + self.index[b] for a, b in self.all_supply_pairs()]
            self._supply_keys = np.unique(np.asarray(keys, dtype=np.int64))
        return self._supply_keys

    def has_supply_edge_any_year(self, supplier: str, customer: str) -> bool:
        return any((supplier, customer) in s.supply_edges for s in self.snapshots)

    def csr(self, year: int, edge_type: str) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) adjacency for one edge type; rows sorted ascending."""
        key = (year, edge_type)
        if key not in self._csr:
            snap = self.snapshot(year)
            if edge_type not in EDGE_TYPES:
                raise DataError(f"unknown edge type {edge_type!r}; expected one of {EDGE_TYPES}")
            ix = self.index
            if edge_type == "competitor":
                pairs = [(ix[a], ix[b]) for a, b in snap.competitor_edges]
                pairs += [(b, a) for a, b in pairs]
            else:
                sup = [(ix[a], ix[b]) for a, b in snap.supply_edges]
                pairs = sup if edge_type == "customer" else [(b, a) for a, b in sup]
            arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            order = np.lexsort((arr[:, 1], arr[:, 0]))
            arr = arr[order]
            indptr = np.zeros(self.num_companies + 1, dtype=np.int64)
            np.add.at(indptr, arr[:, 0] + 1, 1)
            self._csr[key] = (np.cumsum(indptr), arr[:, 1].copy())
        return self._csr[key]

    def model_inputs(self) -> np.ndarray:
        """(n, total_width + n_blocks) matrix: masked feature values then presence bits."""
        if self._inputs is None:
            rows = [np.concatenate([f.values, f.presence_mask]) for f in self.features.values()]
            width = self.schema.input_width
            self._inputs = np.asarray(rows, dtype=np.float64).reshape(-1, width)
        return self._inputs

    def customers_of(self, supplier: str, year: int) -> list[str]:
        return neighbors(self, supplier, "customer", year)

    # -- derived graphs ----------------------------------------------------
    def with_snapshots(self, snapshots: Sequence[GraphSnapshot]) -> "CompanyGraph":
        return CompanyGraph(self.schema, self.features, snapshots, self.strata)

    def with_company(self, company: str, features: CompanyFeatures,
                     labels: tuple[str, str] = (UNKNOWN_LABEL, UNKNOWN_LABEL),
                     supply_edges: Iterable[tuple[str, str]] = (),
                     competitor_edges: Iterable[tuple[str, str]] = (),
                     year: int | None = None) -> "CompanyGraph":
        """Copy of the graph with one extra company and optional edges in ``year``."""
        if company in self.features:
            raise DataError(f"company {company!r} already exists")
        feats = dict(self.features)
        feats[company] = features
        strata = dict(self.strata)
        strata[company] = labels
        year = self.latest_year() if year is None else year
        snaps = []
        for s in self.snapshots:
            if s.year == year:
                s = GraphSnapshot(s.year, s.supply_edges | frozenset(supply_edges),
                                  s.competitor_edges | frozenset(canonical_pair(*p) for p in competitor_edges))
            snaps.append(s)
        return CompanyGraph(self.schema, feats, snaps, strata)


def neighbors(g: CompanyGraph, company: str, edge_type: str, year: int) -> list[str]:
    """Sorted neighbor ids of ``company`` for one edge type in one year.

    supplier: companies that supply ``company``; customer: companies it
    supplies; competitor: symmetric.  The node itself is never included.
    """
    indptr, indices = g.csr(year, edge_type)
    i = g.company_index(company)
    return [g.ids[j] for j in indices[indptr[i]:indptr[i + 1]] if j != i]


def remove_edges(g: CompanyGraph, edges: Iterable[tuple[str, str]]) -> CompanyGraph:
    """New graph with the given supply pairs dropped from every year."""
    drop = frozenset(edges)
    snaps = [GraphSnapshot(s.year, s.supply_edges - drop, s.competitor_edges) for s in g.snapshots]
    return g.with_snapshots(snaps)


# -- CSV I/O ------------------------------------------------------------------

NODE_FIXED_COLUMNS = ["company_id", "industry", "country"]
EDGE_COLUMNS = ["year", "edge_type", "from_id", "to_id"]


def _fmt(x: float) -> str:
    v = float(x)
    return repr(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def _parse_float(cell: str) -> float:
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {cell!r}")
    return v


def load_graph(node_table: str | Path, edge_table: str | Path, schema: FeatureBlockSchema) -> CompanyGraph:
    """Load and validate node/edge CSVs.

    Companies referenced only by edges are created with every block absent.
    Errors carry ``file:line`` and the violated constraint.
    """
    node_table, edge_table = Path(node_table), Path(edge_table)
    expected = NODE_FIXED_COLUMNS + schema.columns()
    slices = list(schema.slices().values())
    features: dict[str, CompanyFeatures] = {}
    strata: dict[str, tuple[str, str]] = {}
    try:
        with node_table.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != expected:
                raise DataError(f"{node_table}:1: header {header} does not match schema columns {expected}")
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                where = f"{node_table}:{line}"
                if len(row) != len(expected):
                    raise DataError(f"{where}: expected {len(expected)} cells, got {len(row)}")
                cid = row[0]
                if not cid.strip():
                    raise DataError(f"{where}: empty company_id")
                if cid in features:
                    raise DataError(f"{where}: duplicate company_id {cid!r}")
                cells = row[3:]
                values = np.zeros(schema.total_width)
                mask = np.zeros(len(schema.blocks))
                for k, (block, sl) in enumerate(zip(schema.blocks, slices)):
                    part = cells[sl]
                    empty = [c.strip() == "" for c in part]
                    if all(empty):
                        continue
                    if any(empty):
                        raise DataError(f"{where}: block {block.name!r} is partially filled")
                    try:
                        vals = np.array([_parse_float(c) for c in part])
                    except ValueError as exc:
                        raise DataError(f"{where}: block {block.name!r}: {exc}") from exc
                    err = check_block(block, vals)
                    if err:
                        raise DataError(f"{where}: {err}")
                    values[sl] = vals
                    mask[k] = 1.0
                features[cid] = CompanyFeatures(values, mask)
                strata[cid] = (row[1].strip() or UNKNOWN_LABEL, row[2].strip() or UNKNOWN_LABEL)
    except OSError as exc:
        raise DataError(f"{node_table}: cannot read node table: {exc}") from exc

    supply: dict[int, set[tuple[str, str]]] = {}
    compet: dict[int, set[tuple[str, str]]] = {}
    try:
        with edge_table.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != EDGE_COLUMNS:
                raise DataError(f"{edge_table}:1: header {header} must be {EDGE_COLUMNS}")
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                where = f"{edge_table}:{line}"
                if len(row) != 4:
                    raise DataError(f"{where}: expected 4 cells, got {len(row)}")
                try:
                    year = int(row[0])
                except ValueError:
                    raise DataError(f"{where}: year {row[0]!r} is not an integer") from None
                kind, a, b = row[1].strip(), row[2], row[3]
                if not a.strip() or not b.strip():
                    raise DataError(f"{where}: empty company id")
                if a == b:
                    raise DataError(f"{where}: self-loop on {a!r}")
                if kind == "supply":
                    supply.setdefault(year, set()).add((a, b))
                elif kind == "competitor":
                    compet.setdefault(year, set()).add(canonical_pair(a, b))
                else:
                    raise DataError(f"{where}: edge_type {kind!r} must be 'supply' or 'competitor'")
                for c in (a, b):
                    if c not in features:
                        features[c] = CompanyFeatures.absent(schema)
                        strata[c] = (UNKNOWN_LABEL, UNKNOWN_LABEL)
    except OSError as exc:
        raise DataError(f"{edge_table}: cannot read edge table: {exc}") from exc

    years = sorted(set(supply) | set(compet))
    snaps = [GraphSnapshot(y, frozenset(supply.get(y, ())), frozenset(compet.get(y, ()))) for y in years]
    return CompanyGraph(schema, features, snaps, strata)


def write_node_table(g: CompanyGraph, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODE_FIXED_COLUMNS + g.schema.columns())
        slices = list(g.schema.slices().values())
        for cid, f in g.features.items():
            cells: list[str] = []
            for k, sl in enumerate(slices):
                if f.presence_mask[k]:
                    cells.extend(_fmt(v) for v in f.values[sl])
                else:
                    cells.extend([""] * (sl.stop - sl.start))
            industry, country = g.strata[cid]
            w.writerow([cid, industry, country, *cells])


def write_edge_rows(path: str | Path, rows: Iterable[tuple[int, str, str, str]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_COLUMNS)
        for row in rows:
            w.writerow(row)


def edge_rows(g: CompanyGraph) -> list[tuple[int, str, str, str]]:
    rows: list[tuple[int, str, str, str]] = []
    for s in g.snapshots:
        rows += [(s.year, "supply", a, b) for a, b in sorted(s.supply_edges)]
        rows += [(s.year, "competitor", a, b) for a, b in sorted(s.competitor_edges)]
    return rows


def write_graph(g: CompanyGraph, node_table: str | Path, edge_table: str | Path) -> None:
    write_node_table(g, node_table)
    write_edge_rows(edge_table, edge_rows(g))


def degree_stats(g: CompanyGraph, year: int) -> tuple[float, float, int]:
    """(mean, median, max) customers per supplier, over suppliers with >= 1 customer."""
    snap = g.snapshot(year)
    counts: dict[str, int] = {}
    for a, _ in snap.supply_edges:
        counts[a] = counts.get(a, 0) + 1
    if not counts:
        raise DataError(f"year {year} has no supply edges")
    arr = np.fromiter(counts.values(), dtype=np.int64)
    return float(arr.mean()), float(np.median(arr)), int(arr.max())

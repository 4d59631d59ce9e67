"""Planted-sector synthetic supply-chain graphs.

Companies get a latent sector.  True supplier->customer edges are drawn
with probability proportional to

    compatibility[sector(s), sector(c)] * activity(s) * popularity(c)

where activity and popularity are heavy-tailed (Pareto) propensities.
Observed edges keep a power-law-distributed number of each supplier's true
customers, which reproduces the "median 1, long tail" shape of reported
supply-chain coverage.  Features are noisy views of the sector.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .graph import (CompanyFeatures, CompanyGraph, FeatureBlock, FeatureBlockSchema, GraphSnapshot,
                    canonical_pair, degree_stats, write_edge_rows, write_graph)

__all__ = ["SynthConfig", "generate", "degree_stats", "default_compatibility", "write_dataset",
           "load_synth_config"]


@dataclass(frozen=True)
class SynthConfig:
    companies: int = 2000
    sectors: int = 20
    compatibility: tuple[tuple[float, ...], ...] | None = None
    sector_focus: float = 0.95
    density: float = 0.03
    skew_exponent: float = 1.75
    years: tuple[int, ...] = (2019, 2020)
    persistence: float = 0.85
    feature_noise: float = 0.25
    competitor_density: float = 0.1
    activity_shape: float = 1.5
    popularity_shape: float = 1.3
    size_noise: float = 0.15
    missing_rate: float = 0.1
    embedding_width: int = 8
    countries: tuple[str, ...] = ("US", "CN", "JP", "KR", "IN")
    seed: int = 0

    def __post_init__(self):
        if self.compatibility is not None:
            object.__setattr__(self, "compatibility",
                               tuple(tuple(float(x) for x in row) for row in self.compatibility))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "countries", tuple(str(c) for c in self.countries))
        self.validate()

    def validate(self) -> None:
        if self.companies < 2:
            raise ConfigError(f"companies must be >= 2, got {self.companies}")
        if self.sectors < 1:
            raise ConfigError(f"sectors must be >= 1, got {self.sectors}")
        if not 0.0 < self.density < 1.0:
            raise ConfigError(f"density must be in (0, 1), got {self.density}")
        if not 0.0 <= self.persistence <= 1.0:
            raise ConfigError(f"persistence must be in [0, 1], got {self.persistence}")
        if not 0.0 <= self.feature_noise <= 1.0:
            raise ConfigError(f"feature_noise must be in [0, 1], got {self.feature_noise}")
        if not 0.0 <= self.sector_focus <= 1.0:
            raise ConfigError(f"sector_focus must be in [0, 1], got {self.sector_focus}")
        if not 0.0 <= self.competitor_density <= 1.0:
            raise ConfigError(f"competitor_density must be in [0, 1], got {self.competitor_density}")
        if self.size_noise < 0:
            raise ConfigError(f"size_noise must be >= 0, got {self.size_noise}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.skew_exponent <= 0 or self.activity_shape <= 0 or self.popularity_shape <= 0:
            raise ConfigError("skew_exponent, activity_shape and popularity_shape must be > 0")
        if not self.years or any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise ConfigError(f"years must be non-empty and strictly increasing, got {list(self.years)}")
        if self.embedding_width < 1 or not self.countries:
            raise ConfigError("embedding_width must be >= 1 and countries non-empty")
        if self.compatibility is not None:
            m = np.asarray(self.compatibility, dtype=float)
            if m.shape != (self.sectors, self.sectors):
                raise ConfigError(f"compatibility must be {self.sectors}x{self.sectors}, got {m.shape}")
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
                raise ConfigError("compatibility rows must be non-negative and sum to 1")

    def compat_matrix(self) -> np.ndarray:
        if self.compatibility is not None:
            return np.asarray(self.compatibility, dtype=float)
        return default_compatibility(self.sectors, self.sector_focus)

    def schema(self) -> FeatureBlockSchema:
        return FeatureBlockSchema((
            FeatureBlock("industry", "one-hot", self.sectors),
            FeatureBlock("segments", "simplex", self.sectors),
            FeatureBlock("country", "one-hot", len(self.countries)),
            FeatureBlock("description", "embedding", self.embedding_width),
            FeatureBlock("size", "real", 1),
        ))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["years"] = list(self.years)
        d["countries"] = list(self.countries)
        if self.compatibility is not None:
            d["compatibility"] = [list(r) for r in self.compatibility]
        return d


def load_synth_config(path: str | Path | None, seed: int | None = None) -> SynthConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read synth config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: synth config must be a JSON object")
    known = {f.name for f in fields(SynthConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown synth config keys: {unknown}")
    if seed is not None:
        raw["seed"] = seed
    try:
        return SynthConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc


def default_compatibility(sectors: int, focus: float) -> np.ndarray:
    """Each sector sends ``focus`` of its mass to the next sector, the rest uniformly."""
    m = np.full((sectors, sectors), (1.0 - focus) / sectors)
    for s in range(sectors):
        m[s, (s + 1) % sectors] += focus
    return m


def _pareto(rng: np.random.Generator, shape: float, size: int) -> np.ndarray:
    return 1.0 + rng.pareto(shape, size=size)


def _keep_count(rng: np.random.Generator, degree: int, exponent: float) -> int:
    k = np.arange(1, degree + 1, dtype=float)
    p = k ** -exponent
    return int(rng.choice(degree, p=p / p.sum())) + 1


def _edge_probabilities(base: np.ndarray, target: float) -> np.ndarray:
    """Scale ``base`` so clipped probabilities sum to ``target`` (bisection)."""
    lo, hi = 0.0, 1.0
    while np.minimum(base * hi, 1.0).sum() < target:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.minimum(base * mid, 1.0).sum() < target:
            lo = mid
        else:
            hi = mid
    return np.minimum(base * hi, 1.0)


def generate(config: SynthConfig) -> tuple[CompanyGraph, frozenset[tuple[str, str]]]:
    """Build the observed multi-year graph and the full set of true edges."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, k = config.companies, config.sectors
    width = len(str(n - 1))
    ids = [f"C{i:0{width}d}" for i in range(n)]
    sector = rng.permutation(np.arange(n) % k)
    country = rng.integers(len(config.countries), size=n)

    compat = config.compat_matrix()
    activity = _pareto(rng, config.activity_shape, n)
    popularity = _pareto(rng, config.popularity_shape, n)
    base = compat[sector][:, sector] * activity[:, None] * popularity[None, :]
    np.fill_diagonal(base, 0.0)
    prob = _edge_probabilities(base, config.density * n * (n - 1))
    true_adj = rng.random((n, n)) < prob
    np.fill_diagonal(true_adj, False)

    observed: set[tuple[str, str]] = set()
    for s in range(n):
        customers = np.flatnonzero(true_adj[s])
        if customers.size == 0:
            continue
        keep = _keep_count(rng, customers.size, config.skew_exponent)
        for c in np.sort(rng.choice(customers, size=keep, replace=False)):
            observed.add((ids[s], ids[c]))
    if not observed:
        raise ConfigError("configuration produced zero observed edges; raise density")

    competitors: set[tuple[str, str]] = set()
    if config.competitor_density > 0:
        for sec in range(k):
            members = np.flatnonzero(sector == sec)
            m = members.size
            if m < 2:
                continue
            hits = np.argwhere(np.triu(rng.random((m, m)) < config.competitor_density, 1))
            competitors.update(canonical_pair(ids[members[a]], ids[members[b]]) for a, b in hits)

    # latest year holds the full observed set; earlier years keep each edge with `persistence`
    yearly = [frozenset(observed)]
    for _ in config.years[:-1]:
        prev = sorted(yearly[-1])
        kept = rng.random(len(prev)) < config.persistence
        yearly.append(frozenset(e for e, keep in zip(prev, kept) if keep))
    yearly.reverse()
    snaps = [GraphSnapshot(y, edges, frozenset(competitors)) for y, edges in zip(config.years, yearly)]

    schema = config.schema()
    noise = config.feature_noise
    centroids = rng.normal(size=(k, config.embedding_width))
    # company size: a noisy, standardized view of how many customers-to-be a company attracts
    log_pop = np.log(popularity)
    size = (log_pop - log_pop.mean()) / max(log_pop.std(), 1e-12)
    size = size + config.size_noise * rng.normal(size=n)
    features: dict[str, CompanyFeatures] = {}
    strata: dict[str, tuple[str, str]] = {}
    label_width = len(str(k - 1))
    for i, cid in enumerate(ids):
        # a misclassified company looks like another sector in every block
        profile = int(sector[i])
        if k > 1 and rng.random() < noise:
            profile = int((sector[i] + rng.integers(1, k)) % k)
        industry = np.eye(k)[profile]
        share = rng.uniform(0.5, 0.9)
        segments = share * np.eye(k)[profile] + (1.0 - share) * rng.dirichlet(np.ones(k))
        segments /= segments.sum()
        nation = np.eye(len(config.countries))[country[i]]
        desc = centroids[profile] + 0.5 * rng.normal(size=config.embedding_width)
        present = np.array([1.0, rng.random() >= config.missing_rate, 1.0,
                            rng.random() >= config.missing_rate, 1.0])
        blocks = [industry, segments, nation, desc, size[i:i + 1]]
        values = np.concatenate([b * m for b, m in zip(blocks, present)])
        features[cid] = CompanyFeatures(values, present.astype(float))
        strata[cid] = (f"S{profile:0{label_width}d}", config.countries[country[i]])

    truth = frozenset((ids[a], ids[b]) for a, b in np.argwhere(true_adj))
    return CompanyGraph(schema, features, snaps, strata), truth


def write_dataset(graph: CompanyGraph, truth: frozenset[tuple[str, str]], out_dir: str | Path,
                  config: SynthConfig | None = None) -> dict[str, Path]:
    """Write nodes.csv, edges.csv, truth_edges.csv and schema.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"nodes": out / "nodes.csv", "edges": out / "edges.csv",
             "truth": out / "truth_edges.csv", "schema": out / "schema.json"}
    write_graph(graph, paths["nodes"], paths["edges"])
    truth_sorted = sorted(truth)
    write_edge_rows(paths["truth"], [(y, "supply", a, b) for y in graph.years for a, b in truth_sorted])
    graph.schema.save(paths["schema"])
    if config is not None:
        paths["config"] = out / "synth_config.json"
        paths["config"].write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return paths


def observed_degrees(graph: CompanyGraph, year: int) -> np.ndarray:
    counts: dict[str, int] = {}
    for a, _ in graph.snapshot(year).supply_edges:
        counts[a] = counts.get(a, 0) + 1
    return np.array(sorted(counts.values()), dtype=np.int64)


def sector_pair_counts(truth: Sequence[tuple[str, str]] | frozenset, sector_of: dict[str, int],
                       sectors: int) -> np.ndarray:
    counts = np.zeros((sectors, sectors), dtype=np.int64)
    for a, b in truth:
        counts[sector_of[a], sector_of[b]] += 1
    return counts


def latent_sectors(config: SynthConfig) -> np.ndarray:
    """True sector per company index; the first draw :func:`generate` makes."""
    rng = np.random.default_rng(config.seed)
    return rng.permutation(np.arange(config.companies) % config.sectors)

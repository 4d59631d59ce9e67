from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np
import pytest

from supplink.graph import (CompanyFeatures, CompanyGraph, FeatureBlock, FeatureBlockSchema, GraphSnapshot,
                            canonical_pair)

SMALL_SCHEMA = FeatureBlockSchema((
    FeatureBlock("industry", "one-hot", 3),
    FeatureBlock("mix", "simplex", 2),
    FeatureBlock("size", "real", 1),
))


def random_features(rng: np.random.Generator, schema: FeatureBlockSchema = SMALL_SCHEMA) -> CompanyFeatures:
    parts = []
    for b in schema.blocks:
        if b.kind == "one-hot":
            parts.append(np.eye(b.width)[rng.integers(b.width)])
        elif b.kind == "simplex":
            parts.append(rng.dirichlet(np.ones(b.width)))
        elif b.kind == "multi-hot":
            parts.append((rng.random(b.width) < 0.5).astype(float))
        else:
            parts.append(rng.normal(size=b.width))
    return CompanyFeatures(np.concatenate(parts), np.ones(len(schema.blocks)))


def make_graph(ids: Iterable[str], supply: Mapping[int, Iterable[tuple[str, str]]],
               competitors: Mapping[int, Iterable[tuple[str, str]]] | None = None, seed: int = 0,
               schema: FeatureBlockSchema = SMALL_SCHEMA,
               strata: Mapping[str, tuple[str, str]] | None = None) -> CompanyGraph:
    rng = np.random.default_rng(seed)
    ids = sorted(ids)
    features = {c: random_features(rng, schema) for c in ids}
    competitors = competitors or {}
    years = sorted(set(supply) | set(competitors))
    snaps = [GraphSnapshot(y, frozenset(supply.get(y, ())),
                           frozenset(canonical_pair(a, b) for a, b in competitors.get(y, ())))
             for y in years]
    return CompanyGraph(schema, features, snaps, strata)


def random_graph(n: int, p: float, seed: int, years: tuple[int, ...] = (2020,),
                 competitor_p: float = 0.05) -> CompanyGraph:
    rng = np.random.default_rng(seed)
    ids = [f"N{i:03d}" for i in range(n)]
    supply, comp = {}, {}
    for y in years:
        adj = rng.random((n, n)) < p
        np.fill_diagonal(adj, False)
        supply[y] = [(ids[a], ids[b]) for a, b in np.argwhere(adj)]
        cadj = np.triu(rng.random((n, n)) < competitor_p, 1)
        comp[y] = [(ids[a], ids[b]) for a, b in np.argwhere(cadj)]
    return make_graph(ids, supply, comp, seed=seed)


@pytest.fixture
def small_schema() -> FeatureBlockSchema:
    return SMALL_SCHEMA


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)

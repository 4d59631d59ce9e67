"""Dual-tower multi-edge-type graph attention encoder.

Each tower (``supplier`` and ``customer``) is

    feature MLP -> [hop_0 ... hop_{H-1}] -> projection

where every hop runs one attention layer per edge type (supplier,
customer, competitor), concatenates the three outputs with the node's own
representation and feeds that through an aggregation MLP.  The outermost
hop runs first, on every node up to H-1 edges from the target; the last
hop produces the target's representation.

A pair score is the dot product of the supplier-tower embedding of the
first company and the customer-tower embedding of the second.

Neighbor lists longer than ``fanout`` are subsampled.  The subsample for a
node depends only on (seed, company id, edge type, year), so a node gets
the same receptive field no matter which batch it is encoded in.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, DimensionError
from .graph import EDGE_TYPES, CompanyGraph, FeatureBlockSchema
from .tensor import ParamStore, Tensor

TOWERS = ("supplier", "customer")
NORMALIZATIONS = ("softmax", "literal")
LITERAL_MIN_ABS_SUM = 1e-12
MODEL_FORMAT = "supplink-model/1"


@dataclass(frozen=True)
class EncoderConfig:
    hops: int = 2
    feature_hidden: tuple[int, ...] = (64,)
    hidden_width: int = 32
    attn_width: int = 16
    value_width: int = 16
    agg_hidden: tuple[int, ...] = (32,)
    embed_width: int = 32
    normalization: str = "softmax"
    fanout: int = 25

    def __post_init__(self):
        object.__setattr__(self, "feature_hidden", tuple(int(w) for w in self.feature_hidden))
        object.__setattr__(self, "agg_hidden", tuple(int(w) for w in self.agg_hidden))
        if self.hops < 0:
            raise ConfigError(f"hops must be >= 0, got {self.hops}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.fanout < 1:
            raise ConfigError(f"fanout must be >= 1, got {self.fanout}")
        widths = (self.hidden_width, self.attn_width, self.value_width, self.embed_width,
                  *self.feature_hidden, *self.agg_hidden)
        if any(w < 1 for w in widths):
            raise ConfigError("all layer widths must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_hidden"] = list(self.feature_hidden)
        d["agg_hidden"] = list(self.agg_hidden)
        return d


@dataclass(frozen=True)
class DualEncoder:
    """Learnable weights of both towers plus the architecture that reads them."""

    config: EncoderConfig
    params: ParamStore
    input_width: int
    schema_digest: str = ""

    def with_params(self, params: ParamStore) -> "DualEncoder":
        return replace(self, params=params)


def init_encoder(config: EncoderConfig, schema: FeatureBlockSchema, seed: int) -> DualEncoder:
    """Glorot-uniform weights, zero biases, drawn from PCG64(seed) in path order."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    d_in = schema.input_width
    d_h = config.hidden_width
    for tower in TOWERS:
        arrays.update(T.init_mlp(rng, f"{tower}.features", [d_in, *config.feature_hidden, d_h]))
        for hop in range(config.hops):
            for etype in EDGE_TYPES:
                base = f"{tower}.hop{hop}.{etype}"
                arrays[f"{base}.w_q"] = T.glorot_uniform(rng, d_h, config.attn_width)
                arrays[f"{base}.w_k"] = T.glorot_uniform(rng, d_h, config.attn_width)
                arrays[f"{base}.w_v"] = T.glorot_uniform(rng, d_h, config.value_width)
            agg_in = 3 * config.value_width + d_h
            arrays.update(T.init_mlp(rng, f"{tower}.hop{hop}.aggregate", [agg_in, *config.agg_hidden, d_h]))
        arrays.update(T.init_mlp(rng, f"{tower}.projection", [d_h, config.embed_width]))
    return DualEncoder(config, ParamStore(arrays), d_in, schema.digest())


# --- attention ---------------------------------------------------------------

def attention_weights(scores: Tensor, segments: np.ndarray, num_segments: int, norm: str) -> Tensor:
    """Normalize raw query-key scores within each destination segment."""
    if norm == "softmax":
        return T.segment_softmax(scores, segments, num_segments)
    if norm == "literal":
        totals = T.segment_sum(scores, segments, num_segments)
        used = np.unique(segments)
        if used.size and np.min(np.abs(totals.data[used])) < LITERAL_MIN_ABS_SUM:
            raise ContractError("literal attention: neighbor score sum is ~0; weights are undefined")
        return T.div(scores, T.take(totals, segments))
    raise ConfigError(f"unknown attention normalization {norm!r}")


def gat_block(h_dst: Tensor, h_src: Tensor, dst: np.ndarray, src: np.ndarray,
              p: ParamStore, norm: str) -> Tensor:
    """Batched attention layer over an edge list.

    ``dst[e]`` indexes rows of ``h_dst`` (queries), ``src[e]`` rows of
    ``h_src`` (keys/values).  Rows of ``h_dst`` without edges get zeros.
    """
    w_q, w_k, w_v = p["w_q"], p["w_k"], p["w_v"]
    if w_q.shape[1] != w_k.shape[1]:
        raise DimensionError(f"{w_q.name}: query width {w_q.shape[1]} != key width {w_k.shape[1]}")
    for h, w in ((h_dst, w_q), (h_src, w_k), (h_src, w_v)):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(f"{w.name}: expects hidden width {w.shape[0]}, got {h.shape[-1]}")
    n = h_dst.shape[0]
    if len(dst) == 0:
        return Tensor(np.zeros((n, w_v.shape[1])))
    q = T.take(T.matmul(h_dst, w_q), dst)
    keys = T.matmul(h_src, w_k)
    vals = T.matmul(h_src, w_v)
    scores = T.rowdot(q, T.take(keys, src))
    w = attention_weights(scores, dst, n, norm)
    weighted = T.mul(T.reshape(w, (-1, 1)), T.take(vals, src))
    return T.segment_sum(weighted, dst, n)


def gat_layer(h_self: Tensor, h_neighbors: Sequence[Tensor], p: ParamStore,
              norm: str = "softmax") -> Tensor:
    """Attention output for a single node given its neighbors' vectors."""
    h_self = T.as_tensor(h_self)
    if not h_neighbors:
        return Tensor(np.zeros(p["w_v"].shape[1]))
    for h in h_neighbors:
        if T.as_tensor(h).shape != h_self.shape:
            raise DimensionError(f"neighbor width {T.as_tensor(h).shape} differs from self {h_self.shape}")
    h_src = T.concat([T.reshape(T.as_tensor(h), (1, -1)) for h in h_neighbors], axis=0)
    dst = np.zeros(len(h_neighbors), dtype=np.int64)
    out = gat_block(T.reshape(h_self, (1, -1)), h_src, dst, np.arange(len(h_neighbors)), p, norm)
    return T.reshape(out, (-1,))


def hop_aggregate(h_self: Tensor, supplier_out: Tensor, customer_out: Tensor,
                  competitor_out: Tensor, p: ParamStore) -> Tensor:
    """f_theta(supplier || customer || competitor || self); works on rows or single vectors."""
    parts = [T.as_tensor(x) for x in (supplier_out, customer_out, competitor_out, h_self)]
    first = T.mlp_layers(p.subtree("aggregate"))[0][0]
    width = sum(x.shape[-1] for x in parts)
    if width != first.shape[0]:
        raise DimensionError(f"{first.name}: expects concatenated width {first.shape[0]}, got {width}")
    return T.mlp_apply(p.subtree("aggregate"), T.concat(parts, axis=-1))


# --- neighbor sampling ---------------------------------------------------------

def _node_rng(seed: int, company: str, etype: int, year: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(company.encode("utf-8")), etype, int(year) & 0xFFFFFFFF])


def sampled_neighbors(g: CompanyGraph, nodes: np.ndarray, year: int, edge_type: str,
                      fanout: int, seed: int, exclude: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor edges for ``nodes`` as (owner position, neighbor index) arrays.

    ``exclude`` holds sorted supply keys (supplier * n + customer) that are
    hidden from message passing.  Lists longer than ``fanout`` are
    subsampled uniformly without replacement, keeping ascending order.
    """
    indptr, indices = g.csr(year, edge_type)
    nodes = np.asarray(nodes, dtype=np.int64)
    starts, ends = indptr[nodes], indptr[nodes + 1]
    counts = ends - starts
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(nodes), dtype=np.int64), counts)
    if total == 0:
        return owner, owner.copy()
    offsets = np.repeat(starts - (np.cumsum(counts) - counts), counts)
    nbr = indices[offsets + np.arange(total)]
    keep = nbr != nodes[owner]
    if exclude is not None and len(exclude) and edge_type != "competitor":
        n = g.num_companies
        me = nodes[owner]
        keys = me * n + nbr if edge_type == "customer" else nbr * n + me
        keep &= ~np.isin(keys, exclude, assume_unique=False)
    owner, nbr = owner[keep], nbr[keep]
    counts = np.bincount(owner, minlength=len(nodes))
    heavy = np.flatnonzero(counts > fanout)
    if heavy.size:
        keep = np.ones(len(owner), dtype=bool)
        starts = np.cumsum(counts) - counts
        etype_code = EDGE_TYPES.index(edge_type)
        for pos in heavy:
            rng = _node_rng(seed, g.ids[nodes[pos]], etype_code, year)
            chosen = rng.choice(counts[pos], size=fanout, replace=False)
            drop = np.ones(counts[pos], dtype=bool)
            drop[chosen] = False
            keep[starts[pos]:starts[pos] + counts[pos]] = ~drop
        owner, nbr = owner[keep], nbr[keep]
    return owner, nbr


# --- encoding ---------------------------------------------------------------------

def _positions(sorted_set: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_set, values)


def encode_nodes(g: CompanyGraph, nodes: np.ndarray, year: int, tower: str, model: DualEncoder,
                 seed: int = 0, fanout: int | None = None,
                 exclude: np.ndarray | None = None) -> Tensor:
    """Embeddings (len(nodes), embed_width) for integer node indices, on the tape."""
    if tower not in TOWERS:
        raise ContractError(f"tower must be one of {TOWERS}, got {tower!r}")
    cfg = model.config
    fanout = cfg.fanout if fanout is None else int(fanout)
    if fanout < 1:
        raise ContractError(f"fanout must be >= 1, got {fanout}")
    nodes = np.asarray(nodes, dtype=np.int64)
    inputs = g.model_inputs()
    if inputs.shape[1] != model.input_width:
        raise DataError(f"graph input width {inputs.shape[1]} != model input width {model.input_width}")
    if cfg.hops:
        g.snapshot(year)
    p = model.params.subtree(tower)

    # node sets from the target outward: sets[0] = targets, sets[k] = within k edges
    sets = [np.unique(nodes)]
    blocks: list[dict[str, tuple[np.ndarray, np.ndarray]]] = []
    for _ in range(cfg.hops):
        frontier = sets[-1]
        blk = {et: sampled_neighbors(g, frontier, year, et, fanout, seed, exclude) for et in EDGE_TYPES}
        sets.append(np.unique(np.concatenate([frontier, *(nb for _, nb in blk.values())])))
        blocks.append(blk)

    h = T.mlp_apply(p.subtree("features"), Tensor(inputs[sets[-1]]))
    for hop in range(cfg.hops):
        outer, inner = sets[cfg.hops - hop], sets[cfg.hops - hop - 1]
        blk = blocks[cfg.hops - hop - 1]
        h_self = T.take(h, _positions(outer, inner))
        hp = p.subtree(f"hop{hop}")
        outs = [gat_block(h_self, h, owner, _positions(outer, nbr), hp.subtree(et), cfg.normalization)
                for et, (owner, nbr) in ((et, blk[et]) for et in EDGE_TYPES)]
        h = hop_aggregate(h_self, *outs, hp)
    emb = T.mlp_apply(p.subtree("projection"), h)
    return T.take(emb, _positions(sets[0], nodes))


def encode(g: CompanyGraph, company: str, year: int, tower: str, model: DualEncoder,
           fanout: int | None = None, seed: int = 0) -> Tensor:
    """Embedding of one company (width ``embed_width``)."""
    i = g.company_index(company)
    if model.config.hops:
        g.snapshot(year)
    return T.reshape(encode_nodes(g, np.array([i]), year, tower, model, seed, fanout), (-1,))


def embed_all(g: CompanyGraph, year: int, tower: str, model: DualEncoder, seed: int = 0,
              nodes: np.ndarray | None = None, chunk: int = 1024) -> np.ndarray:
    """Plain-array embeddings for many nodes (all companies by default)."""
    nodes = np.arange(g.num_companies) if nodes is None else np.asarray(nodes, dtype=np.int64)
    out = np.zeros((len(nodes), model.config.embed_width))
    for start in range(0, len(nodes), chunk):
        part = nodes[start:start + chunk]
        out[start:start + len(part)] = encode_nodes(g, part, year, tower, model, seed).data
    return out


def score_pair(g: CompanyGraph, a: str, b: str, year: int, model: DualEncoder,
               fanout: int | None = None, seed: int = 0) -> float:
    e_a = encode(g, a, year, "supplier", model, fanout, seed)
    e_b = encode(g, b, year, "customer", model, fanout, seed)
    return float(e_a.data @ e_b.data)


def score_all(g: CompanyGraph, a: str, candidates: Sequence[str], year: int, model: DualEncoder,
              fanout: int | None = None, seed: int = 0) -> list[tuple[str, float]]:
    """Scores of ``a`` against each candidate, in candidate order."""
    if not candidates:
        raise ContractError("score_all needs at least one candidate")
    e_a = encode(g, a, year, "supplier", model, fanout, seed).data
    idx = np.array([g.company_index(c) for c in candidates])
    uniq, inv = np.unique(idx, return_inverse=True)
    e_c = encode_nodes(g, uniq, year, "customer", model, seed, fanout).data
    scores = e_c @ e_a
    return [(c, float(scores[k])) for c, k in zip(candidates, inv)]


# --- serialization -----------------------------------------------------------------

def save_model(path: str | Path, model: DualEncoder, provenance: dict | None = None) -> None:
    """Write a self-describing JSON model file (exact float round-trip)."""
    doc = {
        "format": MODEL_FORMAT,
        "schema_digest": model.schema_digest,
        "input_width": model.input_width,
        "config": model.config.to_dict(),
        "provenance": provenance or {},
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in model.params.arrays().items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_model(path: str | Path, schema: FeatureBlockSchema | None = None) -> tuple[DualEncoder, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read model file: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: unsupported model format {doc.get('format')!r}")
    if schema is not None and doc["schema_digest"] != schema.digest():
        raise DataError(f"{path}: model was trained on a different feature schema "
                        f"({doc['schema_digest'][:12]} != {schema.digest()[:12]})")
    cfg = EncoderConfig(**doc["config"])
    params = ParamStore({k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                         for k, v in doc["params"].items()})
    return DualEncoder(cfg, params, int(doc["input_width"]), doc["schema_digest"]), doc["provenance"]

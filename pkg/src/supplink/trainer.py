"""Training: random negatives, pairwise logistic loss, two-step hard negatives.

Step 1 pairs every positive (supplier, customer, year) with one random
non-edge for the same supplier.  Step 2 retrains from a fresh
initialization, drawing each supplier's negative from the pool of
non-edges that the step-1 model scored above a quantile threshold (and
falling back to random negatives for suppliers missing from the pool).

During training the batch's own positive edges are hidden from message
passing, so a pair is never scored with itself in the neighborhood.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Literal, Mapping

import numpy as np

from . import tensor as T
from .encoder import DualEncoder, EncoderConfig, encode_nodes, init_encoder, load_model, save_model
from .errors import ConfigError, ContractError, DataError, SamplingError
from .graph import CompanyGraph, FeatureBlockSchema
from .tensor import AdamState, Tensor

log = logging.getLogger(__name__)

LossForm = Literal["corrected", "literal"]


@dataclass(frozen=True)
class EdgeSample:
    supplier: str
    customer: str
    year: int
    polarity: Literal["positive", "negative"] = "positive"


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 40
    batch_size: int = 1024
    seed: int = 0
    fanout: int = 25
    resample_attempts: int = 100
    hard_negative_quantile: float = 0.95
    pool_size: int = 5000
    mining_samples: int = 10000
    pool_holdout_fraction: float = 0.2
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_form: str = "corrected"
    split_degree_ceiling: int = 20
    split_per_company: int = 2
    model: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.model, Mapping):
            object.__setattr__(self, "model", _encoder_config(self.model))
        if self.model.fanout != self.fanout:
            object.__setattr__(self, "model", replace(self.model, fanout=self.fanout))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.fanout < 1:
            raise ConfigError(f"fanout must be >= 1, got {self.fanout}")
        if self.resample_attempts < 1:
            raise ConfigError(f"resample_attempts must be >= 1, got {self.resample_attempts}")
        if not 0.0 < self.hard_negative_quantile < 1.0:
            raise ConfigError(f"hard_negative_quantile must be in (0, 1), got {self.hard_negative_quantile}")
        if self.pool_size < self.batch_size:
            raise ConfigError(f"pool_size ({self.pool_size}) must be >= batch_size ({self.batch_size})")
        if self.mining_samples < 1:
            raise ConfigError(f"mining_samples must be >= 1, got {self.mining_samples}")
        if not 0.0 <= self.pool_holdout_fraction < 1.0:
            raise ConfigError(f"pool_holdout_fraction must be in [0, 1), got {self.pool_holdout_fraction}")
        if self.learning_rate <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("optimizer hyperparameters out of range")
        if self.loss_form not in ("corrected", "literal"):
            raise ConfigError(f"loss_form must be 'corrected' or 'literal', got {self.loss_form!r}")
        if self.split_degree_ceiling < 2 or self.split_per_company < 1:
            raise ConfigError("split_degree_ceiling must be >= 2 and split_per_company >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        model = self.model.to_dict()
        model.pop("fanout")
        d["model"] = model
        return d

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainingConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("training config must be a key-value object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc


def _encoder_config(raw: Mapping) -> EncoderConfig:
    known = {f.name for f in fields(EncoderConfig)} - {"fanout"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown model config keys: {unknown}")
    try:
        return EncoderConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def load_training_config(path: str | Path | None, seed: int | None = None) -> TrainingConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read training config: {exc}") from exc
    if seed is not None:
        raw = {**raw, "seed": seed}
    return TrainingConfig.from_dict(raw)


@dataclass
class TrainedModel:
    encoder: DualEncoder
    provenance: dict

    @property
    def step(self) -> int:
        return int(self.provenance.get("step", 1))

    def save(self, path: str | Path) -> None:
        save_model(path, self.encoder, self.provenance)

    @classmethod
    def load(cls, path: str | Path, schema: FeatureBlockSchema | None = None) -> "TrainedModel":
        enc, prov = load_model(path, schema)
        return cls(enc, prov)


# --- loss ------------------------------------------------------------------------

def pairwise_loss(s_pos: float, s_neg: float) -> float:
    """log(1 + exp(s_neg - s_pos)), overflow-safe."""
    x = float(s_neg) - float(s_pos)
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def pairwise_loss_tensor(s_pos: Tensor, s_neg: Tensor, form: str = "corrected") -> Tensor:
    """Elementwise pairwise logistic loss on the tape.

    ``form="literal"`` uses log(1 + exp(s_pos - s_neg)), which rewards
    ranking the negative higher; it exists only for demonstration.
    """
    margin = T.sub(s_neg, s_pos) if form == "corrected" else T.sub(s_pos, s_neg)
    return T.softplus(margin)


# --- sampling ----------------------------------------------------------------------

def positive_samples(g: CompanyGraph) -> np.ndarray:
    """(m, 3) int array of (supplier index, customer index, year), sorted."""
    rows = [(g.index[a], g.index[b], s.year) for s in g.snapshots for a, b in s.supply_edges]
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    arr = np.asarray(rows, dtype=np.int64)
    return arr[np.lexsort((arr[:, 1], arr[:, 0], arr[:, 2]))]


def sample_negative(g: CompanyGraph, positive: EdgeSample, rng: np.random.Generator,
                    attempts: int = 100) -> EdgeSample:
    """Uniform customer C with (supplier, C) absent from every snapshot."""
    s = g.company_index(positive.supplier)
    c = sample_negative_indices(g, np.array([s]), rng, attempts)[0]
    return EdgeSample(positive.supplier, g.ids[c], positive.year, "negative")


def sample_negative_indices(g: CompanyGraph, suppliers: np.ndarray, rng: np.random.Generator,
                            attempts: int = 100) -> np.ndarray:
    """Vectorized rejection sampling; each slot gets at most ``attempts`` draws."""
    n = g.num_companies
    keys = g.supply_keys()
    suppliers = np.asarray(suppliers, dtype=np.int64)
    out = np.full(len(suppliers), -1, dtype=np.int64)
    todo = np.arange(len(suppliers))
    for _ in range(attempts):
        if todo.size == 0:
            break
        draw = rng.integers(n, size=todo.size)
        ok = (draw != suppliers[todo]) & ~np.isin(suppliers[todo] * n + draw, keys)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    if todo.size:
        who = g.ids[suppliers[todo[0]]]
        raise SamplingError(f"no negative found for supplier {who!r} after {attempts} attempts; "
                            "graph is too dense around it")
    return out


@dataclass
class NegativePool:
    """Hard negatives mined from a step-1 model, grouped by supplier index."""

    entries: dict[int, list[tuple[int, int, float]]]
    threshold: float
    sampled: int

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def flat(self) -> np.ndarray:
        """(k, 4) array: supplier, customer, year, step-1 score."""
        rows = [(s, c, y, sc) for s, lst in sorted(self.entries.items()) for c, y, sc in lst]
        return np.asarray(rows, dtype=np.float64).reshape(-1, 4)

    def split(self, fraction: float, rng: np.random.Generator) -> tuple["NegativePool", "NegativePool"]:
        """Seeded (kept, held-out) partition of entries."""
        flat = self.flat()
        held = rng.random(len(flat)) < fraction
        return self._from_rows(flat[~held]), self._from_rows(flat[held])

    def _from_rows(self, rows: np.ndarray) -> "NegativePool":
        entries: dict[int, list[tuple[int, int, float]]] = {}
        for s, c, y, sc in rows:
            entries.setdefault(int(s), []).append((int(c), int(y), float(sc)))
        return NegativePool(entries, self.threshold, self.sampled)

    def samples(self, g: CompanyGraph) -> list[EdgeSample]:
        return [EdgeSample(g.ids[s], g.ids[c], y, "negative")
                for s, lst in sorted(self.entries.items()) for c, y, _ in lst]


# --- training ----------------------------------------------------------------------

def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def batch_loss(model: DualEncoder, g: CompanyGraph, sup: np.ndarray, pos: np.ndarray, neg: np.ndarray,
               years: np.ndarray, seed: int, form: str = "corrected", hide_positives: bool = True) -> Tensor:
    """Mean pairwise loss over a batch of (supplier, positive, negative, year) rows."""
    n = g.num_companies
    exclude = np.unique(sup * n + pos) if hide_positives else None
    total: Tensor | None = None
    for year in np.unique(years):
        m = years == year
        k = int(m.sum())
        e_s = encode_nodes(g, sup[m], int(year), "supplier", model, seed, exclude=exclude)
        e_c = encode_nodes(g, np.concatenate([pos[m], neg[m]]), int(year), "customer", model, seed,
                           exclude=exclude)
        s_pos = T.rowdot(e_s, T.take(e_c, np.arange(k)))
        s_neg = T.rowdot(e_s, T.take(e_c, np.arange(k, 2 * k)))
        part = T.tsum(pairwise_loss_tensor(s_pos, s_neg, form))
        total = part if total is None else T.add(total, part)
    assert total is not None
    return T.mul(total, 1.0 / len(sup))


def _pool_negatives(pool: NegativePool, sup: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.full(len(sup), -1, dtype=np.int64)
    for i, s in enumerate(sup):
        lst = pool.entries.get(int(s))
        if lst:
            out[i] = lst[int(rng.integers(len(lst)))][0]
    return out


def train(g: CompanyGraph, config: TrainingConfig, negatives: str = "random",
          pool: NegativePool | None = None, step: int = 1, init_seed: int | None = None,
          callback=None) -> TrainedModel:
    """Train one model; ``negatives`` is ``"random"`` or ``"pool"``."""
    if negatives not in ("random", "pool"):
        raise ContractError(f"negatives must be 'random' or 'pool', got {negatives!r}")
    if negatives == "pool" and pool is None:
        raise ContractError("pool negatives requested without a pool")
    positives = positive_samples(g)
    if len(positives) == 0:
        raise DataError("training graph has no positive supply edges")
    init_seed = config.seed if init_seed is None else init_seed
    model = init_encoder(config.model, g.schema, init_seed)
    state = AdamState.fresh(model.params, lr=config.learning_rate, beta1=config.beta1,
                            beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng([config.seed, step])
    epoch_losses: list[float] = []
    mix = {"pool": 0, "random": 0}
    for epoch in range(config.epochs):
        order = rng.permutation(len(positives))
        losses, weights = [], []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            rows = positives[order[start:start + config.batch_size]]
            sup, pos, years = rows[:, 0], rows[:, 1], rows[:, 2]
            neg = _pool_negatives(pool, sup, rng) if negatives == "pool" else np.full(len(sup), -1)
            fallback = neg < 0
            mix["pool"] += int((~fallback).sum())
            mix["random"] += int(fallback.sum())
            if fallback.any():
                neg[fallback] = sample_negative_indices(g, sup[fallback], rng, config.resample_attempts)
            loss = batch_loss(model, g, sup, pos, neg, years, _sub_seed(config.seed, step, epoch, b),
                              config.loss_form)
            grads = T.backward(loss, model.params)
            params, state = T.adam_step(model.params, grads, state)
            model = model.with_params(params)
            losses.append(loss.item())
            weights.append(len(sup))
        epoch_losses.append(float(np.average(losses, weights=weights)))
        log.info("step %d epoch %d loss %.5f", step, epoch + 1, epoch_losses[-1])
        if callback is not None:
            callback(epoch, model, epoch_losses[-1])
    provenance = {
        "step": step,
        "seed": config.seed,
        "init_seed": init_seed,
        "negatives": negatives,
        "negative_mix": mix,
        "epoch_losses": epoch_losses,
        "config": config.to_dict(),
    }
    return TrainedModel(model, provenance)


def score_pairs(model: DualEncoder, g: CompanyGraph, sup: np.ndarray, cus: np.ndarray,
                years: np.ndarray, seed: int) -> np.ndarray:
    """Plain scores for index pairs, grouped by year (no edges hidden)."""
    out = np.zeros(len(sup))
    for year in np.unique(years):
        m = years == year
        us, inv_s = np.unique(sup[m], return_inverse=True)
        uc, inv_c = np.unique(cus[m], return_inverse=True)
        e_s = encode_nodes(g, us, int(year), "supplier", model, seed).data
        e_c = encode_nodes(g, uc, int(year), "customer", model, seed).data
        out[m] = np.einsum("ij,ij->i", e_s[inv_s], e_c[inv_c])
    return out


def mine_hard_negatives(model1: TrainedModel, g: CompanyGraph, config: TrainingConfig,
                        rng: np.random.Generator) -> NegativePool:
    """Score random non-edges with the step-1 model and keep those above the q-quantile."""
    if model1.step != 1:
        raise ContractError(f"hard negatives must be mined with a step-1 model, got step {model1.step}")
    positives = positive_samples(g)
    if len(positives) == 0:
        raise DataError("training graph has no positive supply edges")
    sup = rng.integers(g.num_companies, size=config.mining_samples)
    years = np.asarray(g.years, dtype=np.int64)[rng.integers(len(g.years), size=config.mining_samples)]
    cus = sample_negative_indices(g, sup, rng, config.resample_attempts)
    scores = score_pairs(model1.encoder, g, sup, cus, years, config.seed)
    tau = float(np.quantile(scores, config.hard_negative_quantile))
    hard = np.flatnonzero(scores > tau)
    if hard.size == 0:
        raise SamplingError(f"no sampled non-edge scored above the {config.hard_negative_quantile} "
                            f"quantile ({tau:.6g}); lower hard_negative_quantile")
    hard = hard[np.argsort(-scores[hard], kind="stable")]
    seen: set[tuple[int, int, int]] = set()
    entries: dict[int, list[tuple[int, int, float]]] = {}
    kept = 0
    for i in hard:
        key = (int(sup[i]), int(cus[i]), int(years[i]))
        if key in seen:
            continue
        seen.add(key)
        entries.setdefault(key[0], []).append((key[1], key[2], float(scores[i])))
        kept += 1
        if kept >= config.pool_size:
            break
    return NegativePool(dict(sorted(entries.items())), tau, config.mining_samples)


@dataclass
class TwoStepResult:
    model1: TrainedModel
    model2: TrainedModel
    pool: NegativePool
    holdout: NegativePool

    def __iter__(self) -> Iterator[TrainedModel]:
        return iter((self.model1, self.model2))


def two_step_train(g: CompanyGraph, config: TrainingConfig, callback=None) -> TwoStepResult:
    """Step 1 on random negatives, mine, then step 2 from scratch on the pool.

    A seeded slice of the pool (``pool_holdout_fraction``) is kept out of
    step-2 training so both models can be compared on unseen hard negatives.
    Unpacks as ``model1, model2``.
    """
    model1 = train(g, config, "random", step=1, init_seed=config.seed, callback=callback)
    rng = np.random.default_rng([config.seed, 7919])
    pool = mine_hard_negatives(model1, g, config, rng)
    kept, holdout = pool.split(config.pool_holdout_fraction, rng)
    if len(kept) == 0:
        raise SamplingError("every mined hard negative landed in the held-out slice; "
                            "lower pool_holdout_fraction")
    model2 = train(g, config, "pool", pool=kept, step=2, init_seed=config.seed + 1, callback=callback)
    model2.provenance["pool"] = {"threshold": pool.threshold, "sampled": pool.sampled,
                                 "size": len(pool), "train_entries": len(kept),
                                 "holdout_entries": len(holdout),
                                 "quantile": config.hard_negative_quantile}
    return TwoStepResult(model1, model2, kept, holdout)

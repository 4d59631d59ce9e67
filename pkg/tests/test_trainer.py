import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_graph, random_graph
from supplink import trainer as TR
from supplink.encoder import EncoderConfig, init_encoder
from supplink.errors import ConfigError, ContractError, DataError, SamplingError
from supplink.graph import CompanyFeatures
from supplink.tensor import ParamStore
from supplink.trainer import (EdgeSample, TrainedModel, TrainingConfig, load_training_config,
                              mine_hard_negatives, pairwise_loss, sample_negative, sample_negative_indices, train,
                              two_step_train)

TINY = EncoderConfig(hops=1, feature_hidden=(6,), hidden_width=6, attn_width=4, value_width=4, agg_hidden=(6,),
                     embed_width=4)


def small_config(**kw) -> TrainingConfig:
    base = dict(epochs=3, batch_size=32, pool_size=64, mining_samples=400, fanout=5, learning_rate=1e-2,
                model=TINY)
    return TrainingConfig(**{**base, **kw})


def two_sector_graph(n=100, p=0.1, seed=0):
    """Companies 0..n/2-1 in sector 0, the rest in sector 1; edges only inside a sector."""
    rng = np.random.default_rng(seed)
    ids = [f"S{i:03d}" for i in range(n)]
    sector = np.arange(n) >= n // 2
    edges = [(ids[a], ids[b]) for a in range(n) for b in range(n)
             if a != b and sector[a] == sector[b] and rng.random() < p]
    g = make_graph(ids, {2020: edges}, seed=seed)
    feats = {}
    for i, c in enumerate(ids):
        onehot = np.eye(3)[int(sector[i])]
        rest = g.features[c].values[3:]
        feats[c] = CompanyFeatures(np.concatenate([onehot, rest]), np.ones(3))
    return type(g)(g.schema, feats, g.snapshots)


# --- sample_negative ------------------------------------------------------------

def test_forced_negative():
    g = make_graph("ABC", {2020: [("A", "B")]})
    rng = np.random.default_rng(0)
    for _ in range(50):
        neg = sample_negative(g, EdgeSample("A", "B", 2020), rng)
        assert (neg.supplier, neg.customer, neg.year, neg.polarity) == ("A", "C", 2020, "negative")


def test_negative_excludes_edges_from_other_years():
    g = make_graph("ABCD", {2019: [("A", "C")], 2020: [("A", "B")]})
    rng = np.random.default_rng(0)
    assert {sample_negative(g, EdgeSample("A", "B", 2020), rng).customer for _ in range(50)} == {"D"}


def test_no_valid_negative_exhausts_attempts():
    g = make_graph("ABC", {2020: [("A", "B"), ("A", "C")]})
    with pytest.raises(SamplingError, match="A"):
        sample_negative(g, EdgeSample("A", "B", 2020), np.random.default_rng(0), attempts=20)


def test_negative_distribution_is_uniform():
    n = 1000
    rng = np.random.default_rng(1)
    ids = [f"C{i:04d}" for i in range(n)]
    known = rng.choice(np.arange(1, n), size=30, replace=False)
    g = make_graph(ids, {2020: [(ids[0], ids[k]) for k in known]})
    draws = sample_negative_indices(g, np.zeros(10_000, dtype=np.int64), np.random.default_rng(2))
    eligible = np.setdiff1d(np.arange(1, n), known)
    assert np.isin(draws, eligible).all()
    counts = np.bincount(draws, minlength=n)[eligible]
    expected = len(draws) / len(eligible)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    df = len(eligible) - 1
    assert abs(chi2 - df) < 3 * math.sqrt(2 * df)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(4, 20), p=st.floats(0.05, 0.5), seed=st.integers(0, 10_000))
def test_negatives_absent_from_every_snapshot(n, p, seed):
    g = random_graph(n, p, seed, years=(2019, 2020))
    known = g.all_supply_pairs()
    rng = np.random.default_rng(seed)
    for s in g.ids:
        if sum(1 for a, _ in known if a == s) >= n - 1:
            continue
        for _ in range(5):
            neg = sample_negative(g, EdgeSample(s, s, 2020), rng, attempts=1000)
            assert neg.customer != s and (s, neg.customer) not in known


# --- pairwise_loss ---------------------------------------------------------------

def test_loss_values_match_high_precision():
    mpmath.mp.dps = 40
    for s_pos, s_neg in [(0.0, 0.0), (5.0, 0.0), (0.0, 5.0), (1.5, -2.25)]:
        want = float(mpmath.log1p(mpmath.exp(mpmath.mpf(s_neg) - s_pos)))
        assert pairwise_loss(s_pos, s_neg) == pytest.approx(want, rel=1e-14)
    assert pairwise_loss(1.0, 1.0) == pytest.approx(0.693147, abs=5e-7)
    assert pairwise_loss(5.0, 0.0) == pytest.approx(0.00671535, abs=5e-9)
    assert pairwise_loss(0.0, 5.0) == pytest.approx(5.00671535, abs=5e-9)


@pytest.mark.parametrize("margin", [30.5, 100.0, 800.0, 1e6])
def test_loss_is_overflow_safe(margin):
    assert abs(pairwise_loss(0.0, margin) - margin) < 1e-12
    assert 0.0 <= pairwise_loss(margin, 0.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-50, 50), b=st.floats(-50, 50), d=st.floats(1e-3, 10))
def test_loss_properties(a, b, d):
    l0 = pairwise_loss(a, b)
    assert l0 > 0
    assert pairwise_loss(a + d, b) < l0
    assert pairwise_loss(a, a) == pytest.approx(math.log(2), abs=1e-15)


def test_literal_form_rewards_wrong_order():
    from supplink import tensor as T
    lo = TR.pairwise_loss_tensor(T.Tensor(np.array([5.0])), T.Tensor(np.array([0.0])), "literal").item()
    assert lo == pytest.approx(5.00671535, abs=5e-9)


# --- train ------------------------------------------------------------------------

def test_loss_decreases_on_two_sector_graph():
    g = two_sector_graph()
    m = train(g, small_config(epochs=30, batch_size=128, pool_size=128, learning_rate=5e-3))
    losses = m.provenance["epoch_losses"]
    assert len(losses) == 30
    assert losses[-1] < losses[0]


def test_zero_epochs_returns_initialization():
    g = random_graph(20, 0.2, seed=0)
    cfg = small_config(epochs=0, seed=4)
    m = train(g, cfg)
    init = init_encoder(cfg.model, g.schema, 4)
    for k, v in init.params.arrays().items():
        assert m.encoder.params[k].data.tobytes() == v.tobytes()
    assert m.step == 1


def test_training_is_deterministic(tmp_path):
    g = random_graph(30, 0.1, seed=1, competitor_p=0.1)
    cfg = small_config(epochs=2)
    a, b = train(g, cfg), train(g, cfg)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = train(g, small_config(epochs=2, seed=1))
    assert any(c.encoder.params[k].data.tobytes() != v.tobytes() for k, v in a.encoder.params.arrays().items())


def test_train_errors():
    with pytest.raises(DataError):
        train(make_graph("AB", {2020: []}), small_config())
    g = random_graph(10, 0.2, seed=0)
    with pytest.raises(ContractError):
        train(g, small_config(), negatives="pool")
    with pytest.raises(ContractError):
        train(g, small_config(), negatives="hard")


def test_pool_fallback_is_recorded():
    g = random_graph(30, 0.15, seed=3)
    pool = TR.NegativePool({0: [(1, 2020, 1.0)]}, 0.5, 10)
    if (g.ids[0], g.ids[1]) in g.all_supply_pairs():
        pytest.skip("planted pair is an edge")
    m = train(g, small_config(epochs=1), negatives="pool", pool=pool, step=2)
    mix = m.provenance["negative_mix"]
    assert mix["random"] > 0 and mix["pool"] + mix["random"] == len(TR.positive_samples(g))


# --- mining and two-step --------------------------------------------------------------

def test_pool_size_tracks_quantile():
    g = random_graph(300, 0.01, seed=5)
    cfg = small_config(epochs=0, mining_samples=10_000, pool_size=5000)
    m1 = train(g, cfg)
    pool = mine_hard_negatives(m1, g, cfg, np.random.default_rng(0))
    assert 400 <= len(pool) <= 600
    flat = pool.flat()
    assert np.all(flat[:, 3] > pool.threshold)
    known = g.all_supply_pairs()
    assert all((g.ids[int(s)], g.ids[int(c)]) not in known for s, c, _, _ in flat)


def _flat_model(cfg, g):
    m = init_encoder(cfg.model, g.schema, 0)
    arrays = m.params.arrays()
    for k in arrays:
        if "projection" in k:
            arrays[k] = np.zeros_like(arrays[k])
    for tower in ("supplier", "customer"):
        last = max(k for k in arrays if k.startswith(f"{tower}.projection") and k.endswith("bias"))
        arrays[last] = np.ones_like(arrays[last])
    return TrainedModel(m.with_params(ParamStore(arrays)), {"step": 1})


def test_equal_scores_give_empty_pool():
    g = random_graph(40, 0.05, seed=0)
    cfg = small_config()
    with pytest.raises(SamplingError, match="quantile"):
        mine_hard_negatives(_flat_model(cfg, g), g, cfg, np.random.default_rng(0))


def test_mining_requires_step_one_model():
    g = random_graph(20, 0.1, seed=0)
    m = _flat_model(small_config(), g)
    m.provenance["step"] = 2
    with pytest.raises(ContractError):
        mine_hard_negatives(m, g, small_config(), np.random.default_rng(0))


def test_two_step_provenance():
    g = random_graph(40, 0.08, seed=2, competitor_p=0.05)
    res = two_step_train(g, small_config(epochs=1, mining_samples=500))
    m1, m2 = res
    assert (m1.step, m2.step) == (1, 2)
    assert m2.provenance["init_seed"] != m1.provenance["init_seed"]
    init1 = init_encoder(TINY, g.schema, m1.provenance["init_seed"])
    init2 = init_encoder(TINY, g.schema, m2.provenance["init_seed"])
    assert any(init1.params[k].data.tobytes() != init2.params[k].data.tobytes() for k in init1.params)
    assert m2.provenance["negatives"] == "pool"
    assert m2.provenance["pool"]["train_entries"] == len(res.pool)
    assert m2.provenance["pool"]["holdout_entries"] == len(res.holdout)


def test_two_step_surfaces_mining_error(monkeypatch):
    g = random_graph(30, 0.1, seed=0)
    calls = []
    real_train = TR.train

    def counting_train(*a, **kw):
        calls.append(kw.get("step", 1))
        return real_train(*a, **kw)

    monkeypatch.setattr(TR, "train", counting_train)
    monkeypatch.setattr(TR, "score_pairs", lambda *a, **kw: np.zeros(len(a[2])))
    with pytest.raises(SamplingError):
        two_step_train(g, small_config(epochs=1))
    assert calls == [1]


# --- config ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw,field", [
    ({"hard_negative_quantile": 1.0}, "hard_negative_quantile"),
    ({"hard_negative_quantile": 0.0}, "hard_negative_quantile"),
    ({"pool_size": 10, "batch_size": 20}, "pool_size"),
    ({"epochs": -1}, "epochs"),
    ({"loss_form": "hinge"}, "loss_form"),
])
def test_config_errors(kw, field):
    with pytest.raises(ConfigError, match=field):
        TrainingConfig(**kw)


def test_config_file_round_trip(tmp_path):
    cfg = small_config(epochs=7)
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg.to_dict()), encoding="utf-8")
    assert load_training_config(path) == cfg
    assert load_training_config(path, seed=9).seed == 9
    path.write_text(json.dumps({"epochs": 2, "learning_rte": 0.1}), encoding="utf-8")
    with pytest.raises(ConfigError, match="learning_rte"):
        load_training_config(path)
    assert load_training_config(None) == TrainingConfig()

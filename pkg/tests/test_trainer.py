"""Trainer tests: config validation per strategy, the Adam update against
closed-form values, strength sampling, stratified subset selection, bitwise
update scoping of the two-phase batch, bitwise rerun determinism, and the
files a run writes."""

import os

import numpy as np
import pytest

from augopt.models import load_checkpoint
from augopt.tensor import Rng, Tensor
from augopt.trainer import (
    STRATEGIES,
    STRATEGY_DEFAULTS,
    Adam,
    TrainConfig,
    TrainState,
    encoder_step,
    m_step,
    sample_gated_params,
    sample_random_params,
    select_supervised_subset,
    supervised_step,
    train,
)
from augopt.transforms import (
    NEUTRAL_LAMBDAS,
    PARAM_COLUMNS,
    CompositionOrder,
    NoiseRealization,
)

TINY = dict(encoder_widths=(4, 8), tnet_widths=(2, 4), head_hidden=8, head_out=4,
            batch_size=4, epochs=2, checkpoint_every=1)


def tiny_config(strategy="m_sup", **overrides):
    kw = dict(TINY)
    kw.update(overrides)
    return TrainConfig.for_strategy(strategy, **kw)


def tiny_batch(n=4, size=16, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, 1, size, size)).astype(dtype)
    y = (np.arange(n) % 2).astype(np.float64)
    return x, y


def store_bytes(store):
    return [t.data.tobytes() for _, t in store.items()]


# -- configuration ------------------------------------------------------------


def test_for_strategy_applies_defaults():
    for strategy in STRATEGIES:
        cfg = TrainConfig.for_strategy(strategy)
        d = STRATEGY_DEFAULTS[strategy]
        assert (cfg.alpha0, cfg.alpha1, cfg.alpha2, cfg.alpha3, cfg.alpha4) == d["alphas"]
        assert cfg.lr_m == d["lr_m"]
        assert cfg.uses_transform_net == (strategy in ("selfsup_m", "m_sup"))


def test_for_strategy_overrides_win():
    cfg = TrainConfig.for_strategy("m_sup", alpha1=2.0, batch_size=8, epochs=3)
    assert cfg.alpha1 == 2.0 and cfg.batch_size == 8 and cfg.epochs == 3
    assert cfg.alpha0 == 1.0  # untouched default


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        TrainConfig.for_strategy("adversarial")
    with pytest.raises(ValueError):
        TrainConfig(strategy="nope").validate()


@pytest.mark.parametrize("strategy,bad", [
    ("simclr_base", {"alpha0": 1.0}),
    ("simclr_base", {"alpha2": 0.0}),
    ("random", {"alpha3": 1.0}),
    ("random_sup", {"alpha3": 0.0, "alpha4": 0.0}),
    ("random_sup", {"alpha0": 1.0}),
    ("selfsup_m", {"alpha0": 0.0}),
    ("selfsup_m", {"alpha1": 1.0}),
    ("m_sup", {"alpha0": 0.0}),
    ("m_sup", {"alpha1": 0.0, "alpha3": 0.0, "alpha4": 0.0}),
    ("supervised", {"alpha2": 1.0}),
])
def test_strategy_weight_rules(strategy, bad):
    with pytest.raises(ValueError):
        TrainConfig.for_strategy(strategy, **bad)


@pytest.mark.parametrize("field,value", [
    ("batch_size", 1),
    ("epochs", 0),
    ("supervision_fraction", 0.0),
    ("supervision_fraction", 1.5),
    ("label_fraction", 0.0),
    ("dtype", "float16"),
    ("lr_f", 0.0),
    ("lr_m", -1.0),
    ("checkpoint_every", 0),
    ("alpha2", -1.0),
])
def test_field_validation(field, value):
    with pytest.raises(ValueError):
        TrainConfig.for_strategy("m_sup", **{field: value})


def test_snapshot_round_trips_fields():
    cfg = tiny_config("m_sup", seed=11, tau=0.5)
    text = cfg.snapshot()
    kv = dict(line.split("=", 1) for line in text.strip().splitlines())
    assert kv["strategy"] == "m_sup"
    assert kv["seed"] == "11"
    assert kv["tau"] == "0.5"
    assert kv["order"] == "blur,noise,crop,flip0,flip1,rotate"
    assert kv["encoder_widths"] == "4,8"


# -- optimizer ----------------------------------------------------------------


def make_store(values):
    from augopt.models import ParameterStore
    store = ParameterStore()
    for name, v in values.items():
        store.add(name, np.asarray(v, dtype=np.float64))
    return store


def test_adam_first_step_closed_form():
    # With zero moments, one step moves by exactly lr * g / (|g| + eps)
    # regardless of g's magnitude.
    store = make_store({"w": [1.0, -2.0, 0.5]})
    g = np.array([3.0, -0.25, 1e-6])
    store["w"].grad = g.copy()
    opt = Adam(store, lr=0.5)
    opt.step()
    expected = np.array([1.0, -2.0, 0.5]) - 0.5 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(store["w"].data, expected, rtol=0, atol=1e-15)
    assert opt.t == 1


def test_adam_two_steps_hand_values():
    store = make_store({"w": [0.0]})
    opt = Adam(store, lr=0.1)
    store["w"].grad = np.array([2.0])
    opt.step()
    w1 = -0.1 * 2.0 / (2.0 + 1e-8)
    np.testing.assert_allclose(store["w"].data, [w1], atol=1e-15)
    store["w"].grad = np.array([-1.0])
    opt.step()
    # m2 = .9*.2 + .1*(-1) = 0.08 ; v2 = .999*.004 + .001*1 = 0.004996
    mhat = 0.08 / (1.0 - 0.9 ** 2)
    vhat = 0.004996 / (1.0 - 0.999 ** 2)
    w2 = w1 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(store["w"].data, [w2], atol=1e-14)
    assert opt.t == 2


def test_adam_none_grad_stays_put():
    store = make_store({"w": [1.0, 2.0]})
    opt = Adam(store, lr=0.1)
    opt.step()
    np.testing.assert_array_equal(store["w"].data, [1.0, 2.0])
    assert opt.t == 1


def test_adam_none_grad_decays_moments():
    store = make_store({"w": [0.0]})
    opt = Adam(store, lr=0.1)
    store["w"].grad = np.array([1.0])
    opt.step()
    m1 = opt.m["w"].copy()
    store["w"].grad = None
    opt.step()
    np.testing.assert_allclose(opt.m["w"], 0.9 * m1, atol=1e-15)


def test_adam_preserves_float32():
    store = make_store({"w": [1.0]})
    store["w"].data = store["w"].data.astype(np.float32)
    opt = Adam(store, lr=0.1)
    opt.step()  # no gradient
    store["w"].grad = np.array([0.5], dtype=np.float32)
    opt.step()
    assert store["w"].data.dtype == np.float32
    assert opt.m["w"].dtype == np.float32 and opt.v["w"].dtype == np.float32


def test_adam_state_round_trip():
    store = make_store({"w": [1.0, 2.0], "b": [[3.0]]})
    opt = Adam(store, lr=0.1)
    store["w"].grad = np.array([0.3, -0.7])
    store["b"].grad = np.array([[0.1]])
    opt.step()
    entries = opt.state_entries("enc")
    assert set(entries) == {"enc.w.m", "enc.w.v", "enc.b.m", "enc.b.v",
                            "optimizer.step.enc"}
    fresh = Adam(store, lr=0.1)
    fresh.load_state_entries(entries, "enc")
    assert fresh.t == opt.t
    np.testing.assert_array_equal(fresh.m["w"], opt.m["w"])
    np.testing.assert_array_equal(fresh.v["b"], opt.v["b"])


def test_adam_load_missing_and_mismatched():
    store = make_store({"w": [1.0]})
    opt = Adam(store, lr=0.1)
    with pytest.raises(KeyError):
        opt.load_state_entries({}, "enc")
    bad = {"enc.w.m": np.zeros(2), "enc.w.v": np.zeros(1),
           "optimizer.step.enc": np.array([1.0])}
    with pytest.raises(ValueError):
        opt.load_state_entries(bad, "enc")


# -- strength sampling --------------------------------------------------------


def test_sample_random_params_range_and_shape():
    p = sample_random_params(Rng(0, stream=9), 8, np.float32)
    for col in PARAM_COLUMNS:
        v = getattr(p, col).data
        assert v.shape == (8,) and v.dtype == np.float32
        assert np.all(v >= 0.0) and np.all(v <= 1.0)


def test_sample_gated_params_neutral_or_uniform():
    p = sample_gated_params(Rng(3, stream=9), 4000, np.float64)
    for col in PARAM_COLUMNS:
        v = getattr(p, col).data
        neutral = v == NEUTRAL_LAMBDAS[col]
        # roughly half the entries sit exactly at neutral, the rest spread out
        assert 0.4 < neutral.mean() < 0.6
        assert np.unique(v[~neutral]).size > 100


def test_sampling_deterministic():
    a = sample_gated_params(Rng(5, stream=2), 16, np.float32)
    b = sample_gated_params(Rng(5, stream=2), 16, np.float32)
    c = sample_gated_params(Rng(5, stream=3), 16, np.float32)
    same = all(np.array_equal(getattr(a, k).data, getattr(b, k).data)
               for k in PARAM_COLUMNS)
    diff = any(not np.array_equal(getattr(a, k).data, getattr(c, k).data)
               for k in PARAM_COLUMNS)
    assert same and diff


# -- supervised subset --------------------------------------------------------


def test_subset_exact_count_and_stratification():
    labels = np.array([1] * 37 + [0] * 63)
    idx = select_supervised_subset(labels, 0.1, Rng(0, stream=5))
    assert idx.shape[0] == 10
    assert labels[idx].sum() == 4  # round(3.7)
    assert np.all(np.diff(idx) > 0)


def test_subset_full_fraction():
    labels = np.array([0, 1, 0, 1, 1])
    idx = select_supervised_subset(labels, 1.0, Rng(0, stream=5))
    np.testing.assert_array_equal(idx, np.arange(5))


def test_subset_deterministic():
    labels = (np.arange(200) % 3 == 0).astype(int)
    a = select_supervised_subset(labels, 0.25, Rng(4, stream=5))
    b = select_supervised_subset(labels, 0.25, Rng(4, stream=5))
    c = select_supervised_subset(labels, 0.25, Rng(5, stream=5))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_subset_groups_selected_whole():
    # 10 groups of 3 images; fraction counts groups, and every member of a
    # chosen group comes along.
    groups = np.repeat(np.arange(10), 3)
    labels = np.repeat(np.arange(10) % 2, 3)
    idx = select_supervised_subset(labels, 0.4, Rng(1, stream=5), groups=groups)
    assert idx.shape[0] == 12  # 4 groups x 3 images
    chosen = np.unique(groups[idx])
    assert chosen.shape[0] == 4
    g_labels = (np.arange(10) % 2)[chosen]
    assert g_labels.sum() == 2  # stratified at group level
    for g in chosen:
        assert np.isin(np.nonzero(groups == g)[0], idx).all()


def test_subset_mixed_label_group_rejected():
    groups = np.array([0, 0, 1, 1])
    labels = np.array([0, 1, 1, 1])
    with pytest.raises(ValueError):
        select_supervised_subset(labels, 0.5, Rng(0, stream=5), groups=groups)


def test_subset_bad_inputs():
    labels = np.array([0, 1, 0, 1])
    with pytest.raises(ValueError):
        select_supervised_subset(labels, 0.0, Rng(0, stream=5))
    with pytest.raises(ValueError):
        select_supervised_subset(labels, 0.5, Rng(0, stream=5), groups=np.zeros(3, dtype=int))


# -- update scoping -----------------------------------------------------------


def test_m_step_touches_only_transform_net():
    cfg = tiny_config("m_sup", supervision_fraction=0.5)
    state = TrainState.create(cfg)
    x, y = tiny_batch()
    frozen = {k: store_bytes(s) for k, s in state.stores().items() if k != "tnet"}
    before_tnet = store_bytes(state.tnet.store)
    noise = NoiseRealization.draw(Rng(0, stream=8), x.shape, np.float32)
    m_step(state, x, y, np.array([0, 1]), noise)
    for k, s in state.stores().items():
        if k == "tnet":
            continue
        assert store_bytes(s) == frozen[k], f"{k} parameters moved during m_step"
        for _, t in s.items():
            assert t.grad is None, f"{k} received a gradient during m_step"
    assert store_bytes(state.tnet.store) != before_tnet


def test_encoder_step_never_touches_transform_net():
    cfg = tiny_config("m_sup", supervision_fraction=0.5)
    state = TrainState.create(cfg)
    x, y = tiny_batch()
    before_tnet = store_bytes(state.tnet.store)
    before_enc = store_bytes(state.encoder.store)
    params = sample_random_params(Rng(1, stream=9), x.shape[0], np.float32)
    noise = NoiseRealization.draw(Rng(1, stream=8), x.shape, np.float32)
    encoder_step(state, x, y, np.array([0, 1]), params, noise)
    assert store_bytes(state.tnet.store) == before_tnet
    for _, t in state.tnet.store.items():
        assert t.grad is None
    assert store_bytes(state.encoder.store) != before_enc
    assert store_bytes(state.head.store)  # updated stores still well formed


def test_supervised_step_touches_encoder_and_classifier_only():
    cfg = tiny_config("supervised", label_fraction=1.0)
    state = TrainState.create(cfg)
    x, y = tiny_batch()
    before = {k: store_bytes(s) for k, s in state.stores().items()}
    params = sample_gated_params(Rng(2, stream=9), x.shape[0], np.float32)
    noise = NoiseRealization.draw(Rng(2, stream=8), x.shape, np.float32)
    supervised_step(state, x, y, params, noise)
    assert store_bytes(state.head.store) == before["head"]
    assert store_bytes(state.tnet.store) == before["tnet"]
    assert store_bytes(state.encoder.store) != before["encoder"]
    assert store_bytes(state.classifier.store) != before["classifier"]


def test_alternating_steps_keep_scoping():
    # Interleave the two phases several times; each phase must only ever
    # move its own parameters relative to the snapshot taken just before it.
    cfg = tiny_config("m_sup", supervision_fraction=0.5)
    state = TrainState.create(cfg)
    rng = Rng(6, stream=8)
    for i in range(5):
        x, y = tiny_batch(seed=100 + i)
        noise = NoiseRealization.draw(rng, x.shape, np.float32)
        other = {k: store_bytes(s) for k, s in state.stores().items() if k != "tnet"}
        m_step(state, x, y, np.array([0, 1]), noise)
        assert all(store_bytes(state.stores()[k]) == v for k, v in other.items())
        tnet = store_bytes(state.tnet.store)
        params = sample_random_params(rng, x.shape[0], np.float32)
        noise2 = NoiseRealization.draw(rng, x.shape, np.float32)
        encoder_step(state, x, y, np.array([0, 1]), params, noise2)
        assert store_bytes(state.tnet.store) == tnet


def test_m_step_unlabeled_batch_drops_supervised_term():
    cfg = tiny_config("m_sup")
    state = TrainState.create(cfg)
    x, y = tiny_batch()
    noise = NoiseRealization.draw(Rng(3, stream=8), x.shape, np.float32)
    con, sup = m_step(state, x, y, np.array([], dtype=int), noise)
    assert sup == 0.0
    assert np.isfinite(con)


# -- the loop -----------------------------------------------------------------


def run_tiny(tmp_path, strategy, name, seed=0, **overrides):
    rng = np.random.default_rng(7)
    x = rng.uniform(0.0, 1.0, (24, 1, 16, 16)).astype(np.float32)
    y = (np.arange(24) % 2).astype(np.float64)
    kw = dict(batch_size=8, epochs=2, seed=seed, checkpoint_every=1,
              supervision_fraction=0.5, encoder_widths=(4, 8), tnet_widths=(2, 4),
              head_hidden=8, head_out=4)
    kw.update(overrides)
    cfg = TrainConfig.for_strategy(strategy, **kw)
    return train(cfg, x, y, str(tmp_path / name))


def test_train_writes_expected_files(tmp_path):
    res = run_tiny(tmp_path, "m_sup", "run")
    out = tmp_path / "run"
    assert (out / "config.txt").is_file()
    assert (out / "run.log").is_file()
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,batch,strategy,loss_con,loss_sup,seconds"
    assert res.n_batches == len(lines) - 1 == 6  # 3 batches x 2 epochs
    for row in lines[1:]:
        parts = row.split(",")
        assert len(parts) == 6 and parts[2] == "m_sup" and parts[5] == "0"
    assert [os.path.basename(c) for c in res.checkpoints] == \
        ["ckpt_ep0001.augd", "ckpt_ep0002.augd"]


def test_train_checkpoint_schedule(tmp_path):
    res = run_tiny(tmp_path, "simclr_base", "sched", epochs=5, checkpoint_every=2)
    names = [os.path.basename(c) for c in res.checkpoints]
    assert names == ["ckpt_ep0002.augd", "ckpt_ep0004.augd", "ckpt_ep0005.augd"]


def test_train_rerun_bitwise_identical(tmp_path):
    a = run_tiny(tmp_path, "m_sup", "a")
    b = run_tiny(tmp_path, "m_sup", "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()
    assert open(a.checkpoints[-1], "rb").read() == open(b.checkpoints[-1], "rb").read()


def test_train_seed_changes_results(tmp_path):
    a = run_tiny(tmp_path, "simclr_base", "s0", seed=0)
    b = run_tiny(tmp_path, "simclr_base", "s1", seed=1)
    assert (tmp_path / "s0" / "metrics.csv").read_bytes() != \
        (tmp_path / "s1" / "metrics.csv").read_bytes()
    assert open(a.checkpoints[-1], "rb").read() != open(b.checkpoints[-1], "rb").read()


def test_train_all_strategies_run(tmp_path):
    for strategy in STRATEGIES:
        res = run_tiny(tmp_path, strategy, f"all_{strategy}", epochs=1)
        assert res.n_batches >= 1


def test_train_sparse_labels_ok(tmp_path):
    # With one labeled image most batches carry no labels; the supervised
    # terms drop out without error.
    res = run_tiny(tmp_path, "m_sup", "sparse", supervision_fraction=0.05)
    rows = (tmp_path / "sparse" / "metrics.csv").read_text().strip().splitlines()[1:]
    assert len(rows) == res.n_batches


def test_train_supervised_uses_label_fraction(tmp_path):
    # label_fraction 0.5 of 24 images at batch 8 leaves 12 images per epoch.
    res = run_tiny(tmp_path, "supervised", "sup", label_fraction=0.5, epochs=1)
    assert res.n_batches == 2  # 8 + remainder 4


def test_train_alternative_order_runs(tmp_path):
    order = CompositionOrder.parse("rotate,flip1,flip0,crop,noise,blur")
    res = run_tiny(tmp_path, "m_sup", "alt", order=order, epochs=1)
    assert res.n_batches == 3
    kv = dict(line.split("=", 1)
              for line in (tmp_path / "alt" / "config.txt").read_text().strip().splitlines())
    assert kv["order"] == "rotate,flip1,flip0,crop,noise,blur"


def test_checkpoint_contains_all_stores_and_optimizers(tmp_path):
    res = run_tiny(tmp_path, "m_sup", "ck", epochs=1)
    entries = load_checkpoint(res.checkpoints[-1])
    names = set(entries)
    assert any(n.startswith("encoder.") and n.endswith(".m") for n in names)
    assert "optimizer.step.tnet" in names
    assert "optimizer.step.encoder" in names
    # one weight from each network is present under its store prefix
    for prefix in ("encoder.", "head.", "classifier.", "tnet."):
        assert any(n.startswith(prefix) and not n.endswith((".m", ".v")) for n in names)


def test_trailing_batch_of_one_dropped(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.0, 1.0, (9, 1, 16, 16)).astype(np.float32)
    y = (np.arange(9) % 2).astype(np.float64)
    cfg = TrainConfig.for_strategy("simclr_base", batch_size=4, epochs=1,
                                   supervision_fraction=0.5,
                                   encoder_widths=(4, 8), tnet_widths=(2, 4),
                                   head_hidden=8, head_out=4)
    res = train(cfg, x, y, str(tmp_path / "drop"))
    assert res.n_batches == 2  # 4 + 4; the single leftover is dropped

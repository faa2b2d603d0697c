import inspect
from collections import Counter

import numpy as np
import pytest

from ocssl.budget import BudgetLedger, cbp, ledger_check, stream_slack
from ocssl.errors import ProtocolError
from ocssl.networks import Mlp, MlpSpec
from ocssl.strategies import REGISTRY, Strategy, StrategyConfig, make_strategy, train_iid
from ocssl.stream import make_synthetic, split_class_incremental

D = 16


def _plan(per_class=40, T=5, n_p=1, seed=0, visible=False):
    data = make_synthetic(10, per_class, D, 6.0, seed=seed)
    return split_class_incremental(data, T=T, seed=seed, b_s=10, n_p=n_p, boundaries_visible=visible)


def _cfg(name, **kw):
    kw.setdefault("b_r", 20)
    kw.setdefault("buffer_capacity", 50)
    return StrategyConfig(name, **kw)


def _run(strategy, plan, stop=None):
    traces, last_exp = [], 0
    for i, (x, exp) in enumerate(plan.minibatches()):
        if stop is not None and i >= stop:
            break
        if exp != last_exp and strategy.needs_boundaries:
            strategy.on_boundary()
        last_exp = exp
        traces.extend(strategy.observe(x))
    return traces


def _resume(strategy, plan, start):
    traces, last_exp = [], None
    for i, (x, exp) in enumerate(plan.minibatches()):
        if i < start:
            last_exp = exp
            continue
        if exp != last_exp and strategy.needs_boundaries:
            strategy.on_boundary()
        last_exp = exp
        traces.extend(strategy.observe(x))
    return traces


def _theta(strategy):
    return {k: p.data.copy() for k, p in strategy.nets.theta.named_params()}


def _assert_same_theta(a, b):
    ta, tb = _theta(a), _theta(b)
    assert ta.keys() == tb.keys()
    for k in ta:
        np.testing.assert_array_equal(ta[k], tb[k], err_msg=k)


# -- degeneracies --------------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["cla_e", "cla_r"])
def test_cla_replay_with_zero_omega_is_er(name):
    plan = _plan(n_p=2)
    er = make_strategy(_cfg("er", n_p=2), D)
    cla = make_strategy(_cfg(name, n_p=2, omega=0.0), D)
    t_er, t_cla = _run(er, plan), _run(cla, plan)
    assert [(t.loss_total, t.loss_ssl, t.cbp_so_far) for t in t_er] == \
           [(t.loss_total, t.loss_ssl, t.cbp_so_far) for t in t_cla]
    _assert_same_theta(er, cla)
    assert [e.insert_seq for e in er.buffer.entries] == [e.insert_seq for e in cla.buffer.entries]


def test_cla_b_with_zero_omega_is_finetuning():
    plan = _plan(n_p=2)
    ft = make_strategy(_cfg("finetune", n_p=2), D)
    clab = make_strategy(_cfg("cla_b", n_p=2, omega=0.0), D)
    t_ft, t_cb = _run(ft, plan), _run(clab, plan)
    assert [(t.loss_total, t.cbp_so_far) for t in t_ft] == [(t.loss_total, t.cbp_so_far) for t in t_cb]
    _assert_same_theta(ft, clab)


def test_lump_with_lambda_one_is_finetuning():
    plan = _plan()
    ft = make_strategy(_cfg("finetune"), D)
    lump = make_strategy(_cfg("lump", lump_lambda=1.0), D)
    assert [t.loss_total for t in _run(ft, plan)] == [t.loss_total for t in _run(lump, plan)]
    _assert_same_theta(ft, lump)


def _captured_inputs(strategy, x_batches):
    seen = []
    original = strategy._views_and_features

    def spy(xs):
        seen.append(np.array(xs))
        return original(xs)

    strategy._views_and_features = spy
    for x in x_batches:
        strategy.observe(x)
    return seen


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_lump_mixing(lam):
    lump = make_strategy(_cfg("lump", lump_lambda=lam, buffer_capacity=1), D)
    first, second = np.ones((10, D)), np.full((10, D), 3.0)
    lump.buffer.insert(np.full(D, -1.0))
    seen = _captured_inputs(lump, [first, second])
    # with a single stored exemplar the replay partner of every row is that exemplar
    np.testing.assert_array_equal(seen[0], lam * first + (1 - lam) * -1.0)
    np.testing.assert_array_equal(seen[1], lam * second + (1 - lam) * 1.0)


def test_lump_keeps_stream_batch_size_and_cold_start():
    lump = make_strategy(_cfg("lump"), D)
    x = np.random.default_rng(0).standard_normal((10, D))
    seen = _captured_inputs(lump, [x])
    np.testing.assert_array_equal(seen[0], x)
    assert lump.ledger.backward_examples == 2 * 10
    assert lump.config.b == 10


# -- CLA specifics --------------------------------------------------------------------------------------


def _identity_aphi(strategy):
    f = strategy.nets.theta.feature_width
    m = Mlp(MlpSpec((f, f)))
    m.params["l0.weight"].data = np.eye(f)
    strategy.nets.align_proj = m


def test_cla_b_tau_zero_targets_are_current_features():
    plan = _plan()
    clab = make_strategy(_cfg("cla_b", tau=0.0), D)
    _identity_aphi(clab)
    traces = _run(clab, plan, stop=10)
    assert all(t.loss_reg == pytest.approx(-1.0, abs=1e-9) for t in traces)


def test_cla_b_twin_lags_and_follows_the_closed_form():
    plan = _plan(per_class=80, n_p=3)
    clab = make_strategy(_cfg("cla_b", n_p=3, tau=0.9), D)
    expected = {k: p.data.copy() for k, p in clab.nets.ema_theta.named_params()}
    original = clab._pass

    def spy(x):
        theta = _theta(clab)
        for k in expected:
            expected[k] = 0.9 * expected[k] + 0.1 * theta[k]
        return original(x)

    clab._pass = spy
    traces = _run(clab, plan)
    assert len(traces) >= 200
    ema = dict(clab.nets.ema_theta.named_params())
    theta = _theta(clab)
    for k in expected:
        np.testing.assert_allclose(ema[k].data, expected[k], rtol=0, atol=1e-12)
    assert sum(np.linalg.norm(ema[k].data - theta[k]) for k in theta) > 0


@pytest.mark.parametrize("name", ["cla_b", "cla_e", "cla_r"])
def test_two_hundred_step_toy_run_is_finite_and_bounded(name):
    plan = _plan(per_class=80, n_p=3)
    strategy = make_strategy(_cfg(name, n_p=3), D)
    traces = _run(strategy, plan)
    assert len(traces) >= 200
    assert all(t.finite() for t in traces)
    assert all(abs(t.loss_reg) <= 1.0 + 1e-12 for t in traces)
    assert np.all(np.diff([t.cbp_so_far for t in traces]) > 0)
    assert strategy.audit_stop_gradient()


@pytest.mark.parametrize("name", ["cla_e", "cla_r", "er", "cassle_r"])
def test_cold_start_is_pure_ssl_on_stream(name):
    strategy = make_strategy(_cfg(name), D)
    x = np.random.default_rng(0).standard_normal((10, D))
    seen = _captured_inputs(strategy, [x])
    np.testing.assert_array_equal(seen[0], x)
    assert strategy.ledger.backward_examples == 20
    assert strategy.ledger.shortfall == 2 * 20


def test_cla_r_stores_and_refreshes_features():
    batches = [x for x, _ in _plan().minibatches()]
    strategy = make_strategy(_cfg("cla_r"), D)
    for x in batches[:3]:
        strategy.observe(x)
    assert all(e.feature is not None and e.feature.shape == (64,) for e in strategy.buffer.entries)
    before = {e.insert_seq: e.feature.copy() for e in strategy.buffer.entries}
    strategy.observe(batches[3])
    after = {e.insert_seq: e.feature for e in strategy.buffer.entries}
    # replayed survivors got the z* update; the new stream rows arrived with fresh features
    assert any(not np.array_equal(before[s], after[s]) for s in before.keys() & after.keys())
    assert len(after.keys() - before.keys()) == 10


@pytest.mark.parametrize("name", ["er", "cla_e", "cla_r", "lump"])
def test_buffer_occupancy(name):
    plan = _plan()
    strategy = make_strategy(_cfg(name, buffer_capacity=45), D)
    for k, (x, _) in enumerate(plan.minibatches(), start=1):
        strategy.observe(x)
        assert len(strategy.buffer) == min(45, k * 10)


# -- CaSSLe and the boundary contract -------------------------------------------------------------------


def test_cassle_before_and_after_boundary():
    plan = _plan(visible=True)
    strategy = make_strategy(_cfg("cassle"), D)
    _identity_aphi(strategy)
    batches = [x for x, _ in plan.minibatches()]
    assert all(t.loss_reg == 0.0 for t in strategy.observe(batches[0]))
    strategy.on_boundary()
    assert strategy.observe(batches[1])[0].loss_reg == pytest.approx(-1.0, abs=1e-9)
    assert strategy.config.omega == 1.0


@pytest.mark.parametrize("name", sorted(set(REGISTRY) - {"cassle", "cassle_r"}))
def test_boundary_blind_strategies_reject_boundary_events(name):
    strategy = make_strategy(_cfg(name), D)
    assert not strategy.needs_boundaries
    with pytest.raises(ProtocolError):
        strategy.on_boundary()


def test_observe_takes_only_raw_inputs():
    params = list(inspect.signature(Strategy.observe).parameters)
    assert params == ["self", "x"]


def test_cassle_r_ledger_matches_cla_e():
    plan = _plan(n_p=2, visible=True)
    cla = make_strategy(_cfg("cla_e", n_p=2), D)
    cas = make_strategy(_cfg("cassle_r", n_p=2), D)
    _run(cla, plan)
    _run(cas, plan)
    assert cas.ledger.to_dict() == cla.ledger.to_dict()
    assert cas.boundaries_seen == plan.T - 1


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_every_strategy_meets_its_budget(name):
    plan = _plan(n_p=2, visible=True)
    config = _cfg(name, n_p=2)
    spec = config.budget_spec(plan.N)
    short = plan.short_minibatches()
    assert short == plan.T  # 72 stream samples per experience
    strategy = make_strategy(config, D, ledger=BudgetLedger(cbp(spec), stream_slack(spec, short)))
    _run(strategy, plan)
    assert ledger_check(strategy.ledger, spec, short_minibatches=short).ok
    if REGISTRY[name][0] == "b_s":
        # without replay every stream row is counted exactly n_p * n_v times
        assert strategy.ledger.backward_examples == cbp(spec) and strategy.ledger.shortfall == 0


# -- resume and degenerate streams --------------------------------------------------------------------


@pytest.mark.parametrize("name", ["cla_e", "cla_r", "lump", "cassle_r", "cla_b"])
def test_checkpoint_resume_is_bitwise(tmp_path, name):
    plan = _plan(n_p=2, visible=True)
    whole = make_strategy(_cfg(name, n_p=2), D)
    t_whole = _run(whole, plan)

    first = make_strategy(_cfg(name, n_p=2), D)
    t_first = _run(first, plan, stop=9)
    first.save(tmp_path / "mid.ckpt", {"note": 1})
    resumed = Strategy.load(tmp_path / "mid.ckpt")
    assert resumed.user_meta == {"note": 1}
    t_rest = _resume(resumed, plan, 9)
    assert [t.loss_total for t in t_first + t_rest] == [t.loss_total for t in t_whole]
    _assert_same_theta(whole, resumed)
    assert resumed.ledger.to_dict() == whole.ledger.to_dict()


def test_single_experience_stream_matches_iid_exposure():
    n_p = 3
    plan = _plan(T=1, n_p=n_p)
    stream = make_strategy(_cfg("finetune", n_p=n_p), D)
    seen_stream = _captured_inputs(stream, [x for x, _ in plan.minibatches()])
    iid = make_strategy(_cfg("finetune", n_p=n_p), D)
    seen_iid = []
    original = iid._views_and_features
    iid._views_and_features = lambda xs: (seen_iid.append(np.array(xs)), original(xs))[1]
    inputs = plan.dataset.inputs[plan.train_indices()]
    train_iid(iid, inputs, 10, cbp(stream.config.budget_spec(plan.N)), np.random.default_rng(0), n_epochs=n_p)
    assert iid.ledger.backward_examples == stream.ledger.backward_examples
    rows = lambda batches: Counter(r.tobytes() for b in batches for r in b)  # noqa: E731
    assert rows(seen_stream) == rows(seen_iid)
    assert set(rows(seen_stream).values()) == {n_p}


def test_config_defaults_and_validation():
    assert StrategyConfig("cla_e").b == 138 and StrategyConfig("cla_e").omega == 0.3
    assert StrategyConfig("cla_r").omega == 1.0
    assert StrategyConfig("finetune").b == 10 and StrategyConfig("finetune").b_r == 0
    assert StrategyConfig("lump").buffer_policy == "reservoir" and StrategyConfig("lump").b == 10
    assert StrategyConfig("cassle", omega=0.3).omega == 1.0
    assert StrategyConfig("er").label == "er_fifo"
    with pytest.raises(ValueError):
        StrategyConfig("scale")
    with pytest.raises(ValueError):
        StrategyConfig("cla_e", tau=1.5)
    with pytest.raises(ValueError):
        StrategyConfig("er", ssl_objective="byol")


def test_simclr_strategies_run():
    plan = _plan()
    for name in ("finetune", "cla_e", "cla_r"):
        strategy = make_strategy(_cfg(name, ssl_objective="simclr"), D)
        assert strategy.nets.predictor is None
        assert all(t.finite() for t in _run(strategy, plan, stop=6))

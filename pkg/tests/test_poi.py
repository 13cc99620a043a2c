import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poiloc.errors import DuplicateKey, InvalidConfig, IterOutOfRange, NonFiniteInput
from poiloc.poi import (FilterConfig, GateInputs, GateResult, PoiLedger, Status, gate, poi_weight,
                        realign, subsample)


@pytest.fixture
def cfg():
    return FilterConfig(n_iter=100, gate_start_fraction=0.0)


def _ledger(n=20):
    px = np.stack([np.arange(n, dtype=float), np.arange(n, dtype=float) * 2], 1)
    return PoiLedger(np.repeat([100, 101], n // 2), px)


def test_gate_table(cfg):
    assert gate(0.0001, 1.0, cfg) is GateResult.RETAIN
    assert gate(0.001, 1.0, cfg) is GateResult.DISCARD
    assert gate(0.0001, 7.0, cfg) is GateResult.DISCARD
    assert gate(0.0, 0.0, cfg) is GateResult.RETAIN


@pytest.mark.parametrize("g,r", [(np.nan, 1.0), (1e-4, np.inf), (-1.0, 1.0)])
def test_gate_rejects_bad_input(cfg, g, r):
    with pytest.raises(NonFiniteInput):
        gate(g, r, cfg)


def test_schedule(cfg):
    assert poi_weight(0, cfg) == 1.0
    assert poi_weight(100, cfg) == 0.01
    assert poi_weight(50, cfg) == pytest.approx(0.505)
    with pytest.raises(IterOutOfRange):
        poi_weight(101, cfg)


@pytest.mark.parametrize("kw", [dict(tau_g=0), dict(bernoulli_p=0), dict(omega_min=2.0),
                                dict(freeze_fraction=1.5), dict(gate_start_fraction=0.95)])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        FilterConfig(**kw).validate()


def test_subsample_counts():
    keep = subsample(10_000, 0.5, seed=3)
    assert abs(keep.sum() - 5000) <= 4 * np.sqrt(10_000 * 0.25)
    assert subsample(10, 1.0, 0).all()
    assert np.array_equal(subsample(100, 0.3, 9), subsample(100, 0.3, 9))


def test_ledger_discards_and_weights(cfg):
    led = _ledger()
    rows = np.arange(6)
    stat = np.array([1e-4, 1e-2, 1e-4, 1e-4, 1e-4, 1e-2])
    rep = np.array([1.0, 1.0, 9.0, 1.0, np.inf, np.inf])
    w = led.apply_iteration(GateInputs(rows, stat, rep), 10, cfg)
    # rows 4 and 5 have never been on the reprojection branch
    assert list(led.status[:6]) == [0, 1, 1, 0, 0, 0]
    assert list(w) == [0.901, 0.0, 0.0, 0.901, 0.901, 0.901]
    assert led.discarded_at[1] == 10 and led.discarded_at[0] == -1


def test_ledger_pseudo_branch_after_reproj(cfg):
    led = _ledger()
    led.apply_iteration(GateInputs(np.array([3]), np.array([1e-4]), np.array([1.0])), 1, cfg)
    led.apply_iteration(GateInputs(np.array([3]), np.array([1e-4]), np.array([np.inf])), 2, cfg)
    assert led.status[3] == Status.DISCARDED


def test_gate_disabled_and_tau_override(cfg):
    led = _ledger()
    inp = GateInputs(np.array([0]), np.array([1e-4]), np.array([9.0]))
    led.apply_iteration(inp, 1, cfg, gate_enabled=False)
    assert led.active.all()
    led.apply_iteration(inp, 2, cfg, tau_r=15.0)
    assert led.active.all()
    led.apply_iteration(inp, 3, cfg)
    assert not led.active[0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 19), st.floats(0, 2e-3), st.floats(0, 20)),
                min_size=1, max_size=200))
def test_discard_is_monotone_and_frozen_after_freeze(events):
    cfg = FilterConfig(n_iter=len(events), gate_start_fraction=0.0)
    led = _ledger()
    prev = led.status.copy()
    for it, (row, g, r) in enumerate(events):
        led.apply_iteration(GateInputs(np.array([row]), np.array([g]), np.array([r])), it, cfg)
        assert np.all(led.status >= prev)
        if led.frozen:
            assert np.array_equal(led.status, prev) or it < cfg.freeze_fraction * cfg.n_iter
        prev = led.status.copy()
    if led.frozen:
        snap = led.status.copy()
        led.apply_iteration(GateInputs(np.arange(20), np.full(20, 1.0), np.full(20, 99.0)),
                            cfg.n_iter, cfg)
        assert np.array_equal(led.status, snap)


def test_duplicate_keys():
    with pytest.raises(DuplicateKey):
        PoiLedger(np.array([1, 1]), np.array([[2.0, 3.0], [2.0, 3.0]]))
    with pytest.raises(DuplicateKey):
        realign(np.array([1, 1]), np.array([[2.0, 3.0], [2.0, 3.0]]))


def test_ledger_dump_roundtrip(tmp_path, cfg):
    led = _ledger()
    led.apply_iteration(GateInputs(np.array([2]), np.array([1.0]), np.array([1.0])), 1, cfg)
    led.dump(tmp_path / "ledger.txt")
    back = PoiLedger.read_dump(tmp_path / "ledger.txt")
    assert len(back) == len(led)
    assert back[led.keys()[2]] is Status.DISCARDED
    assert led.row(*led.keys()[5]) == 5


def test_realign_is_shuffle_invariant(rng):
    fids = np.repeat([3, 7, 9], 10)
    px = rng.uniform(0, 600, size=(30, 2))
    val = rng.normal(size=30)
    ref = realign(fids, px, val)
    for _ in range(5):
        perm = rng.permutation(30)
        got = realign(fids[perm], px[perm], val[perm])
        assert ref.keys() == got.keys()
        for f in ref:
            assert all(np.array_equal(a, b) for a, b in zip(ref[f], got[f]))

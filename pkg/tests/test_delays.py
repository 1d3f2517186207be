import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaynet.delays import (
    DelayBounds,
    DelayChannel,
    InsufficientHistory,
    draw_trace,
    dump_trace,
    load_trace,
)


def _filled(h1, h2, upto, **kw):
    ch = DelayChannel(h1, h2, **kw)
    for k in range(upto + 1):
        ch.push(k, [float(k)])
    return ch


def test_zero_delay_roundtrip():
    ch = DelayChannel(0, 0)
    ch.push(0, [3.0])
    meas = ch.sample_delayed(0)
    assert meas.value.tolist() == [3.0] and meas.age(0) == 0


def test_indexed_lookup():
    ch = _filled(3, 3, 9, capacity=10)
    meas = ch.sample_delayed(9)
    assert meas.origin_step == 6 and meas.value[0] == 6.0


def test_query_beyond_capacity():
    ch = _filled(0, 3, 20)
    with pytest.raises(InsufficientHistory):
        ch.lookup(10)
    with pytest.raises(InsufficientHistory):
        DelayChannel(0, 2).lookup(-1)


def test_prefill_before_start():
    ch = DelayChannel(2, 2, prefill=[7.0])
    ch.push(0, [1.0])
    assert ch.sample_delayed(0).value.tolist() == [7.0]


def test_non_monotone_push_rejected():
    ch = DelayChannel(0, 1)
    ch.push(0, [0.0])
    with pytest.raises(ValueError):
        ch.push(2, [0.0])
    with pytest.raises(ValueError):
        ch.push(0, [0.0])


def test_capacity_too_small():
    with pytest.raises(ValueError):
        DelayChannel(1, 4, capacity=4)


def test_degenerate_bounds_constant_delay(rng):
    ch = DelayChannel(4, 4, rng=rng, prefill=[0.0])
    for k in range(50):
        ch.push(k, [float(k)])
        assert ch.sample_delayed(k).origin_step == k - 4


def test_uniform_frequencies():
    ch = DelayChannel(4, 7, rng=np.random.default_rng(11))
    counts = np.bincount([ch.next_delay() for _ in range(10_000)], minlength=8)[4:]
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) < 4 * sigma)


def test_replay_order():
    ch = _filled(3, 5, 20)
    ch.replay_trace([3, 5, 4])
    stamps = [ch.sample_delayed(20).origin_step for _ in range(3)]
    assert stamps == [17, 15, 16]
    with pytest.raises(InsufficientHistory):
        ch.sample_delayed(20)


def test_replay_all_h1_is_constant_delay():
    ch = DelayChannel(2, 6, prefill=[0.0])
    ch.replay_trace([2] * 30)
    for k in range(30):
        ch.push(k, [float(k)])
        assert ch.sample_delayed(k).age(k) == 2


def test_replay_out_of_range_rejected():
    with pytest.raises(ValueError):
        DelayChannel(3, 5).replay_trace([3, 6])


def test_same_trace_different_payloads():
    trace = draw_trace(1, 4, 40, np.random.default_rng(3))
    a, b = DelayChannel(1, 4, prefill=[0.0]), DelayChannel(1, 4, prefill=[0.0, 0.0])
    a.replay_trace(trace)
    b.replay_trace(trace)
    sa, sb = [], []
    for k in range(40):
        a.push(k, [k * 1.0])
        b.push(k, [-k, 2.0 * k])
        sa.append(a.sample_delayed(k).origin_step)
        sb.append(b.sample_delayed(k).origin_step)
    assert sa == sb


@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**32 - 1))
def test_delays_always_in_bounds(h1, span, seed):
    h2 = h1 + span
    ch = DelayChannel(h1, h2, rng=np.random.default_rng(seed), prefill=[0.0])
    for k in range(60):
        ch.push(k, [float(k)])
        m = ch.sample_delayed(k)
        assert h1 <= m.age(k) <= h2
        assert m.value[0] == max(m.origin_step, 0) * (m.origin_step >= 0)
    assert min(ch.delays) >= h1 and max(ch.delays) <= h2


@given(st.integers(0, 2**32 - 1))
def test_same_seed_same_trace(seed):
    a = draw_trace(3, 5, 100, np.random.default_rng(seed))
    b = draw_trace(3, 5, 100, np.random.default_rng(seed))
    assert a == b


def test_trace_file_roundtrip(tmp_path):
    seq = [3, 4, 5, 5, 3]
    path = dump_trace(tmp_path / "t.txt", seq)
    assert path.read_text() == "3\n4\n5\n5\n3\n"
    assert load_trace(path) == seq


def test_bounds_validation_and_seconds():
    b = DelayBounds(3, 5, 4, 7)
    assert b.tau == 2
    assert list(b.output_range()) == [4, 5, 6, 7]
    (i_lo, i_hi), (o_lo, o_hi) = b.seconds(0.05)
    assert (i_lo, i_hi, o_lo, o_hi) == pytest.approx((0.15, 0.25, 0.2, 0.35))
    with pytest.raises(ValueError):
        DelayBounds(5, 3, 0, 0)
    with pytest.raises(ValueError):
        DelayBounds(0, 0, -1, 0)

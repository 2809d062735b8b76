import math

import numpy as np
import pytest

from conftest import assert_rate_close
from traceforge.bits import BitString, Seed, parse_text, sample_uniform
from traceforge.channel import (
    AlignedTrace,
    ChannelParams,
    TraceBatch,
    enumerated_marginals,
    exact_marginals,
    exact_trace_distribution,
    insertion_equivalence_pmf,
    total_variation,
    trace_log_likelihood,
    transmit,
    transmit_batch,
    transmit_geometric,
    validate_provenance,
)


def test_params_validation():
    with pytest.raises(ValueError):
        ChannelParams(1.0, 0.0)
    with pytest.raises(ValueError):
        ChannelParams(0.0, -0.1)


def test_step_weights_at_half():
    p = ChannelParams(0.5, 0.5)
    assert p.step_delete == pytest.approx(1 / 3)
    assert p.step_insert == pytest.approx(1 / 3)


def test_noiseless_transmit_is_identity():
    x = parse_text("1011001")
    t = transmit(x, ChannelParams(0.0, 0.0), Seed(3))
    assert t.trace == x
    assert list(t.source) == list(range(len(x)))


def test_noiseless_geometric_is_identity():
    x = parse_text("1011001")
    for conv in ("before", "after"):
        t = transmit_geometric(x, ChannelParams(0.0, 0.0), Seed(3), conv)
        assert t.trace == x


def test_single_trace_probability_by_enumeration():
    # x = 10, q = 0.5: of the four deletion patterns only keep-first /
    # delete-second yields the trace "1"
    d, tail = exact_trace_distribution(parse_text("10"), ChannelParams(0.5, 0.0), 4)
    assert d["1"] == pytest.approx(0.25, abs=1e-12)
    assert tail == pytest.approx(0.0, abs=1e-12)


def test_transmit_matches_enumeration():
    x = parse_text("10")
    params = ChannelParams(0.5, 0.0)
    trials = 4000
    hits = sum(
        transmit(x, params, Seed(1, (i,))).trace == parse_text("1") for i in range(trials)
    )
    assert_rate_close(hits, trials, 0.25)


def test_geometric_trace_length_one():
    # x = 1, q = 0, q' = 0.5: |trace| = 1 iff the single burst is empty (p 0.5)
    x = parse_text("1")
    params = ChannelParams(0.0, 0.5)
    trials = 4000
    hits = sum(
        len(transmit_geometric(x, params, Seed(2, (i,)), "before")) == 1
        for i in range(trials)
    )
    assert_rate_close(hits, trials, 0.5)


def test_construction_equivalence_small_grid():
    x = parse_text("1011")
    for q, qi in [(0.2, 0.5), (0.5, 0.2), (0.5, 0.5)]:
        params = ChannelParams(q, qi)
        da = exact_trace_distribution(x, params, 10, "geometric_before")
        db = exact_trace_distribution(x, params, 10, "step")
        assert total_variation(da, db) < 1e-9


def test_geometric_before_after_differ_distributionally():
    # insert-before allows output to start with an insertion burst before bit 0
    x = parse_text("1")
    params = ChannelParams(0.0, 0.5)
    da = exact_trace_distribution(x, params, 6, "geometric_before")
    db = exact_trace_distribution(x, params, 6, "geometric_after")
    assert da[0]["1"] == pytest.approx(0.5, abs=1e-12)  # empty burst either way
    assert db[0]["1"] == pytest.approx(0.5, abs=1e-12)
    # a trace starting with an inserted 0 exists only under insert-before
    assert da[0]["01"] == pytest.approx(0.125, abs=1e-12)
    assert "01" not in db[0]
    assert total_variation(da, db) > 0.1


def test_insertion_pmf_hand_value():
    a, b = insertion_equivalence_pmf(ChannelParams(0.5, 0.5), 0)
    assert a == pytest.approx(2 / 3, abs=1e-12)
    assert b == pytest.approx(2 / 3, abs=1e-12)


def test_insertion_pmf_no_insertions():
    for k in range(4):
        a, b = insertion_equivalence_pmf(ChannelParams(0.3, 0.0), k)
        expected = 1.0 if k == 0 else 0.0
        assert a == pytest.approx(expected, abs=1e-15)
        assert b == pytest.approx(expected, abs=1e-15)


def test_insertion_pmf_no_deletions():
    params = ChannelParams(0.0, 0.4)
    for k in range(6):
        a, b = insertion_equivalence_pmf(params, k)
        expected = 0.4**k * 0.6
        assert a == pytest.approx(expected, abs=1e-12)
        assert b == pytest.approx(expected, abs=1e-12)


def test_insertion_pmf_sides_agree(param_grid):
    for params in param_grid:
        for k in range(0, 31, 5):
            a, b = insertion_equivalence_pmf(params, k)
            assert abs(a - b) < 1e-12


def test_alignment_maps_identity_channel():
    x = parse_text("10110")
    t = transmit(x, ChannelParams(0.0, 0.0), Seed(1))
    for k in range(len(x)):
        assert t.f_of(k) == k
        assert t.g_of(k) == k
        assert t.h_of(k) == k
    assert t.f_of(len(x)) is None


def test_alignment_maps_hand_trace():
    # x = 101, bit 0 deleted, bits 1-2 copied, no insertions:
    # f(0) = 0 (first preserved bit of x(0:) is x_1 at trace position 0), g(0) = 1
    t = AlignedTrace(
        bits=np.array([0, 1], dtype=np.uint8),
        source=np.array([1, 2]),
        examined=np.array([1, 2]),
        n_input=3,
    )
    assert t.f_of(0) == 0
    assert t.f_of(1) == 0
    assert t.f_of(2) == 1
    assert t.g_of(0) == 1
    assert t.g_of(1) == 2


def test_g_of_f_identity_over_random_traces():
    params = ChannelParams(0.3, 0.2)
    rng_inputs = sample_uniform(60, Seed(77))
    for i in range(1000):
        t = transmit(rng_inputs, params, Seed(78, (i,)))
        copied = set(int(s) for s in t.source if s >= 0)
        for k in range(60):
            fk = t.f_of(k)
            if fk is None:
                continue
            assert (t.g_of(fk) == k) == (k in copied)


def test_provenance_invariants_random():
    params = ChannelParams(0.4, 0.3)
    x = sample_uniform(200, Seed(5))
    for i in range(50):
        t = transmit(x, params, Seed(6, (i,)))
        validate_provenance(t, x)
        tg = transmit_geometric(x, params, Seed(7, (i,)), "before")
        validate_provenance(tg, x)


def test_psi_recoverable_from_event_log():
    x = sample_uniform(32, Seed(8))
    t = transmit(x, ChannelParams(0.3, 0.3), Seed(9), record_events=True)
    for j in range(len(t)):
        step = t.psi_of(j)
        emitted_before = int(np.sum(t.events[: step + 1] != 0))
        assert emitted_before == j + 1


def test_expected_length_law():
    # mean |trace| / n within 1% of p_keep/p_noins over 1e5 traces of n = 1e3
    params = ChannelParams(0.3, 0.2)
    x = sample_uniform(1000, Seed(10))
    batch = transmit_batch(x, params, Seed(11), 100_000)
    ratio = batch.lengths.mean() / 1000
    assert abs(ratio - params.length_ratio) < 0.01 * params.length_ratio


def test_g_walk_mean_zero():
    # increments of g(s) - s have mean zero (empirically, 3 sigma)
    params = ChannelParams(0.25, 0.25)
    n, trials = 400, 300
    x = sample_uniform(n, Seed(12))
    devs = []
    for i in range(trials):
        t = transmit(x, params, Seed(13, (i,)))
        gs = [t.g_of(s) for s in range(len(t))]
        vals = [g - s for s, g in enumerate(gs) if g is not None]
        if vals:
            devs.append(np.mean(np.diff(vals)))
    mean = np.mean(devs)
    sem = np.std(devs) / math.sqrt(len(devs))
    assert abs(mean) <= 3 * max(sem, 1e-9)


def test_marginals_noiseless():
    x = parse_text("10110")
    ms = exact_marginals(x, ChannelParams(0.0, 0.0), "before", 6)
    assert np.allclose(ms.p_one[:5], x.bits)
    assert np.allclose(ms.p_exists[:5], 1.0)
    assert np.allclose(ms.p_exists[5:], 0.0)


def test_marginals_hand_value():
    # x = (0,1), q = 0.5: P[trace[0] = 1] = 0.25 (enumerate deletion patterns)
    ms = exact_marginals(parse_text("01"), ChannelParams(0.5, 0.0), "before", 2)
    assert ms.p_one[0] == pytest.approx(0.25, abs=1e-12)


def test_marginals_match_enumeration_grid(param_grid):
    x = parse_text("101101")
    for params in param_grid:
        for conv, cons in [
            ("before", "step"),
            ("before", "geometric_before"),
            ("after", "geometric_after"),
        ]:
            ms = exact_marginals(x, params, conv, 10)
            en = enumerated_marginals(x, params, 10, cons)
            assert np.abs(ms.p_one - en.p_one).max() < 1e-12
            assert np.abs(ms.p_exists - en.p_exists).max() < 1e-12


def test_marginals_match_monte_carlo():
    params = ChannelParams(0.3, 0.2)
    x = sample_uniform(48, Seed(14))
    trials = 200_000
    batch = transmit_batch(x, params, Seed(15), trials)
    jm = 40
    ms = exact_marginals(x, params, "before", jm)
    cols = np.arange(jm + 1)
    exists = cols[None, :] < batch.lengths[:, None]
    ones = (batch.bits[:, : jm + 1] > 0) & exists
    for j in range(jm + 1):
        assert_rate_close(int(ones[:, j].sum()), trials, ms.p_one[j], n_sigma=4.5)
        assert_rate_close(int(exists[:, j].sum()), trials, ms.p_exists[j], n_sigma=4.5)


def test_likelihood_single_bit():
    x = parse_text("1")
    params = ChannelParams(0.5, 0.0)
    assert math.exp(trace_log_likelihood(x, params, BitString([]))) == pytest.approx(0.5)
    assert math.exp(trace_log_likelihood(x, params, parse_text("1"))) == pytest.approx(0.5)
    assert trace_log_likelihood(x, params, parse_text("0")) == -math.inf


def test_likelihood_noiseless_indicator():
    x = parse_text("10110")
    params = ChannelParams(0.0, 0.0)
    assert trace_log_likelihood(x, params, x) == pytest.approx(0.0)
    assert trace_log_likelihood(x, params, parse_text("10111")) == -math.inf


def test_likelihood_sums_to_one():
    x = parse_text("101")
    params = ChannelParams(0.4, 0.3)
    d, tail = exact_trace_distribution(x, params, 12, "step")
    total = sum(math.exp(trace_log_likelihood(x, params, parse_text(y))) for y in d)
    assert total + tail == pytest.approx(1.0, abs=1e-9)


def test_likelihood_matches_distribution():
    x = parse_text("1011")
    params = ChannelParams(0.3, 0.4)
    d, _ = exact_trace_distribution(x, params, 8, "step")
    for y, prob in d.items():
        ll = trace_log_likelihood(x, params, parse_text(y))
        assert math.exp(ll) == pytest.approx(prob, abs=1e-12)


def test_likelihood_long_trace_no_underflow():
    params = ChannelParams(0.1, 0.1)
    x = sample_uniform(1000, Seed(16))
    t = transmit(x, params, Seed(17))
    ll = trace_log_likelihood(x, params, t.trace)
    assert math.isfinite(ll)
    assert ll < 0


def test_distribution_trivial_cases():
    x = parse_text("1")
    d, tail = exact_trace_distribution(x, ChannelParams(0.5, 0.0), 4)
    assert d == {"": pytest.approx(0.5), "1": pytest.approx(0.5)}
    assert tail == pytest.approx(0.0)
    x2 = parse_text("0110")
    d2, tail2 = exact_trace_distribution(x2, ChannelParams(0.0, 0.0), 6)
    assert d2 == {"0110": pytest.approx(1.0)}
    assert tail2 == pytest.approx(0.0)


def test_distribution_guards():
    with pytest.raises(ValueError):
        exact_trace_distribution(sample_uniform(9, Seed(1)), ChannelParams(0.1, 0.1), 4)
    with pytest.raises(ValueError):
        exact_trace_distribution(parse_text("1"), ChannelParams(0.1, 0.1), 17)


def test_batch_sampler_matches_step_sampler():
    # transmit and transmit_batch draw from the same law: compare per-position
    # one-frequencies and length histograms on a small instance
    params = ChannelParams(0.3, 0.3)
    x = parse_text("110100")
    jm = 8
    ms = exact_marginals(x, params, "before", jm)
    trials = 120_000
    batch = transmit_batch(x, params, Seed(18), trials)
    cols = np.arange(jm + 1)
    exists = cols[None, :] < batch.lengths[:, None]
    ones = (batch.bits[:, : jm + 1] > 0) & exists
    for j in range(jm + 1):
        assert_rate_close(int(ones[:, j].sum()), trials, ms.p_one[j], n_sigma=4.5)
    step_lengths = np.array(
        [len(transmit(x, params, Seed(19, (i,)))) for i in range(4000)]
    )
    assert_rate_close(
        int((step_lengths == 6).sum()), 4000, float((batch.lengths == 6).mean()), n_sigma=5
    )


def test_batch_g_at_matches_reference():
    params = ChannelParams(0.3, 0.2)
    x = sample_uniform(64, Seed(20))
    batch = transmit_batch(x, params, Seed(21), 64)
    rng = np.random.default_rng(0)
    for i in range(0, 64, 7):
        trace = AlignedTrace(
            batch.bits[i, : batch.lengths[i]],
            batch.source[i, : batch.lengths[i]].astype(np.int64),
            np.zeros(batch.lengths[i], dtype=np.int64),
            64,
        )
        pos = int(rng.integers(0, batch.lengths[i]))
        expected = trace.g_of(pos)
        got = batch.g_at(np.full(batch.count, pos))[i]
        assert (expected is None and got == -1) or got == expected


def test_trace_batch_from_traces():
    traces = [parse_text("101"), parse_text("11"), parse_text("")]
    batch = TraceBatch.from_traces(traces)
    assert list(batch.lengths) == [3, 2, 0]
    assert batch.source is None
    assert list(batch.row(0)) == [1, 0, 1]

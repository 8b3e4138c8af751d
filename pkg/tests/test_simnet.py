import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflsim import simnet, topology as tp
from conftest import TINY_DELAY, uniform_complete_graph


def drain(queue):
    out = []
    while (ev := queue.next_event()) is not None:
        out.append(ev)
    return out


class TestEventQueue:
    def test_src_breaks_timestamp_tie(self):
        q = simnet.EventQueue()
        q.post(simnet.SimEvent(1.0, "message_arrival", 1, 0))
        q.post(simnet.SimEvent(1.0, "message_arrival", 0, 1))
        first = q.next_event()
        assert first.src == 0

    def test_kind_rank_orders_equal_timestamps(self):
        q = simnet.EventQueue()
        q.post(simnet.SimEvent(2.0, "round_barrier", 0, 0))
        q.post(simnet.SimEvent(2.0, "compute_done", 5, 5))
        q.post(simnet.SimEvent(2.0, "message_arrival", 0, 1))
        kinds = [ev.kind for ev in drain(q)]
        assert kinds == ["compute_done", "message_arrival", "round_barrier"]

    def test_empty_queue_signals_end(self):
        q = simnet.EventQueue()
        assert q.next_event() is None

    def test_negative_timestamp_rejected(self):
        with pytest.raises(ValueError, match="timestamp"):
            simnet.SimEvent(-1.0, "compute_done", 0, 0)
        with pytest.raises(ValueError, match="timestamp"):
            simnet.SimEvent(math.nan, "compute_done", 0, 0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            simnet.SimEvent(0.0, "teleport", 0, 0)

    @settings(max_examples=40, deadline=None)
    @given(shuffle_seed=st.integers(0, 10_000))
    def test_order_invariant_under_insertion_permutation(self, shuffle_seed):
        events = [
            simnet.SimEvent(t, kind, src, dst, payload)
            for payload, (t, kind, src, dst) in enumerate([
                (0.5, "compute_done", 0, 0),
                (0.5, "compute_done", 1, 1),
                (0.5, "message_arrival", 0, 1),
                (0.25, "round_barrier", 0, 0),
                (0.75, "message_arrival", 1, 0),
                (0.75, "message_arrival", 1, 2),
                (0.75, "compute_done", 1, 2),
            ])
        ]
        baseline = simnet.EventQueue()
        for ev in events:
            baseline.post(ev)
        expected = drain(baseline)

        shuffled = events[:]
        random.Random(shuffle_seed).shuffle(shuffled)
        q = simnet.EventQueue()
        for ev in shuffled:
            q.post(ev)
        assert drain(q) == expected


class TestClock:
    def test_total_is_exact_sum(self):
        clock = simnet.Clock()
        for _ in range(1000):
            clock.advance(0.1)
        assert clock.now == 1000 * 0.1
        assert clock.rounds == 1000

    def test_nonnegative_durations(self):
        clock = simnet.Clock()
        with pytest.raises(ValueError, match=">= 0"):
            clock.advance(-0.5)


class TestSimulateRound:
    def test_ring_constant_delays(self):
        g = uniform_complete_graph(4, latency=0.5)
        o = tp.build_overlay_christofides(g, TINY_DELAY)
        assert simnet.simulate_round(o, TINY_DELAY, "dfl_ring") == pytest.approx(0.5)

    def test_star_symmetric_legs(self):
        star = simnet.StarSpec(silo_compute_s=(0.0, 0.0, 0.0),
                               server_latency_s=0.2, server_bandwidth_Bps=1e30,
                               server_compute_s=0.0)
        assert simnet.simulate_round(star, TINY_DELAY, "sfl_star") == pytest.approx(0.4)

    def test_star_formula(self):
        p = tp.DelayParams(model_size_bytes=1e6, local_steps=2)
        star = simnet.StarSpec(silo_compute_s=(0.1, 0.4, 0.2),
                               server_latency_s=0.05, server_bandwidth_Bps=1e7,
                               server_compute_s=0.03)
        per_leg = 1e6 / 1e7
        expected = max(2 * tc + 0.05 + per_leg + 0.05 + per_leg for tc in (0.1, 0.4, 0.2)) + 0.03
        assert simnet.simulate_round(star, p, "sfl_star") == pytest.approx(expected)

    def test_single_node(self):
        p = tp.DelayParams(model_size_bytes=1.0, local_steps=3)
        node = simnet.SingleSpec(compute_time_s=0.2)
        assert simnet.simulate_round(node, p, "cll_single") == pytest.approx(0.6)

    def test_total_time_additivity(self):
        node = simnet.SingleSpec(compute_time_s=0.125)
        d = simnet.simulate_round(node, TINY_DELAY, "cll_single")
        clock = simnet.Clock()
        for _ in range(7):
            clock.advance(d)
        assert clock.now == 7 * d

    def test_ring_duration_matches_cycle_time(self, gaia11, nws22):
        p = tp.DelayParams(model_size_bytes=8 * 31227, local_steps=1)
        for g in (gaia11, nws22):
            o = tp.build_overlay_christofides(g, p)
            assert simnet.simulate_round(o, p, "dfl_ring") == tp.cycle_time(o, p)

    def test_mode_topology_mismatch(self):
        g = uniform_complete_graph(3)
        o = tp.build_overlay_christofides(g, TINY_DELAY)
        with pytest.raises(ValueError, match="StarSpec"):
            simnet.simulate_round(o, TINY_DELAY, "sfl_star")
        with pytest.raises(ValueError, match="Overlay"):
            simnet.simulate_round(simnet.SingleSpec(0.1), TINY_DELAY, "dfl_ring")
        with pytest.raises(ValueError, match="mode"):
            simnet.simulate_round(o, TINY_DELAY, "warp")

import math

import numpy as np
import pytest

from avasr.ctc import (
    CtcPrefixState,
    LogProbLattice,
    all_label_sequences,
    ctc_loss,
    ctc_prefix_extend,
    ctc_prefix_init,
    ctc_termination_score,
    lattice_from_logits,
)
from avasr.numerics import fd_gradient, rel_error, seeded_rng

from oracles import (
    enumerate_all_output_log_probs,
    enumerate_ctc_log_prob,
    random_lattice,
)


def make_lattice(rng, t, v):
    return LogProbLattice(random_lattice(rng, t, v))


class TestCtcLoss:
    def test_single_frame_single_label(self):
        rng = seeded_rng(0)
        lat = make_lattice(rng, 1, 3)
        res = ctc_loss(lat, [1])
        assert res.log_prob == pytest.approx(lat.log_probs[0, 1], abs=1e-12)

    def test_two_frames_single_label_three_alignments(self):
        # p = p1(a)p2(b) + p1(b)p2(a) + p1(a)p2(a), b = blank
        rng = seeded_rng(1)
        lat = make_lattice(rng, 2, 2)
        a, blank = 0, lat.blank
        lp = lat.log_probs
        expected = np.log(
            math.exp(lp[0, a] + lp[1, blank])
            + math.exp(lp[0, blank] + lp[1, a])
            + math.exp(lp[0, a] + lp[1, a])
        )
        assert ctc_loss(lat, [a]).log_prob == pytest.approx(expected, abs=1e-12)

    def test_repeat_needs_separating_blank(self):
        rng = seeded_rng(2)
        lat = make_lattice(rng, 2, 2)
        res = ctc_loss(lat, [0, 0])
        assert res.log_prob == -math.inf
        assert not res.feasible
        assert np.all(res.grad == 0.0)

    def test_matches_enumeration_random(self):
        rng = seeded_rng(3)
        for _ in range(25):
            t = int(rng.integers(2, 7))
            v = int(rng.integers(2, 4))
            lat = make_lattice(rng, t, v)
            length = int(rng.integers(1, 4))
            y = [int(c) for c in rng.integers(0, v, size=length)]
            got = ctc_loss(lat, y).log_prob
            want = enumerate_ctc_log_prob(lat.log_probs, y)
            if want == -math.inf:
                assert got == -math.inf
            else:
                assert got == pytest.approx(want, abs=1e-10)

    def test_total_probability_sums_to_one(self):
        rng = seeded_rng(4)
        for _ in range(5):
            lat = make_lattice(rng, 4, 2)
            total = 0.0
            # empty output = the all-blank path
            total += math.exp(np.sum(lat.log_probs[:, lat.blank]))
            for y in all_label_sequences(2, 4):
                if not y:
                    continue
                lp = ctc_loss(lat, y).log_prob
                if lp > -math.inf:
                    total += math.exp(lp)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = seeded_rng(5)
        for _ in range(5):
            t, v = 4, 3
            logits = rng.normal(0.0, 1.0, size=(t, v + 1))
            y = [int(c) for c in rng.integers(0, v, size=2)]

            def loss_of(flat, y=y, t=t, v=v):
                lat = lattice_from_logits(flat.reshape(t, v + 1))
                return -ctc_loss(lat, y).log_prob

            lat = lattice_from_logits(logits)
            res = ctc_loss(lat, y)
            # chain rule through the log-softmax rows
            p = np.exp(lat.log_probs)
            g_norm = res.grad - p * res.grad.sum(axis=1, keepdims=True)
            fd = fd_gradient(loss_of, logits.copy().reshape(-1), h=1e-5)
            assert rel_error(g_norm.reshape(-1), fd) < 1e-4

    def test_rejects_empty_and_bad_labels(self):
        lat = make_lattice(seeded_rng(6), 3, 2)
        with pytest.raises(ValueError):
            ctc_loss(lat, [])
        with pytest.raises(ValueError):
            ctc_loss(lat, [lat.blank])


class TestPrefixScoring:
    def test_init_blank_products(self):
        rng = seeded_rng(10)
        lat = make_lattice(rng, 3, 2)
        st = ctc_prefix_init(lat)
        want = np.cumsum(lat.log_probs[:, lat.blank])
        np.testing.assert_allclose(st.log_r_blank, want, atol=1e-12)
        assert np.all(st.log_r_nonblank == -math.inf)
        assert len(st.log_r_blank) == lat.num_frames
        # empty-sequence probability is the all-blank product
        assert ctc_termination_score(st) == pytest.approx(want[-1], abs=1e-12)

    def test_single_frame_extension(self):
        lat = make_lattice(seeded_rng(11), 1, 3)
        st = ctc_prefix_init(lat)
        _, score = ctc_prefix_extend(st, 0, lat)
        assert score == pytest.approx(lat.log_probs[0, 0], abs=1e-12)

    def test_terminated_prefix_equals_ctc_loss(self):
        rng = seeded_rng(12)
        for _ in range(10):
            t = int(rng.integers(2, 6))
            v = int(rng.integers(2, 4))
            lat = make_lattice(rng, t, v)
            length = int(rng.integers(1, min(t, 3) + 1))
            y = [int(c) for c in rng.integers(0, v, size=length)]
            st = ctc_prefix_init(lat)
            for c in y:
                st, _ = ctc_prefix_extend(st, c, lat)
            term = ctc_termination_score(st)
            want = ctc_loss(lat, y).log_prob
            if want == -math.inf:
                assert term == -math.inf
            else:
                assert term == pytest.approx(want, abs=1e-10)

    def test_conservation_every_step(self):
        # exp(terminated) + sum_c exp(extend by c) = exp(prefix probability)
        rng = seeded_rng(13)
        for _ in range(10):
            t = int(rng.integers(2, 6))
            v = 2
            lat = make_lattice(rng, t, v)
            st = ctc_prefix_init(lat)
            prefix_lp = 0.0
            for _step in range(3):
                parts = [ctc_termination_score(st)]
                children = []
                for c in range(v):
                    st_c, score_c = ctc_prefix_extend(st, c, lat)
                    parts.append(score_c)
                    children.append((st_c, score_c))
                total = np.logaddexp.reduce(parts)
                assert math.exp(total) == pytest.approx(math.exp(prefix_lp), abs=1e-10)
                st, prefix_lp = max(children, key=lambda x: x[1])
                if prefix_lp == -math.inf:
                    break

    def test_prefix_score_matches_enumeration(self):
        rng = seeded_rng(14)
        for _ in range(6):
            t = int(rng.integers(2, 6))
            v = 2
            lat = make_lattice(rng, t, v)
            table = enumerate_all_output_log_probs(lat.log_probs)
            st = ctc_prefix_init(lat)
            prefix = []
            for c in [0, 1, 0][: t - 1]:
                st, score = ctc_prefix_extend(st, c, lat)
                prefix.append(c)
                want = -math.inf
                for seq, lp in table.items():
                    if seq[: len(prefix)] == tuple(prefix):
                        want = np.logaddexp(want, lp)
                if want == -math.inf:
                    assert score == -math.inf
                else:
                    assert score == pytest.approx(want, abs=1e-10)

    def test_greedy_extension_recovers_dominant_path(self):
        # a lattice sharply peaked on one path decodes to that path's collapse
        rng = seeded_rng(15)
        path = [0, 0, 2, 2, 1, 3, 3]  # blank = 3 for v = 3
        v = 3
        logits = np.full((len(path), v + 1), -8.0)
        for t, p in enumerate(path):
            logits[t, p] = 8.0
        lat = lattice_from_logits(logits)
        target = []
        prev = None
        for p in path:
            if p != prev and p != v:
                target.append(p)
            prev = p
        st = ctc_prefix_init(lat)
        decoded = []
        for _ in range(len(path)):
            best_c, best_s, best_st = None, -math.inf, None
            for c in range(v):
                st_c, score = ctc_prefix_extend(st, c, lat)
                if score > best_s:
                    best_c, best_s, best_st = c, score, st_c
            if ctc_termination_score(st) > best_s:
                break
            decoded.append(best_c)
            st = best_st
        assert decoded == target

    def test_extend_beyond_feasible_is_neg_inf(self):
        lat = make_lattice(seeded_rng(16), 2, 2)
        st = ctc_prefix_init(lat)
        st, _ = ctc_prefix_extend(st, 0, lat)
        st, _ = ctc_prefix_extend(st, 1, lat)
        _, score = ctc_prefix_extend(st, 0, lat)
        assert score == -math.inf

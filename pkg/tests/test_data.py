import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmmsb.core import MembershipMatrix, Transaction, TransactionLog
from tmmsb.data import (CountMatrix, LogFormatError, SocioMatrix, baseline_from_log,
                        baseline_hierarchical, format_log, holdout_split, load_log, load_reddit_like,
                        ordered_adjacency, parse_log, save_log, spectral_clusters, to_counts, to_socio)
from tmmsb.inference import estimate_b

from conftest import random_log


class TestParse:
    def test_jsonl_example(self):
        text = '{"sender":"A","recipients":["B","D"]}\n{"sender":"C","recipients":["A"]}\n'
        log = parse_log(text, "jsonl")
        assert log.transactions[0] == Transaction(0, frozenset({1, 2}))
        assert log.node_labels == ("A", "B", "D", "C")

    def test_preseeded_nodes(self):
        log = parse_log('{"sender":"A","recipients":["B","D"]}\n', "jsonl", nodes=["A", "B", "C", "D"])
        assert log.num_nodes == 4
        assert log.transactions[0] == Transaction(0, frozenset({1, 3}))

    @pytest.mark.parametrize("line, rule", [
        ('{"sender":"A","recipients":[]}', "empty recipient"),
        ('{"sender":"A","recipients":["A","B"]}', "self-send"),
        ('{"sender":"A","recipients":["B","B"]}', "duplicate"),
        ('{"sender":"A"', "malformed"),
        ('{"sender":"A","recipients":"B"}', "array"),
        ('["A","B"]', "sender"),
    ])
    def test_errors_name_line_and_rule(self, line, rule):
        text = '{"sender":"X","recipients":["Y"]}\n' + line + "\n"
        with pytest.raises(LogFormatError, match=rule) as info:
            parse_log(text, "jsonl")
        assert info.value.line == 2
        assert "line 2" in str(info.value)

    def test_csv(self):
        log = parse_log("sender,recipients\nA,B;D\nC,A\n", "csv")
        assert log.transactions[0] == Transaction(0, frozenset({1, 2}))
        with pytest.raises(LogFormatError, match="empty recipient") as info:
            parse_log("sender,recipients\nA,B\nC,\n", "csv")
        assert info.value.line == 3
        with pytest.raises(LogFormatError, match="header"):
            parse_log("from,to\nA,B\n", "csv")

    def test_unknown_format(self, tmp_path):
        p = tmp_path / "log.txt"
        p.write_text("")
        with pytest.raises(ValueError, match="unknown log format"):
            load_log(p)
        with pytest.raises(ValueError):
            format_log(random_log(np.random.default_rng(0), 3, 2), "xml")

    def test_duplicate_transactions_kept(self):
        log = parse_log('{"sender":"A","recipients":["B"]}\n' * 3, "jsonl")
        assert len(log) == 3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["jsonl", "csv"]))
    def test_round_trip(self, seed, fmt):
        r = np.random.default_rng(seed)
        log = random_log(r, int(r.integers(2, 10)), int(r.integers(1, 20)))
        back = parse_log(format_log(log, fmt), fmt)
        # indices are reassigned by first appearance, so compare through names
        names = back.node_labels
        orig = [(str(t.sender), {str(j) for j in t.recipients}) for t in log.transactions]
        got = [(names[t.sender], {names[j] for j in t.recipients}) for t in back.transactions]
        assert got == orig
        again = parse_log(format_log(back, fmt), fmt)
        assert again == back

    def test_files(self, tmp_path):
        log = random_log(np.random.default_rng(3), 5, 8)
        for fmt in ("jsonl", "csv"):
            p = tmp_path / f"log.{fmt}"
            save_log(log, p)
            back = load_log(p)
            assert len(back) == 8
            again = tmp_path / f"again.{fmt}"
            save_log(back, again)
            assert load_log(again) == back


class TestReductions:
    def test_counts_example(self):
        log = parse_log('{"sender":"A","recipients":["B"]}\n{"sender":"A","recipients":["B","D"]}\n'
                        '{"sender":"C","recipients":["A"]}\n', "jsonl", nodes=["A", "B", "C", "D"])
        c = to_counts(log).counts
        assert c[0, 1] == 2 and c[0, 3] == 1 and c[2, 0] == 1
        assert c.sum() == 4
        np.testing.assert_array_equal(c[1], 0)

    def test_counts_total(self, rng):
        log = random_log(rng, 9, 50)
        c = to_counts(log)
        assert isinstance(c, CountMatrix)
        assert c.counts.sum() == sum(len(t.recipients) for t in log.transactions)
        assert np.all(np.diag(c.counts) == 0)

    def test_socio(self):
        c = np.array([[0, 2, 0], [1, 0, 3], [0, 0, 0]])
        s = to_socio(c, 1)
        assert isinstance(s, SocioMatrix)
        np.testing.assert_array_equal(s.adj, [[0, 1, 0], [1, 0, 1], [0, 0, 0]])
        np.testing.assert_array_equal(to_socio(c, 4).adj, 0)
        np.testing.assert_array_equal(to_socio(c, 2).adj, [[0, 1, 0], [0, 0, 1], [0, 0, 0]])
        with pytest.raises(ValueError):
            to_socio(c, 0)

    def test_socio_directional(self):
        c = np.array([[0, 0], [1, 0]])
        adj = to_socio(c).adj
        assert adj[1, 0] == 1 and adj[0, 1] == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_socio_never_invents_edges(self, seed, threshold):
        r = np.random.default_rng(seed)
        c = to_counts(random_log(r, 7, 30))
        adj = to_socio(c, threshold).adj
        assert np.all(adj <= (c.counts > 0))


class TestHoldout:
    def test_reddit_like_shape(self):
        log, _ = load_reddit_like()
        assert (log.num_nodes, len(log)) == (248, 6222)
        train, test = holdout_split(log, 500, top_senders=10, seed=0)
        assert len(train) == 5722 and len(test) == 500

    def test_zero(self, rng):
        log = random_log(rng, 5, 10)
        train, test = holdout_split(log, 0)
        assert train == log and len(test) == 0

    def test_senders_are_top_ranked_and_partition(self, rng):
        log = random_log(rng, 20, 300)
        train, test = holdout_split(log, 40, top_senders=5, seed=3)
        sent = log.sent_counts()
        # recount: ranks by sent count, ties by node index
        ranked = sorted(range(20), key=lambda i: (-sent[i], i))[:5]
        assert {t.sender for t in test.transactions} <= set(ranked)
        assert Counter(train.transactions) + Counter(test.transactions) == Counter(log.transactions)
        assert len(train) + len(test) == len(log)

    def test_not_enough(self, rng):
        log = random_log(rng, 5, 10)
        with pytest.raises(ValueError, match="eligible"):
            holdout_split(log, 11, top_senders=5)


class TestBaseline:
    def _cliques(self):
        txns = []
        for _ in range(3):
            for a in range(4):
                txns.append(Transaction(a, frozenset(set(range(4)) - {a})))
            for a in range(4, 8):
                txns.append(Transaction(a, frozenset(set(range(4, 8)) - {a})))
        return TransactionLog(8, txns)

    def test_two_cliques(self):
        labels, crude = baseline_from_log(self._cliques(), 2)
        np.testing.assert_array_equal(labels, [0, 0, 0, 0, 1, 1, 1, 1])
        np.testing.assert_allclose(crude, [[1.0, 0.0], [0.0, 1.0]])

    def test_matches_estimate_b_with_one_hot_phi(self, rng):
        log = random_log(rng, 12, 80, max_recipients=3)
        for k in (1, 2, 3, 5, 12):
            labels, crude = baseline_from_log(log, k)
            phi = np.broadcast_to(np.eye(k)[labels], (len(log), 12, k))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ref = estimate_b(phi, log, clamp_eps=1e-300)
            mask = crude > 0
            np.testing.assert_allclose(crude[mask], ref[mask], rtol=0, atol=1e-12)

    def test_each_node_its_own_cluster(self, rng):
        log = random_log(rng, 6, 40)
        labels, crude = baseline_from_log(log, 6)
        np.testing.assert_array_equal(labels, np.arange(6))
        counts = to_counts(log).counts
        sent = log.sent_counts()
        with np.errstate(all="ignore"):
            expect = np.where(sent[:, None] > 0, counts / np.maximum(sent[:, None], 1), 0.0)
        np.fill_diagonal(expect, 0.0)
        np.testing.assert_allclose(crude, expect, atol=1e-15)

    def test_identical_rows_and_bounds(self):
        c = np.zeros((4, 4), dtype=int)
        labels, _ = baseline_hierarchical(c, 2)
        assert sorted(set(labels.tolist())) == [0, 1] and labels[0] == 0
        with pytest.raises(ValueError):
            baseline_hierarchical(c, 5)

    def test_spectral_recovers_cliques(self):
        labels = spectral_clusters(to_counts(self._cliques()), 2, seed=0)
        assert len(set(labels[:4].tolist())) == 1 and len(set(labels[4:].tolist())) == 1
        assert labels[0] != labels[4]


class TestOrderedAdjacency:
    def test_blocks(self):
        pi = np.eye(2)[[1, 0, 1, 0]]
        a = np.arange(16).reshape(4, 4)
        out, order, bounds = ordered_adjacency(a, pi)
        np.testing.assert_array_equal(order, [1, 3, 0, 2])
        assert bounds == [2]

    def test_identity_when_sorted(self):
        pi = np.array([[0.9, 0.1], [0.6, 0.4], [0.2, 0.8]])
        a = np.arange(9).reshape(3, 3)
        out, order, _ = ordered_adjacency(a, MembershipMatrix(pi))
        np.testing.assert_array_equal(order, [0, 1, 2])
        np.testing.assert_array_equal(out, a)

    def test_permutation_matrix_oracle(self, rng):
        pi = rng.dirichlet(np.ones(3), size=10)
        a = rng.integers(0, 5, size=(10, 10))
        out, order, _ = ordered_adjacency(CountMatrix(a), pi)
        p = np.eye(10)[order]
        np.testing.assert_array_equal(out, p @ a @ p.T)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ordered_adjacency(np.zeros((3, 3)), np.eye(2))


def test_bundled_log_matches_truth_shape():
    log, truth = load_reddit_like()
    assert truth.pi.shape == (248, 6)
    assert 1.1 < log.total_recipients / len(log) < 1.2

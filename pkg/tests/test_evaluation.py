"""Metrics against an exhaustive-threshold oracle, plus trial plumbing."""

import numpy as np
import pytest

from spkmsa.evaluation import (EvalError, EvalResult, Trial, compute_eer, compute_mindcf,
                               cosine_score, format_results_table, read_embeddings,
                               read_trial_list, run_trials, write_embeddings,
                               write_results_csv)


def eer_oracle(scores, labels):
    """Exhaustive sweep over every candidate threshold with naive recounting."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tar = scores[labels == 1]
    non = scores[labels == 0]
    thresholds = np.concatenate(([-np.inf], np.unique(scores), [np.inf]))
    points = []
    for t in thresholds:
        frr = float((tar < t).sum()) / tar.size
        far = float((non >= t).sum()) / non.size
        points.append((far, frr))
    for i, (far, frr) in enumerate(points):
        if frr == far:
            return frr
        if frr > far:
            f1, r1 = points[i - 1]
            f2, r2 = points[i]
            alpha = (f1 - r1) / ((f1 - r1) - (f2 - r2))
            return f1 + alpha * (f2 - f1)
    raise AssertionError("no crossing")


def mindcf_oracle(scores, labels, p_target, c_miss=1.0, c_fa=1.0):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tar = scores[labels == 1]
    non = scores[labels == 0]
    best = np.inf
    for t in np.concatenate(([-np.inf], np.unique(scores), [np.inf])):
        frr = float((tar < t).sum()) / tar.size
        far = float((non >= t).sum()) / non.size
        cost = c_miss * frr * p_target + c_fa * far * (1.0 - p_target)
        best = min(best, cost)
    return best / min(c_miss * p_target, c_fa * (1.0 - p_target))


def random_trial_set(rng, n):
    labels = rng.integers(0, 2, size=n)
    while labels.min() == labels.max():  # need both classes
        labels = rng.integers(0, 2, size=n)
    # targets biased upward so lists span easy to hard
    scores = rng.standard_normal(n) + labels * rng.uniform(0.0, 2.0)
    return scores, labels


class TestCosine:
    def test_self_similarity(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_score(v, v) == pytest.approx(1.0)

    def test_antipodal(self):
        v = np.array([0.5, -1.0, 2.0])
        assert cosine_score(v, -v) == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        assert cosine_score(a, b) == pytest.approx(cosine_score(3.7 * a, 0.002 * b), abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(EvalError, match="zero-norm"):
            cosine_score(np.zeros(4), np.ones(4))


class TestEer:
    def test_perfect_separation(self):
        scores = [0.9, 0.8, 0.7, 0.2, 0.1]
        labels = [1, 1, 1, 0, 0]
        eer, _ = compute_eer(scores, labels)
        assert eer == 0.0

    def test_identical_scores_chance_level(self):
        scores = [0.5] * 10
        labels = [1, 0] * 5
        eer, _ = compute_eer(scores, labels)
        assert eer == pytest.approx(0.5, abs=1e-12)

    def test_hand_case_one_third(self):
        scores = [0.9, 0.8, 0.4, 0.6, 0.3, 0.2]
        labels = [1, 1, 1, 0, 0, 0]
        eer, thr = compute_eer(scores, labels)
        assert eer == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert thr == pytest.approx(0.6)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(120):
            scores, labels = random_trial_set(rng, int(rng.integers(2, 60)))
            got, _ = compute_eer(scores, labels)
            assert got == pytest.approx(eer_oracle(scores, labels), abs=1e-12)

    def test_matches_oracle_large_list(self):
        rng = np.random.default_rng(2)
        scores, labels = random_trial_set(rng, 10_000)
        got, _ = compute_eer(scores, labels)
        assert got == pytest.approx(eer_oracle(scores, labels), abs=1e-12)

    def test_affine_score_invariance(self):
        rng = np.random.default_rng(3)
        scores, labels = random_trial_set(rng, 400)
        base, _ = compute_eer(scores, labels)
        shifted, _ = compute_eer(2.5 * scores + 7.0, labels)
        assert shifted == pytest.approx(base, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(EvalError, match="target"):
            compute_eer([0.1, 0.2], [1, 1])


class TestMinDcf:
    def test_perfect_separation_zero(self):
        scores = [0.9, 0.8, 0.1, 0.05]
        labels = [1, 1, 0, 0]
        assert compute_mindcf(scores, labels, 0.01) == 0.0

    def test_upper_bound_one(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            scores, labels = random_trial_set(rng, 30)
            assert compute_mindcf(scores, labels, 0.01) <= 1.0 + 1e-12

    def test_hand_case_matches_oracle(self):
        scores = [0.9, 0.8, 0.4, 0.6, 0.3, 0.2]
        labels = [1, 1, 1, 0, 0, 0]
        got = compute_mindcf(scores, labels, 0.01)
        assert got == pytest.approx(mindcf_oracle(scores, labels, 0.01), abs=1e-12)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            scores, labels = random_trial_set(rng, int(rng.integers(2, 50)))
            for p in (0.01, 0.05, 0.5):
                got = compute_mindcf(scores, labels, p)
                assert got == pytest.approx(mindcf_oracle(scores, labels, p), abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(6)
        scores, labels = random_trial_set(rng, 300)
        a = compute_mindcf(scores, labels, 0.01)
        b = compute_mindcf(0.1 * scores - 3.0, labels, 0.01)
        assert a == pytest.approx(b, abs=1e-12)


class TestTrialPlumbing:
    def test_read_trial_list(self, tmp_path):
        p = tmp_path / "trials.txt"
        p.write_text("1 a.wav b.wav\n0 a.wav c.wav\n\n1 d.wav e.wav\n")
        trials = read_trial_list(p)
        assert len(trials) == 3
        assert trials[0] == Trial(label=1, enroll="a.wav", test="b.wav")

    def test_malformed_trial_rejected(self, tmp_path):
        p = tmp_path / "trials.txt"
        p.write_text("2 a b\n")
        with pytest.raises(EvalError):
            read_trial_list(p)

    def test_embedding_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        embs = {f"utt{i}": rng.standard_normal(16).astype(np.float32) for i in range(5)}
        p = tmp_path / "e.spke"
        write_embeddings(p, embs)
        back = read_embeddings(p)
        assert sorted(back) == sorted(embs)
        for k in embs:
            np.testing.assert_array_equal(back[k], embs[k].astype(np.float64))

    def test_run_trials_scores_and_caches(self):
        rng = np.random.default_rng(8)
        vectors = {"a": rng.standard_normal(8), "b": rng.standard_normal(8),
                   "c": rng.standard_normal(8)}
        calls = []

        def embed_fn(utt, duration):
            calls.append((utt, duration))
            return vectors[utt]

        trials = [Trial(1, "a", "b"), Trial(0, "a", "c"), Trial(1, "b", "c"), Trial(0, "b", "a")]
        run = run_trials(embed_fn, trials, test_duration="full")
        assert run.result.num_trials == 4
        assert len(calls) == 3  # each utterance embedded once per duration
        assert run.rejects == []

    def test_run_trials_collects_rejects_and_continues(self):
        def embed_fn(utt, duration):
            if utt == "missing":
                raise OSError("no such file")
            return np.ones(4) if utt == "a" else np.array([1.0, 0.0, 0.0, 0.0])

        trials = [Trial(1, "a", "missing"), Trial(1, "a", "a"), Trial(0, "a", "b")]
        run = run_trials(embed_fn, trials, test_duration="full")
        assert len(run.rejects) == 1
        assert run.result.num_trials == 2

    def test_results_csv_and_table(self, tmp_path):
        results = [EvalResult("1", 12.5, 0.61, 200, 0.3),
                   EvalResult("full", 8.25, 0.44, 200, 0.2)]
        p = tmp_path / "r.csv"
        write_results_csv(p, results)
        rows = p.read_text().strip().splitlines()
        assert rows[0] == "condition,eer,min_dcf,num_trials"
        assert rows[1].startswith("1,12.5")
        table = format_results_table(results)
        assert "full" in table and "8.25" in table

    def test_deterministic_rerun(self):
        rng = np.random.default_rng(9)
        vectors = {k: rng.standard_normal(8) for k in "abcd"}
        trials = [Trial(1, "a", "b"), Trial(0, "c", "d"), Trial(1, "a", "c"), Trial(0, "b", "d")]

        def embed_fn(utt, duration):
            return vectors[utt]

        r1 = run_trials(embed_fn, trials, test_duration=3)
        r2 = run_trials(embed_fn, trials, test_duration=3)
        assert r1.result == r2.result

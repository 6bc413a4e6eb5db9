"""Acceptance suite: one test per release criterion, one printed verdict each.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines as they pass. The desk-scale end-to-end fixture (criteria 6-8) trains
two small models from scratch and is the long pole; everything else
finishes in seconds.
"""

import sys
import time
import numpy as np
import pytest

from spkmsa import tensor as T
from spkmsa.aggregation import build_model, extract_embedding
from spkmsa.backbone import BackboneConfig, build_backbone
from spkmsa.config import RunConfig, desk_scale_config
from spkmsa.corpus import CorpusConfig, generate_corpus, read_manifest
from spkmsa.evaluation import compute_eer, compute_mindcf, cosine_score
from spkmsa.frontend import compute_logmel, read_wav_mono
from spkmsa.losses import build_objective
from spkmsa.nn import count_params
from spkmsa.pyramid import FeaturePyramid, FpmConfig
from spkmsa.tensor import Tensor, grad_check
from spkmsa.training import build_training_set, load_model, train

DESK_SEED = 1
TABLE = {
    ("single", "none"): 5.77e6,
    ("msfa", "none"): 6.20e6,
    ("msfa", "b"): 5.82e6,
    ("msfa", "tc"): 5.85e6,
    ("msea", "none"): 5.90e6,
    ("msea", "b"): 5.83e6,
    ("msea", "tc"): 5.85e6,
}


def report(criterion, description, ok):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {description}"
    print(line, file=sys.stderr, flush=True)
    assert ok, line


# -- criteria 1 and 2: parameter audit ------------------------------------------------


@pytest.fixture(scope="module")
def audit_totals():
    totals = {}
    for (agg, fpm) in TABLE:
        cfg = RunConfig().with_overrides({"aggregation": agg, "fpm": fpm}).validate()
        model = build_model(cfg, seed=0)
        head = build_objective(cfg, np.random.default_rng(0), np.float32)
        totals[(agg, fpm)] = count_params(model) + count_params(head)
    return totals


def test_criterion_1_parameter_ordering(audit_totals):
    t = audit_totals
    start = time.time()
    ok = (t[("msfa", "b")] < t[("msfa", "tc")] < t[("msfa", "none")]
          and t[("msea", "b")] < t[("msea", "tc")] < t[("msea", "none")]
          and t[("single", "none")] < t[("msfa", "none")]
          and t[("single", "none")] < t[("msea", "none")])
    elapsed = time.time() - start
    report(1, f"pyramid variants strictly ordered (checked in {elapsed:.3f}s)",
           ok and elapsed < 1.0)


def test_criterion_2_parameter_magnitudes(audit_totals):
    deviations = {}
    for key, ref in TABLE.items():
        deviations[key] = 100.0 * (audit_totals[key] - ref) / ref
    worst = max(abs(d) for d in deviations.values())
    detail = ", ".join(f"{a}/{f}: {d:+.2f}%" for (a, f), d in deviations.items())
    report(2, f"totals within +/-5% of the published seven (worst {worst:.2f}%; {detail})",
           worst < 5.0)


# -- criterion 3: shape suite ---------------------------------------------------------


def test_criterion_3_shape_suite():
    start = time.time()
    backbone = build_backbone(BackboneConfig(), seed=0).eval()
    pyr_b = FeaturePyramid(FpmConfig(variant="b", stages=(1, 2, 3, 4)),
                           (32, 64, 128, 256), np.random.default_rng(1)).eval()
    pyr_tc = FeaturePyramid(FpmConfig(variant="tc", stages=(1, 2, 3, 4)),
                            (32, 64, 128, 256), np.random.default_rng(1)).eval()
    freqs = (64, 32, 16, 8)
    chans = (32, 64, 128, 256)
    ok = True
    with T.no_grad():
        for t_in in (8, 96, 300, 512, 1000):
            padded = ((t_in + 7) // 8) * 8
            maps = backbone.forward_stages(Tensor(np.zeros((1, 1, 64, t_in), dtype=np.float32)))
            for s in range(1, 5):
                m = maps.by_stage(s)
                ok &= m.shape == (1, chans[s - 1], freqs[s - 1], padded // (1 << (s - 1)))
            p = pyr_b(maps)
            for s in range(1, 5):
                ok &= p[s].shape == (1, 32) + maps.by_stage(s).shape[2:]
            if t_in == 96:
                ptc = pyr_tc(maps)
                ok &= all(ptc[s].shape == p[s].shape for s in p)
    elapsed = time.time() - start
    report(3, f"backbone chain and 32-channel pyramid exact for five durations "
              f"({elapsed:.1f}s)", ok and elapsed < 10.0)


# -- criterion 4: gradient suite ------------------------------------------------------


def test_criterion_4_gradient_suite():
    start = time.time()
    base = dict(stage_blocks="1,1,1,1", stage_channels="4,8,16,32", proj_channels=8,
                num_speakers=5, dtype="f64", sap_hidden=4, lde_channels=8, lde_codewords=4)
    graphs = [
        dict(aggregation="single", pooling="gap", loss="softmax"),
        dict(aggregation="single", pooling="sap", loss="asoftmax_ring"),
        dict(aggregation="single", pooling="lde", stages="4", loss="softmax"),
        dict(aggregation="msfa", pooling="gap", loss="softmax"),
        dict(aggregation="msfa", pooling="sap", fpm="b", loss="softmax"),
        dict(aggregation="msfa", pooling="lde", fpm="tc", stages="2,3,4", loss="asoftmax_ring"),
        dict(aggregation="msea", pooling="gap", loss="asoftmax_ring"),
        dict(aggregation="msea", pooling="sap", fpm="tc", loss="softmax"),
        dict(aggregation="msea", pooling="lde", fpm="b", loss="softmax"),
        dict(aggregation="msea", pooling="gap", fpm="tc", loss="softmax"),
    ]
    worst = 0.0
    for overrides in graphs:
        cfg = RunConfig().with_overrides({**base, **overrides}).validate()
        model = build_model(cfg, seed=101).eval()
        objective = build_objective(cfg, np.random.default_rng(202), np.float64)
        rng = np.random.default_rng(303)
        x = Tensor(rng.standard_normal((2, 1, 64, 10)))
        labels = rng.integers(0, cfg.num_speakers, size=2)

        def f():
            return objective.loss(model(x), labels)

        params = list(dict.fromkeys(model.parameters() + objective.parameters()))
        rep = grad_check(f, params, step=1e-5, tolerance=1e-4, coords_per_tensor=2,
                         rng=np.random.default_rng(404))
        worst = max(worst, rep.max_rel_err)
    elapsed = time.time() - start
    report(4, f"ten full graphs x three poolings x both losses, max rel err "
              f"{worst:.2e} ({elapsed:.0f}s)", worst < 1e-4 and elapsed < 300.0)


# -- criterion 5: metric oracle -------------------------------------------------------


def eer_oracle(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tar, non = scores[labels == 1], scores[labels == 0]
    points = []
    for t in np.concatenate(([-np.inf], np.unique(scores), [np.inf])):
        points.append((float((non >= t).sum()) / non.size, float((tar < t).sum()) / tar.size))
    for i, (far, frr) in enumerate(points):
        if frr == far:
            return frr
        if frr > far:
            f1, r1 = points[i - 1]
            f2, r2 = points[i]
            alpha = (f1 - r1) / ((f1 - r1) - (f2 - r2))
            return f1 + alpha * (f2 - f1)
    raise AssertionError


def mindcf_oracle(scores, labels, p_target, c_miss=1.0, c_fa=1.0):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tar, non = scores[labels == 1], scores[labels == 0]
    best = np.inf
    for t in np.concatenate(([-np.inf], np.unique(scores), [np.inf])):
        frr = float((tar < t).sum()) / tar.size
        far = float((non >= t).sum()) / non.size
        best = min(best, c_miss * frr * p_target + c_fa * far * (1.0 - p_target))
    return best / min(c_miss * p_target, c_fa * (1.0 - p_target))


def test_criterion_5_metric_oracle():
    start = time.time()
    rng = np.random.default_rng(99)
    sizes = ([int(rng.integers(2, 100)) for _ in range(150)]
             + [int(rng.integers(100, 1000)) for _ in range(40)]
             + [int(rng.integers(2000, 10001)) for _ in range(10)])
    worst = 0.0
    for n in sizes:
        labels = rng.integers(0, 2, size=n)
        while labels.min() == labels.max():
            labels = rng.integers(0, 2, size=n)
        scores = rng.standard_normal(n) + labels * rng.uniform(0.0, 2.0)
        got_eer, _ = compute_eer(scores, labels)
        worst = max(worst, abs(got_eer - eer_oracle(scores, labels)))
        got_dcf = compute_mindcf(scores, labels, 0.01)
        worst = max(worst, abs(got_dcf - mindcf_oracle(scores, labels, 0.01)))
    hand_scores = [0.9, 0.8, 0.4, 0.6, 0.3, 0.2]
    hand_labels = [1, 1, 1, 0, 0, 0]
    hand_eer, _ = compute_eer(hand_scores, hand_labels)
    worst = max(worst, abs(hand_eer - 1.0 / 3.0))
    elapsed = time.time() - start
    report(5, f"EER/minDCF equal exhaustive sweep on 200 lists + hand case, "
              f"max dev {worst:.2e} ({elapsed:.0f}s)", worst < 1e-12 and elapsed < 30.0)


# -- criteria 6-8: desk-scale end-to-end ----------------------------------------------


def held_out_trials(entries, rng, n_target=100, n_nontarget=100):
    by_spk = {}
    for spk, path in entries:
        by_spk.setdefault(spk, []).append(path)
    spks = sorted(by_spk)
    trials = []
    while len(trials) < n_target:
        s = spks[rng.integers(len(spks))]
        a, b = rng.choice(len(by_spk[s]), size=2, replace=False)
        trials.append((1, by_spk[s][a], by_spk[s][b]))
    while len(trials) < n_target + n_nontarget:
        i, j = rng.choice(len(spks), size=2, replace=False)
        trials.append((0, by_spk[spks[i]][rng.integers(len(by_spk[spks[i]]))],
                       by_spk[spks[j]][rng.integers(len(by_spk[spks[j]]))]))
    return trials


class EmbeddingStore:
    """Per-(utterance, duration) embedding cache over raw wav files."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.features = {}
        self.cache = {}

    def vector(self, path, duration):
        key = (path, str(duration))
        if key not in self.cache:
            if path not in self.features:
                pcm, rate = read_wav_mono(path)
                self.features[path] = compute_logmel(pcm, rate, self.cfg.frame_shift_ms,
                                                     self.cfg.n_fft, self.cfg.fmin_hz,
                                                     self.cfg.log_floor)
            self.cache[key] = extract_embedding(self.features[path], self.model,
                                                duration_s=duration).vector
        return self.cache[key]


def trial_eer(store, trials, test_duration, enroll_duration="full"):
    scores = [cosine_score(store.vector(e, enroll_duration), store.vector(t, test_duration))
              for _, e, t in trials]
    labels = [label for label, _, _ in trials]
    eer, _ = compute_eer(scores, labels)
    return 100.0 * eer


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Corpus, two trained models (with and without the pyramid), trials."""
    work = tmp_path_factory.mktemp("desk")
    cfg = desk_scale_config(seed=DESK_SEED)
    train_manifest = generate_corpus(
        CorpusConfig(num_speakers=20, utts_per_speaker=50, seed=cfg.corpus_seed,
                     dur_min_s=2.0, dur_max_s=5.0), work / "train")
    eval_manifest = generate_corpus(
        CorpusConfig(num_speakers=20, utts_per_speaker=5, seed=cfg.corpus_seed,
                     dur_min_s=6.5, dur_max_s=8.0, utt_offset=50), work / "eval")
    data = build_training_set(train_manifest, cfg)

    runs = {}
    for tag, fpm in (("fpm_tc", "tc"), ("no_fpm", "none")):
        c = desk_scale_config(seed=DESK_SEED, fpm=fpm)
        model = build_model(c)
        objective = build_objective(c, np.random.default_rng(np.random.PCG64((c.seed, 1))),
                                    c.numpy_dtype())
        result = train(model, objective, data, c, work / f"run_{tag}",
                       log=lambda msg: print(msg, file=sys.stderr, flush=True))
        runs[tag] = (c, model, objective, result)

    trials = held_out_trials(read_manifest(eval_manifest), np.random.default_rng(2024))
    stores = {tag: EmbeddingStore(model, c) for tag, (c, model, _, _) in runs.items()}
    return {"work": work, "cfg": cfg, "runs": runs, "trials": trials, "stores": stores,
            "data": data}


def test_criterion_6_desk_scale_end_to_end(desk_run):
    _, _, _, res_fpm = desk_run["runs"]["fpm_tc"]
    train_acc = res_fpm.metrics[-1][3]
    eer_fpm = trial_eer(desk_run["stores"]["fpm_tc"], desk_run["trials"], "full")
    eer_plain = trial_eer(desk_run["stores"]["no_fpm"], desk_run["trials"], "full")
    ok = train_acc > 0.90 and eer_fpm < 15.0 and eer_fpm <= eer_plain
    report(6, f"20x50 synthetic run: train acc {train_acc:.3f}, held-out EER "
              f"{eer_fpm:.2f}% (pyramid) vs {eer_plain:.2f}% (plain)", ok)


def test_criterion_7_duration_robustness(desk_run):
    store = desk_run["stores"]["fpm_tc"]
    eers = [trial_eer(store, desk_run["trials"], d) for d in (1, 2, 3, 5, "full")]
    inversions = [max(0.0, b - a) for a, b in zip(eers, eers[1:])]
    bad = [x for x in inversions if x > 1e-9]
    ok = all(np.isfinite(eers)) and len(bad) <= 1 and all(x <= 2.0 for x in bad)
    detail = " -> ".join(f"{e:.2f}" for e in eers)
    report(7, f"EER over durations 1/2/3/5/full: {detail} (%)", ok)


def test_criterion_8_determinism_and_serialization(desk_run, tmp_path):
    cfg, model, objective, result = desk_run["runs"]["fpm_tc"]
    # save -> load -> embed equals in-memory embed, bit for bit
    restored, _, rcfg = load_model(result.final_path)
    entries = read_manifest(desk_run["work"] / "eval" / "manifest.tsv")
    path = entries[0][1]
    pcm, rate = read_wav_mono(path)
    feats = compute_logmel(pcm, rate, cfg.frame_shift_ms, cfg.n_fft, cfg.fmin_hz, cfg.log_floor)
    direct = extract_embedding(feats, model).vector
    reloaded = extract_embedding(feats, restored).vector
    roundtrip_ok = np.array_equal(direct, reloaded)

    # same-seed short training runs are bit-identical (workers=1)
    short_cfg = desk_scale_config(seed=DESK_SEED, epochs=3)
    data = desk_run["data"]
    states = []
    for tag in ("a", "b"):
        m = build_model(short_cfg)
        obj = build_objective(short_cfg, np.random.default_rng(np.random.PCG64((short_cfg.seed, 1))),
                              short_cfg.numpy_dtype())
        train(m, obj, data, short_cfg, tmp_path / tag, log=lambda *_: None)
        states.append((tmp_path / tag / "final.ckpt").read_bytes())
    identical_ok = states[0] == states[1]
    report(8, f"checkpoint round trip bit-exact: {roundtrip_ok}; "
              f"same-seed retrain bit-identical: {identical_ok}",
           roundtrip_ok and identical_ok)

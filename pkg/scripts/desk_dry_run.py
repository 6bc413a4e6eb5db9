"""Dry run of the desk-scale end-to-end flow: two trainings + trial eval.

Exploratory tool for calibrating the acceptance thresholds; not part of the
test suite.
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from spkmsa.aggregation import build_model, extract_embedding
from spkmsa.config import desk_scale_config
from spkmsa.corpus import CorpusConfig, generate_corpus, read_manifest
from spkmsa.evaluation import compute_eer, cosine_score
from spkmsa.frontend import compute_logmel, read_wav_mono
from spkmsa.losses import build_objective
from spkmsa.training import build_training_set, train

WORK = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/desk_dry_run")
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 1


def held_out_trials(entries, rng, n_target=100, n_nontarget=100):
    by_spk = {}
    for spk, path in entries:
        by_spk.setdefault(spk, []).append(path)
    spks = sorted(by_spk)
    targets, nontargets = [], []
    while len(targets) < n_target:
        s = spks[rng.integers(len(spks))]
        a, b = rng.choice(len(by_spk[s]), size=2, replace=False)
        targets.append((1, by_spk[s][a], by_spk[s][b]))
    while len(nontargets) < n_nontarget:
        i, j = rng.choice(len(spks), size=2, replace=False)
        a = by_spk[spks[i]][rng.integers(len(by_spk[spks[i]]))]
        b = by_spk[spks[j]][rng.integers(len(by_spk[spks[j]]))]
        nontargets.append((0, a, b))
    return targets + nontargets


def embed_all(model, paths, duration, cache):
    out = {}
    for p in paths:
        key = (p, str(duration))
        if key not in cache:
            pcm, rate = read_wav_mono(p)
            feats = compute_logmel(pcm, rate)
            cache[key] = extract_embedding(feats, model, duration_s=duration).vector
        out[p] = cache[key]
    return out


def trial_eer(model, trials, duration, cache):
    paths = sorted({t[1] for t in trials} | {t[2] for t in trials})
    embs = embed_all(model, paths, "full", cache)
    embs_t = embed_all(model, paths, duration, cache) if duration != "full" else embs
    scores = [cosine_score(embs[e], embs_t[t]) for _, e, t in trials]
    labels = [l for l, _, _ in trials]
    eer, _ = compute_eer(scores, labels)
    return 100.0 * eer


def main():
    t_start = time.time()
    cfg = desk_scale_config(seed=SEED)
    train_corpus = CorpusConfig(num_speakers=20, utts_per_speaker=50, seed=cfg.corpus_seed,
                                dur_min_s=2.0, dur_max_s=5.0)
    eval_corpus = CorpusConfig(num_speakers=20, utts_per_speaker=5, seed=cfg.corpus_seed,
                               dur_min_s=6.5, dur_max_s=8.0, utt_offset=50)
    m_train = generate_corpus(train_corpus, WORK / "train")
    m_eval = generate_corpus(eval_corpus, WORK / "eval")
    print(f"[{time.time()-t_start:7.1f}s] corpora generated")

    data = build_training_set(m_train, cfg)
    print(f"[{time.time()-t_start:7.1f}s] features ready ({len(data)} utts)")

    results = {}
    for tag, fpm in (("fpm_tc", "tc"), ("no_fpm", "none")):
        c = desk_scale_config(seed=SEED, fpm=fpm)
        model = build_model(c)
        objective = build_objective(c, np.random.default_rng(np.random.PCG64((c.seed, 1))),
                                    c.numpy_dtype())
        res = train(model, objective, data, c, WORK / f"run_{tag}")
        print(f"[{time.time()-t_start:7.1f}s] {tag} trained, final acc {res.metrics[-1][3]:.3f}")
        results[tag] = (model, res)

    rng = np.random.default_rng(2024)
    trials = held_out_trials(read_manifest(m_eval), rng)
    for tag, (model, res) in results.items():
        cache = {}
        eer = trial_eer(model, trials, "full", cache)
        print(f"[{time.time()-t_start:7.1f}s] {tag}: train_acc={res.metrics[-1][3]:.3f} heldout_eer={eer:.2f}%")
        results[tag] += (eer, cache)

    model, res, _, cache = results["fpm_tc"]
    for dur in (1, 2, 3, 5, "full"):
        eer = trial_eer(model, trials, dur, cache)
        print(f"[{time.time()-t_start:7.1f}s] duration {dur}: EER {eer:.2f}%")
    print(f"total: {(time.time()-t_start)/60:.1f} min")


if __name__ == "__main__":
    main()

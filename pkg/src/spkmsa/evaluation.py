"""Trial scoring and verification metrics.

Scores are cosine similarities; the decision rule is accept iff
score >= threshold. EER is taken where the false-accept and false-reject
curves cross, linearly interpolated between adjacent operating points with
exact ties resolved at the lowest crossing threshold. The detection cost is
minimized over the same threshold sweep and normalized by the cheaper of
the two trivial policies, so 1.0 is the reject/accept-everything bound.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

EMBED_MAGIC = b"SPKE"
EMBED_VERSION = 1


class EvalError(ValueError):
    """Trial list or score input violates the evaluation contract."""


@dataclass
class Trial:
    label: int            # 1 target, 0 nontarget
    enroll: str
    test: str


@dataclass
class EvalResult:
    condition: str
    eer_percent: float
    min_dcf: float
    num_trials: int
    threshold_at_eer: float

    def __post_init__(self):
        if not 0.0 <= self.eer_percent <= 100.0:
            raise EvalError(f"EER out of range: {self.eer_percent}")
        if self.min_dcf < 0.0:
            raise EvalError(f"minDCF negative: {self.min_dcf}")


def cosine_score(e1, e2) -> float:
    """Cosine similarity in [-1, 1]; rejects zero-norm embeddings."""
    v1 = np.asarray(getattr(e1, "vector", e1), dtype=np.float64).reshape(-1)
    v2 = np.asarray(getattr(e2, "vector", e2), dtype=np.float64).reshape(-1)
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise EvalError("cosine_score: zero-norm embedding")
    return float(np.dot(v1, v2) / (n1 * n2))


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise EvalError("scores and labels differ in length")
    tar = scores[labels == 1]
    non = scores[labels == 0]
    if tar.size == 0 or non.size == 0:
        raise EvalError("need at least one target and one nontarget trial")
    return tar, non


def _operating_points(tar: np.ndarray, non: np.ndarray):
    """FRR and FAR at each candidate threshold, in ascending threshold order.

    Candidates are -inf (accept everything), every distinct score, and +inf
    (reject everything); at threshold t: FRR = frac(tar < t),
    FAR = frac(non >= t).
    """
    thresholds = np.concatenate(([-np.inf], np.unique(np.concatenate([tar, non])), [np.inf]))
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    frr = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, frr, far


def compute_eer(scores, labels) -> tuple:
    """(EER fraction, threshold) from the interpolated FAR/FRR crossing."""
    tar, non = _split_scores(scores, labels)
    thresholds, frr, far = _operating_points(tar, non)
    # FRR rises and FAR falls with the threshold; the sweep ends at FRR=1,
    # FAR=0, so a crossing always exists. Exact ties resolve at the lowest
    # threshold where the rates meet.
    for i in range(thresholds.size):
        if frr[i] == far[i]:
            return float(frr[i]), float(thresholds[i])
        if frr[i] > far[i]:
            f1, r1 = far[i - 1], frr[i - 1]
            f2, r2 = far[i], frr[i]
            alpha = (f1 - r1) / ((f1 - r1) - (f2 - r2))
            eer = f1 + alpha * (f2 - f1)
            t1, t2 = thresholds[i - 1], thresholds[i]
            if not np.isfinite(t1):
                t1 = t2
            if not np.isfinite(t2):
                t2 = t1
            return float(eer), float(t1 + alpha * (t2 - t1))
    raise EvalError("no FAR/FRR crossing found")  # unreachable by construction


def dcf_curve(tar, non, p_target: float, c_miss: float, c_fa: float):
    """Normalized detection cost at every candidate threshold."""
    thresholds, frr, far = _operating_points(np.asarray(tar, dtype=np.float64),
                                             np.asarray(non, dtype=np.float64))
    cost = c_miss * frr * p_target + c_fa * far * (1.0 - p_target)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return thresholds, cost / norm


def compute_mindcf(scores, labels, p_target: float = 0.01,
                   c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    tar, non = _split_scores(scores, labels)
    _, dcf = dcf_curve(tar, non, p_target, c_miss, c_fa)
    return float(dcf.min())


# -- trial lists and embedding files -------------------------------------------------


def read_trial_list(path) -> list:
    """Lines ``label enroll_path test_path`` with label in {0, 1}."""
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise EvalError(f"{path}:{lineno}: expected 'label enroll test', got {raw!r}")
            trials.append(Trial(label=int(parts[0]), enroll=parts[1], test=parts[2]))
    if not trials:
        raise EvalError(f"{path}: empty trial list")
    return trials


def write_embeddings(path, embeddings: dict) -> None:
    """Binary embedding store: SPKE magic, version, dim, count, id+f32 records."""
    dims = {v.size for v in embeddings.values()}
    if len(dims) > 1:
        raise EvalError(f"mixed embedding dims: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, dim, len(embeddings)))
        for utt_id, vec in embeddings.items():
            raw = utt_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_embeddings(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != EMBED_MAGIC:
            raise EvalError(f"{path}: bad magic")
        version, dim, count = struct.unpack("<III", fh.read(12))
        if version != EMBED_VERSION:
            raise EvalError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            utt_id = fh.read(n).decode("utf-8")
            out[utt_id] = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)
    return out


# -- end-to-end trial evaluation ------------------------------------------------------


@dataclass
class TrialRun:
    result: EvalResult
    scores: np.ndarray
    labels: np.ndarray
    rejects: list = field(default_factory=list)


def run_trials(embed_fn, trials, test_duration, enroll_duration="full",
               p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0,
               cache: dict | None = None) -> TrialRun:
    """Score a trial list under one duration condition.

    ``embed_fn(utt_path, duration)`` returns a 1-D embedding vector and may
    raise OSError/ValueError for unreadable utterances; failed trials are
    collected in the rejects report and skipped. Embeddings are cached per
    (utterance, duration), shareable across conditions via ``cache``.
    """
    cache = {} if cache is None else cache
    rejects = []

    def embed(utt, duration):
        key = (utt, str(duration))
        if key not in cache:
            cache[key] = embed_fn(utt, duration)
        return cache[key]

    scores, labels = [], []
    for trial in trials:
        try:
            e = embed(trial.enroll, enroll_duration)
            t = embed(trial.test, test_duration)
        except (OSError, ValueError) as exc:
            rejects.append(f"{trial.enroll} {trial.test}: {exc}")
            continue
        scores.append(cosine_score(e, t))
        labels.append(trial.label)
    if not scores:
        raise EvalError("every trial was rejected")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    eer, thr = compute_eer(scores, labels)
    mdcf = compute_mindcf(scores, labels, p_target, c_miss, c_fa)
    result = EvalResult(condition=str(test_duration), eer_percent=100.0 * eer,
                        min_dcf=mdcf, num_trials=len(scores), threshold_at_eer=thr)
    return TrialRun(result=result, scores=scores, labels=labels, rejects=rejects)


def write_results_csv(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "eer", "min_dcf", "num_trials"])
        for r in results:
            writer.writerow([r.condition, f"{r.eer_percent:.4f}", f"{r.min_dcf:.4f}", r.num_trials])


def format_results_table(results, title: str = "verification results") -> str:
    lines = [title, f"{'condition':>10} {'EER (%)':>9} {'minDCF':>8} {'#trials':>8}"]
    for r in results:
        lines.append(f"{r.condition:>10} {r.eer_percent:>9.2f} {r.min_dcf:>8.3f} {r.num_trials:>8d}")
    return "\n".join(lines)

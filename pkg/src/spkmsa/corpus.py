"""Deterministic synthetic-speaker corpus for desk-scale training.

Each speaker is a recipe: a fundamental frequency, a small set of
formant-like resonances shaping the harmonic amplitudes, a spectral tilt
and vibrato/jitter parameters. Utterances of the same speaker share the
recipe and differ in phase, vibrato placement, noise and duration. All
randomness derives from numpy SeedSequences spawned per (speaker,
utterance), so regeneration from the same config is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import write_wav_mono

MANIFEST_NAME = "manifest.tsv"


@dataclass
class SpeakerRecipe:
    f0_hz: float
    formants: tuple            # (center_hz, bandwidth_hz, gain) triples
    tilt: float                # harmonic rolloff exponent
    vibrato_rate_hz: float
    vibrato_depth: float       # relative f0 excursion
    jitter_depth: float        # per-period random f0 perturbation


@dataclass
class CorpusConfig:
    num_speakers: int = 20
    utts_per_speaker: int = 50
    seed: int = 7
    dur_min_s: float = 2.0
    dur_max_s: float = 8.0
    sample_rate: int = 16000
    noise_db: float = -18.0
    utt_offset: int = 0     # first utterance index; lets held-out sets share recipes

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ValueError("a corpus needs at least two speakers")
        if self.dur_min_s <= 0 or self.dur_max_s < self.dur_min_s:
            raise ValueError("bad duration range")


def sample_recipe(rng: np.random.Generator) -> SpeakerRecipe:
    f0 = float(rng.uniform(85.0, 255.0))
    formants = (
        (float(rng.uniform(300.0, 900.0)), float(rng.uniform(60.0, 120.0)), float(rng.uniform(0.8, 1.2))),
        (float(rng.uniform(900.0, 2500.0)), float(rng.uniform(80.0, 160.0)), float(rng.uniform(0.4, 0.9))),
        (float(rng.uniform(2500.0, 3500.0)), float(rng.uniform(100.0, 200.0)), float(rng.uniform(0.2, 0.6))),
    )
    return SpeakerRecipe(
        f0_hz=f0,
        formants=formants,
        tilt=float(rng.uniform(0.6, 1.1)),
        vibrato_rate_hz=float(rng.uniform(4.0, 7.0)),
        vibrato_depth=float(rng.uniform(0.01, 0.03)),
        jitter_depth=float(rng.uniform(0.002, 0.01)),
    )


def _envelope(recipe: SpeakerRecipe, freqs: np.ndarray) -> np.ndarray:
    env = np.zeros_like(freqs)
    for center, bw, gain in recipe.formants:
        env += gain * np.exp(-0.5 * ((freqs - center) / bw) ** 2)
    return 0.05 + env


def synth_utterance(recipe: SpeakerRecipe, duration_s: float,
                    rng: np.random.Generator, sample_rate: int = 16000,
                    noise_db: float = -18.0) -> np.ndarray:
    """One waveform in [-1, 1]: jittered harmonic stack under the recipe's
    spectral envelope, plus a white-noise floor.

    Per-utterance nuisance variation (spectral tilt, formant shift, slow
    pitch drift, noise) is deliberately strong so that same-speaker trials
    are nontrivial and short excerpts are harder than full utterances.
    """
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    vibrato_phase = rng.uniform(0.0, 2.0 * np.pi)
    vibrato_depth = recipe.vibrato_depth * rng.uniform(0.7, 1.3)
    # slow pitch drift: a random walk sampled at ~2 Hz knots
    knots = max(4, int(2 * duration_s))
    walk = np.cumsum(rng.standard_normal(knots)) * 0.02 / np.sqrt(knots)
    slow = np.interp(t, np.linspace(0.0, duration_s, knots), walk - walk.mean())
    jitter = np.interp(t, np.linspace(0.0, duration_s, 16),
                       rng.standard_normal(16) * recipe.jitter_depth)
    f0 = recipe.f0_hz * (1.0 + vibrato_depth
                         * np.sin(2.0 * np.pi * recipe.vibrato_rate_hz * t + vibrato_phase)
                         + slow + jitter)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    # channel-like nuisance: tilt change and a small formant shift
    tilt = recipe.tilt + rng.uniform(-0.2, 0.2)
    formant_scale = rng.uniform(0.95, 1.05)
    shifted = SpeakerRecipe(recipe.f0_hz,
                            tuple((c * formant_scale, bw, g) for c, bw, g in recipe.formants),
                            tilt, recipe.vibrato_rate_hz, recipe.vibrato_depth,
                            recipe.jitter_depth)

    max_harmonic = int(0.45 * sample_rate / recipe.f0_hz)
    h = np.arange(1, max_harmonic + 1)
    amps = _envelope(shifted, h * recipe.f0_hz) / h ** tilt
    phases = rng.uniform(0.0, 2.0 * np.pi, size=max_harmonic)
    sig = np.zeros(n)
    for i, (a, p) in enumerate(zip(amps, phases), start=1):
        sig += a * np.sin(i * phase + p)

    sig /= max(np.abs(sig).max(), 1e-9)
    noise = rng.standard_normal(n) * 10.0 ** (noise_db / 20.0)
    out = 0.6 * sig + noise
    return np.clip(out, -1.0, 1.0)


def speaker_recipes(cfg: CorpusConfig) -> list:
    return [sample_recipe(np.random.default_rng(np.random.SeedSequence((cfg.seed, spk, 0xA11CE))))
            for spk in range(cfg.num_speakers)]


def synth_corpus_utterance(cfg: CorpusConfig, recipes: list, speaker: int, utt: int) -> np.ndarray:
    """Utterance ``utt`` is a global index including any ``utt_offset``."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, speaker, utt)))
    duration = float(rng.uniform(cfg.dur_min_s, cfg.dur_max_s))
    return synth_utterance(recipes[speaker], duration, rng, cfg.sample_rate, cfg.noise_db)


def generate_corpus(cfg: CorpusConfig, out_dir) -> Path:
    """Write WAVs plus a ``speaker_id<TAB>wav_path`` manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recipes = speaker_recipes(cfg)
    lines = []
    for spk in range(cfg.num_speakers):
        spk_id = f"spk{spk:03d}"
        spk_dir = out_dir / spk_id
        spk_dir.mkdir(exist_ok=True)
        for j in range(cfg.utts_per_speaker):
            utt = cfg.utt_offset + j
            wav = synth_corpus_utterance(cfg, recipes, spk, utt)
            path = spk_dir / f"utt{utt:03d}.wav"
            write_wav_mono(path, wav, cfg.sample_rate)
            lines.append(f"{spk_id}\t{path}")
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list:
    """[(speaker_id, wav_path)] in file order."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'speaker<TAB>path', got {raw!r}")
            entries.append((parts[0], parts[1]))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries

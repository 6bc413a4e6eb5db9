"""Command-line surface for the whole pipeline.

Subcommands: features, gen-corpus, train, embed, score, eval, params.
Every run resolves its configuration from (defaults <- config file <-
SPKMSA_* environment variables <- --set overrides), prints the full
resolved text, and is reproducible from that printout alone.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .aggregation import build_model, extract_embedding, model_parameter_report
from .config import ConfigError, RunConfig
from .corpus import CorpusConfig, generate_corpus, read_manifest
from .evaluation import (EvalError, cosine_score, format_results_table, read_embeddings,
                         read_trial_list, run_trials, write_embeddings, write_results_csv)
from .frontend import AudioError, compute_logmel, read_wav_mono, write_lmfb
from .losses import build_objective
from .tensor import NumericError
from .training import DivergenceError, build_training_set, load_model, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_env_overrides()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    print("# resolved configuration")
    print(cfg.to_text(), end="")
    return cfg


def cmd_features(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(args.manifest)
    for spk, wav_path in entries:
        pcm, rate = read_wav_mono(wav_path)
        feats = compute_logmel(pcm, rate, cfg.frame_shift_ms, cfg.n_fft,
                               cfg.fmin_hz, cfg.log_floor)
        out_path = out_dir / (Path(wav_path).stem + ".lmfb")
        write_lmfb(out_path, feats)
    print(f"wrote {len(entries)} feature files to {out_dir}")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    cfg = _resolve_config(args)
    ccfg = CorpusConfig(num_speakers=cfg.corpus_speakers,
                        utts_per_speaker=cfg.corpus_utts_per_speaker,
                        seed=cfg.corpus_seed,
                        dur_min_s=cfg.corpus_dur_min_s,
                        dur_max_s=cfg.corpus_dur_max_s,
                        sample_rate=cfg.corpus_sample_rate,
                        utt_offset=cfg.corpus_utt_offset)
    manifest = generate_corpus(ccfg, args.out_dir)
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data = build_training_set(args.manifest, cfg)
    if cfg.num_speakers != len(data.speaker_ids):
        cfg = cfg.with_overrides({"num_speakers": len(data.speaker_ids)})
        print(f"# num_speakers adjusted to manifest: {len(data.speaker_ids)}")
    model = build_model(cfg)
    objective = build_objective(cfg, np.random.default_rng(np.random.PCG64((cfg.seed, 1))),
                                cfg.numpy_dtype())
    result = train(model, objective, data, cfg, args.out_dir)
    print(f"final loss {result.final_loss:.4f}; checkpoints in {args.out_dir}")
    return EXIT_OK


def cmd_embed(args) -> int:
    # configuration comes from the checkpoint, not the command line
    model, _objective, cfg = load_model(args.checkpoint)
    entries = read_manifest(args.manifest)
    duration = None if args.duration in (None, "full") else float(args.duration)
    embeddings = {}
    for _spk, wav_path in entries:
        pcm, rate = read_wav_mono(wav_path)
        feats = compute_logmel(pcm, rate, cfg.frame_shift_ms, cfg.n_fft,
                               cfg.fmin_hz, cfg.log_floor)
        emb = extract_embedding(feats, model, duration_s=duration,
                                utterance_id=wav_path)
        embeddings[wav_path] = emb.vector.astype(np.float32)
    write_embeddings(args.out, embeddings)
    print(f"wrote {len(embeddings)} embeddings ({cfg.embedding_dim}-dim) to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    embeddings = read_embeddings(args.embeddings)
    trials = read_trial_list(args.trials)
    lines = []
    for t in trials:
        if t.enroll not in embeddings or t.test not in embeddings:
            raise EvalError(f"missing embedding for trial {t.enroll} / {t.test}")
        s = cosine_score(embeddings[t.enroll], embeddings[t.test])
        lines.append(f"{t.label} {t.enroll} {t.test} {s:.6f}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"scored {len(lines)} trials -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _objective, cfg = load_model(args.checkpoint)
    if args.durations:
        cfg = cfg.with_overrides({"durations": args.durations})
    if args.enroll_duration:
        cfg = cfg.with_overrides({"enroll_duration": args.enroll_duration})
    trials = read_trial_list(args.trials)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    feature_cache = {}

    def embed_fn(utt_path, duration):
        if utt_path not in feature_cache:
            pcm, rate = read_wav_mono(utt_path)
            feature_cache[utt_path] = compute_logmel(pcm, rate, cfg.frame_shift_ms,
                                                     cfg.n_fft, cfg.fmin_hz, cfg.log_floor)
        return extract_embedding(feature_cache[utt_path], model, duration_s=duration).vector

    cache = {}
    results = []
    rejects = []
    enroll = cfg.enroll_duration if cfg.enroll_duration == "full" else float(cfg.enroll_duration)
    for condition in cfg.duration_list():
        run = run_trials(embed_fn, trials, condition, enroll,
                         cfg.p_target, cfg.c_miss, cfg.c_fa, cache=cache)
        results.append(run.result)
        rejects.extend(run.rejects)
    write_results_csv(out_dir / "results.csv", results)
    if rejects:
        (out_dir / "rejects.txt").write_text("\n".join(sorted(set(rejects))) + "\n")
        print(f"{len(set(rejects))} utterances rejected; see rejects.txt")
    print(format_results_table(results, title=f"enroll={cfg.enroll_duration}"))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    report = model_parameter_report(cfg)
    head = build_objective(cfg, np.random.default_rng(0), np.float32)
    from .nn import count_params
    classifier = count_params(head)
    print(f"{'submodule':<12} {'parameters':>12}")
    for name, count in report.items():
        if name == "total":
            continue
        print(f"{name:<12} {count:>12,d}")
    print(f"{'classifier':<12} {classifier:>12,d}")
    print(f"{'total':<12} {report['total'] + classifier:>12,d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spkmsa",
                                     description="multi-scale speaker embedding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")

    p = sub.add_parser("features", help="extract log-Mel features to LMFB files")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("gen-corpus", help="generate the synthetic training corpus")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model from a corpus manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="extract embeddings with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", default="full")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("score", help="cosine-score a trial list from an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="run duration-bucketed trial evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--durations", help="comma list, e.g. 1,2,3,5,full")
    p.add_argument("--enroll-duration", dest="enroll_duration")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("params", help="print per-submodule parameter counts")
    common(p)
    p.set_defaults(fn=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AudioError, EvalError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Flat run configuration: every tunable knob in one key=value namespace.

The canonical text form is one sorted ``key=value`` line per field; it
round-trips losslessly and is embedded verbatim in checkpoints so a model
can always be rebuilt from its own file. Unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

ENV_PREFIX = "SPKMSA_"


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


@dataclass
class RunConfig:
    # model
    aggregation: str = "single"        # single | msfa | msea
    fpm: str = "none"                  # none | b | tc
    pooling: str = "gap"               # gap | stats | sap | lde
    stages: str = "auto"               # backbone stage indices, e.g. "2,3,4"
    embedding_dim: int = 128
    num_speakers: int = 1211
    proj_channels: int = 256           # per-stage 1x1 width for gap/sap/stats heads
    stage_blocks: str = "3,4,6,3"
    stage_channels: str = "32,64,128,256"
    conv1_kernel: int = 7
    pyramid_channels: int = 0          # 0 -> lowest-stage width
    fpm_smooth_bn_relu: bool = True
    tc_kernel: int = 4                 # exact-doubling transposed-conv kernel: 2, 3 or 4
    msfa_top_upsample: str = "auto"    # auto | bilinear | tc
    msfa_downsample_kernel: int = 3
    sap_hidden: int = 0                # 0 -> same as input width
    lde_codewords: int = 64
    lde_channels: int = 64
    msea_fc_relu: bool = False
    dtype: str = "f32"                 # f32 | f64
    # loss
    loss: str = "softmax"              # softmax | asoftmax | asoftmax_ring
    margin: int = 4
    ring_weight: float = 0.01
    margin_lambda_base: float = 1000.0
    margin_lambda_gamma: float = 0.1
    margin_lambda_min: float = 5.0
    # frontend
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    fmin_hz: float = 20.0
    log_floor: float = 1e-10
    mean_norm_window_s: float = 3.0
    vad_threshold_db: float = 40.0
    vad_floor_db: float = -60.0
    # training
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0001
    lr_initial: float = 0.1
    lr_decay_factor: float = 0.1
    lr_milestones: str = "0.5,0.75"
    epochs: int = 30
    seed: int = 1
    crop_frames: int = 300
    workers: int = 1
    finite_checks: bool = True
    # synthetic corpus
    corpus_speakers: int = 20
    corpus_utts_per_speaker: int = 50
    corpus_seed: int = 7
    corpus_dur_min_s: float = 2.0
    corpus_dur_max_s: float = 8.0
    corpus_sample_rate: int = 16000
    corpus_utt_offset: int = 0
    # evaluation
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    durations: str = "1,2,3,5,full"
    enroll_duration: str = "full"

    # -- derived views ---------------------------------------------------------

    def stage_blocks_tuple(self):
        return _int_tuple(self.stage_blocks)

    def stage_channels_tuple(self):
        return _int_tuple(self.stage_channels)

    def resolved_stages(self):
        """Stage set in use; 'auto' follows the aggregation/pooling defaults."""
        if self.stages != "auto":
            return _int_tuple(self.stages)
        if self.aggregation == "single":
            return (4,)
        if self.aggregation == "msfa":
            return (2, 3, 4)
        return (3, 4) if self.pooling == "lde" else (2, 3, 4)

    def resolved_pyramid_channels(self):
        return self.pyramid_channels or self.stage_channels_tuple()[0]

    def resolved_msfa_top_upsample(self):
        if self.msfa_top_upsample != "auto":
            return self.msfa_top_upsample
        return "tc" if self.fpm == "none" else "bilinear"

    def resolved_proj_channels(self):
        return self.lde_channels if self.pooling == "lde" else self.proj_channels

    def duration_list(self):
        out = []
        for item in self.durations.split(","):
            item = item.strip()
            out.append("full" if item == "full" else float(item))
        return out

    def numpy_dtype(self):
        import numpy as np
        return {"f32": np.float32, "f64": np.float64}[self.dtype]

    def validate(self) -> "RunConfig":
        choices = {
            "aggregation": ("single", "msfa", "msea"),
            "fpm": ("none", "b", "tc"),
            "pooling": ("gap", "stats", "sap", "lde"),
            "dtype": ("f32", "f64"),
            "loss": ("softmax", "asoftmax", "asoftmax_ring"),
            "msfa_top_upsample": ("auto", "bilinear", "tc"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.embedding_dim not in (128, 256):
            raise ConfigError(f"embedding_dim must be 128 or 256, got {self.embedding_dim}")
        if self.tc_kernel not in (2, 3, 4):
            raise ConfigError(f"tc_kernel must be 2, 3 or 4, got {self.tc_kernel}")
        if self.margin not in (1, 2, 3, 4):
            raise ConfigError(f"margin must be in 1..4, got {self.margin}")
        stages = self.resolved_stages()
        if any(s not in (1, 2, 3, 4) for s in stages):
            raise ConfigError(f"stages must lie in 1..4, got {stages}")
        if self.aggregation == "msfa" and stages != (2, 3, 4):
            raise ConfigError("msfa aggregates exactly stages 2,3,4")
        if self.aggregation == "single" and stages != (4,):
            raise ConfigError("single-scale mode uses only the top stage")
        if self.aggregation == "msea" and not 1 <= len(stages) <= 4:
            # one stage is the degenerate case, kept for head-equivalence checks
            raise ConfigError("msea aggregates between 1 and 4 stages")
        if len(self.stage_blocks_tuple()) != 4 or len(self.stage_channels_tuple()) != 4:
            raise ConfigError("stage_blocks and stage_channels must list four stages")
        if self.fpm != "none":
            lo = min(stages)
            if any(s not in stages for s in range(lo, 5)):
                raise ConfigError("pyramid stages must be contiguous up to stage 4")
        if self.num_speakers < 2:
            raise ConfigError("need at least two speakers")
        for key in ("batch_size", "epochs", "crop_frames", "corpus_speakers",
                    "corpus_utts_per_speaker"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        return self

    # -- canonical text form -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        typed = {}
        by_name = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(by_name))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in values.items():
            typed[key] = _parse_value(key, value, by_name[key].type)
        return cls(**typed)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def with_overrides(self, pairs: dict) -> "RunConfig":
        by_name = {f.name: f for f in fields(self)}
        unknown = sorted(set(pairs) - set(by_name))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {k: _parse_value(k, v, by_name[k].type) if isinstance(v, str) else v
                   for k, v in pairs.items()}
        return replace(self, **coerced)

    def with_env_overrides(self, environ=None) -> "RunConfig":
        env = os.environ if environ is None else environ
        pairs = {}
        for f in fields(self):
            key = ENV_PREFIX + f.name.upper()
            if key in env:
                pairs[f.name] = env[key]
        return self.with_overrides(pairs) if pairs else self


def _int_tuple(text: str) -> tuple:
    try:
        return tuple(int(x.strip()) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str, typ) -> object:
    typ = {"str": str, "int": int, "float": float, "bool": bool}.get(typ, typ)
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


# -- presets ---------------------------------------------------------------------


def paper_scale_config(**overrides) -> RunConfig:
    """Full-size architecture used for parameter audits and shape suites."""
    return RunConfig().with_overrides(overrides).validate()


def desk_scale_config(**overrides) -> RunConfig:
    """Quarter-width, single-block backbone for CPU-budget end-to-end runs."""
    base = dict(
        stage_blocks="1,1,1,1",
        stage_channels="8,16,32,64",
        proj_channels=64,
        num_speakers=20,
        crop_frames=64,
        epochs=30,
        batch_size=64,
        corpus_dur_min_s=2.0,
        corpus_dur_max_s=5.0,
        aggregation="msea",
        fpm="tc",
        pooling="gap",
    )
    base.update(overrides)
    return RunConfig().with_overrides(base).validate()

"""Configuration dataclasses, TOML loading, and dotted-path overrides.

The default profile is sized for a single desktop CPU core: it finishes
the full three-stage pipeline in minutes, not hours. `paper_profile.toml`
in configs/ documents the reference hyperparameters the architecture was
described with (which assume cluster-scale batches); loading it is
supported but not something a desk run should do.
"""

import dataclasses
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError


@dataclasses.dataclass
class VisionConfig:
    d_und: int = 32
    und_patch: int = 2
    und_depth: int = 2
    und_heads: int = 4
    d_gen: int = 32
    gen_patch: int = 3
    gen_depth: int = 2
    gen_heads: int = 4
    pool_stride: int = 2
    decoder_hidden: int = 256

    @property
    def und_tokens(self) -> int:
        return (24 // self.und_patch) ** 2

    @property
    def gen_grid(self) -> int:
        return 24 // self.gen_patch

    @property
    def gen_tokens(self) -> int:
        side, stride = self.gen_grid, self.pool_stride
        if stride <= 0 or side % stride:
            raise ConfigurationError(f"pool stride {stride} does not divide grid side {side}")
        return (side // stride) ** 2


@dataclasses.dataclass
class LMConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context: int = 512
    mse_weight: float = 1.0


@dataclasses.dataclass
class PretrainConfig:
    batch: int = 32
    lr: float = 1e-3
    gen_steps: int = 1200
    denoise_steps: int = 600
    denoise_sigma: float = 0.1
    und_steps: int = 1000
    eval_n: int = 64
    psnr_target: float = 22.0
    psnr_floor: float = 20.0
    acc_target: float = 0.95
    acc_floor: float = 0.90


@dataclasses.dataclass
class StageConfig:
    name: str
    steps: int
    batch: int = 16
    lr: float = 3e-4
    schedule: str = "constant_warmup"
    warmup_ratio: float = 0.03
    mix: dict = dataclasses.field(default_factory=dict)
    caption_dropout: float = 0.1
    eval_every: int = 0
    ckpt_every: int = 0
    noise_amp: float = 0.05


def default_stages():
    return [
        StageConfig(name="stage1", steps=700, mix={"gen_short": 0.5, "und_long": 0.5}),
        StageConfig(name="stage2", steps=350, mix={"gen_long": 0.5, "und_long": 0.5}),
        StageConfig(name="stage3", steps=350,
                    mix={"und_qa": 0.5, "gen_short": 0.25, "gen_long": 0.25}),
    ]


@dataclasses.dataclass
class EvalConfig:
    fid_n: int = 200
    geneval_per_category: int = 25
    cfg_scale: float = 1.0
    qa_n: int = 200
    max_answer_tokens: int = 8


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    vision: VisionConfig = dataclasses.field(default_factory=VisionConfig)
    lm: LMConfig = dataclasses.field(default_factory=LMConfig)
    pretrain: PretrainConfig = dataclasses.field(default_factory=PretrainConfig)
    stages: list = dataclasses.field(default_factory=default_stages)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)


VALID_SCHEDULES = ("constant_warmup", "cosine_warmup")
VALID_TASKS = {"und_long", "und_qa", "gen_short", "gen_long"}

_SECTIONS = {"vision": VisionConfig, "lm": LMConfig, "pretrain": PretrainConfig,
             "eval": EvalConfig}


def _fill(cls, table: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in fields:
            raise ConfigurationError(f"unknown key {where}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in doc.items():
        if key in _SECTIONS:
            setattr(cfg, key, _fill(_SECTIONS[key], value, key))
        elif key == "stage":
            cfg.stages = [_fill(StageConfig, tbl, f"stage[{i}]") for i, tbl in enumerate(value)]
        elif key in ("seed", "out_dir"):
            setattr(cfg, key, value)
        else:
            raise ConfigurationError(f"unknown config section {key!r}")
    validate(cfg)
    return cfg


def load_toml(path) -> RunConfig:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return config_from_dict(doc)


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply `a.b.c=value` strings; stages are addressed by name."""
    for item in assignments:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        path, _, raw = item.partition("=")
        parts = path.strip().split(".")
        target = cfg
        if parts[0] == "stages" and len(parts) == 3:
            matches = [s for s in cfg.stages if s.name == parts[1]]
            if not matches:
                raise ConfigurationError(f"no stage named {parts[1]!r}")
            target, parts = matches[0], parts[2:]
        else:
            for part in parts[:-1]:
                if not hasattr(target, part):
                    raise ConfigurationError(f"unknown config path {path!r}")
                target = getattr(target, part)
            parts = parts[-1:]
        leaf = parts[0]
        if not hasattr(target, leaf):
            raise ConfigurationError(f"unknown config key {path!r}")
        setattr(target, leaf, _parse_value(raw.strip()))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    cfg.vision.gen_tokens  # raises on bad stride
    if cfg.lm.d_model % cfg.lm.n_heads:
        raise ConfigurationError("lm width must divide among heads")
    names = [s.name for s in cfg.stages]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate stage names {names}")
    for stage in cfg.stages:
        if stage.schedule not in VALID_SCHEDULES:
            raise ConfigurationError(f"unknown schedule {stage.schedule!r}")
        unknown = set(stage.mix) - VALID_TASKS
        if unknown:
            raise ConfigurationError(f"stage {stage.name} has unknown tasks {sorted(unknown)}")
        if abs(sum(stage.mix.values()) - 1.0) > 1e-9:
            raise ConfigurationError(f"stage {stage.name} mix weights must sum to 1")
        if stage.steps <= 0 or stage.batch <= 0:
            raise ConfigurationError(f"stage {stage.name} needs positive steps and batch")


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for key, cls in _SECTIONS.items():
        out[key] = dataclasses.asdict(getattr(cfg, key))
    out["stage"] = [dataclasses.asdict(s) for s in cfg.stages]
    return out

"""Pipeline configuration: one dataclass per stage, flat INI text on disk.

Every run serializes its resolved config next to its checkpoints, so the
sections below are the provenance record of an experiment. Defaults follow
the published training recipe (mask ratio 0.75, patch 16, codebook 512,
adversarial weight 0.01, KL ramp to 6.6e-7, temperature 1.0 -> 0.5 over the
first 5000 updates, 5 wrappers, batch 16, Adam lr 1e-4).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class GlobalConfig:
    image_size: int = 256
    patch_size: int = 16
    structure_kind: str = "normal"  # normal | depth | iuv
    seed: int = 0
    device: str = "cpu"
    num_workers: int = 0
    data_root: str = "data"
    checkpoint_dir: str = "runs"


@dataclass
class BackboneConfig:
    # Frozen feature backbone. Defaults are the desk-scale ViT; set width=768,
    # depth=12 and weights_path to load an externally pretrained base model.
    width: int = 192
    depth: int = 12
    heads: int = 3
    weights_path: str = ""
    pretrain_steps: int = 0  # >0 enables self-distillation before freezing
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-4


@dataclass
class SaliencyConfig:
    base_channels: int = 32  # encoder widths double per block up to 16x
    lr: float = 1e-4
    batch_size: int = 16
    train_steps: int = 2000
    distill_steps: int = 1000
    mlp_hidden: int = 256
    val_fraction: float = 0.1


@dataclass
class TokenizerConfig:
    codebook_size: int = 512
    embed_dim: int = 512
    enc_channels: int = 64
    lr: float = 1e-4
    batch_size: int = 16
    train_steps: int = 8000
    adv_weight: float = 0.01
    kl_weight_max: float = 6.6e-7
    kl_ramp_steps: int = 5000
    tau_start: float = 1.0
    tau_end: float = 0.5
    tau_ramp_steps: int = 5000
    val_fraction: float = 0.1


@dataclass
class SketcherConfig:
    mask_ratio: float = 0.75
    mask_epsilon: float = 1e-5
    decoder_width: int = 192
    decoder_depth: int = 12
    decoder_heads: int = 3
    lr: float = 1e-4
    batch_size: int = 16
    supervised_steps: int = 4000
    finetune_steps: int = 2000
    labeled_unlabeled_ratio: int = 1  # Eq-4 steps per fixed-point step in fine-tuning
    second_pass_gradient: bool = True  # backprop through the outer sketch pass


@dataclass
class DegradeConfig:
    spot_prob: float = 0.5
    line_prob: float = 0.5
    region_prob: float = 0.5
    whole_prob: float = 0.125
    max_spots: int = 6
    max_lines: int = 5
    max_regions: int = 3
    radius_min: int = 3
    radius_max: int = 14
    width_min: int = 2
    width_max: int = 8
    blend_min: float = 0.5
    blend_max: float = 1.0
    grayscale_prob: float = 0.2


@dataclass
class TranslatorConfig:
    num_wrappers: int = 5
    base_channels: int = 32
    style_dim: int = 128
    disc_channels: int = 32
    disc_scales: int = 2
    lr: float = 1e-4
    batch_size: int = 16
    train_steps: int = 5000
    alpha_low: float = 0.4
    alpha_high: float = 0.7
    rgb_skip_accumulate: bool = True
    partner_variants: int = 2
    backbone_weights_path: str = ""  # optional pretrained perceptual backbone


@dataclass
class MetricsConfig:
    extractor: str = "builtin"  # builtin | vit | cnn
    kid_subset_size: int = 1000
    kid_num_subsets: int = 100
    kid_scale_100: bool = False
    vit_weights_path: str = ""
    cnn_weights_path: str = ""


@dataclass
class DataConfig:
    # Per-domain roots, relative to global data_root unless absolute.
    domain_a1: str = "A1"
    domain_a2: str = "A2"
    domain_b: str = "B"
    domain_s: str = "S"
    pairs: str = "pairs"
    unlabeled: str = "unlabeled"
    synth_scenes: int = 600
    synth_structures: int = 2000


_SECTIONS = {
    "global": GlobalConfig,
    "backbone": BackboneConfig,
    "saliency": SaliencyConfig,
    "tokenizer": TokenizerConfig,
    "sketcher": SketcherConfig,
    "degrade": DegradeConfig,
    "translator": TranslatorConfig,
    "metrics": MetricsConfig,
    "data": DataConfig,
}


@dataclass
class PipelineConfig:
    glob: GlobalConfig = field(default_factory=GlobalConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    sketcher: SketcherConfig = field(default_factory=SketcherConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.glob.image_size // self.glob.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def seed(self) -> int:
        env = os.environ.get("HANDRECOV_SEED")
        return int(env) if env else self.glob.seed

    def validate(self) -> None:
        g = self.glob
        if g.image_size <= 0 or g.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if g.image_size % g.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if g.image_size // g.patch_size != 16:
            raise ConfigError(
                "token grid must be 16x16: image_size / patch_size must equal 16"
            )
        if g.structure_kind not in ("normal", "depth", "iuv"):
            raise ConfigError(f"unknown structure_kind {g.structure_kind!r}")
        if not (0.0 < self.sketcher.mask_ratio < 1.0):
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.sketcher.mask_epsilon <= 0:
            raise ConfigError("mask_epsilon must be positive")
        if self.tokenizer.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.tokenizer.tau_start <= 0 or self.tokenizer.tau_end <= 0:
            raise ConfigError("gumbel temperatures must be positive")
        if not (0.0 <= self.translator.alpha_low <= self.translator.alpha_high <= 1.0):
            raise ConfigError("alpha range must satisfy 0 <= low <= high <= 1")
        if not (0.0 <= self.degrade.blend_min <= self.degrade.blend_max <= 1.0):
            raise ConfigError("blend range must satisfy 0 <= min <= max <= 1")
        for name in ("lr",):
            for section in (self.saliency, self.tokenizer, self.sketcher, self.translator):
                if getattr(section, name) <= 0:
                    raise ConfigError(f"{type(section).__name__}.{name} must be positive")
        if self.translator.num_wrappers < 1:
            raise ConfigError("num_wrappers must be >= 1")

    # -- data paths --------------------------------------------------------
    def domain_root(self, tag: str) -> Path:
        key = {
            "A1": self.data.domain_a1, "A2": self.data.domain_a2,
            "B": self.data.domain_b, "S": self.data.domain_s,
            "pairs": self.data.pairs, "unlabeled": self.data.unlabeled,
        }[tag]
        p = Path(key)
        return p if p.is_absolute() else Path(self.glob.data_root) / p


def _coerce(raw: str, typ: type):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    return typ(raw)


def parse_config(text: str) -> PipelineConfig:
    """Parse INI text into a validated PipelineConfig.

    Unknown sections or keys are rejected so that typos never silently fall
    back to defaults.
    """
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    kwargs = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        allowed = {f.name: f.type for f in fields(cls)}
        typed = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in cp.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            ftype = typed[key].type
            if isinstance(ftype, str):  # from __future__ annotations
                ftype = {"int": int, "float": float, "str": str, "bool": bool}[ftype]
            try:
                values[key] = _coerce(raw, ftype)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from e
        attr = "glob" if section == "global" else section
        kwargs[attr] = cls(**values)
    return PipelineConfig(**kwargs)


def serialize_config(cfg: PipelineConfig) -> str:
    """Canonical INI form: fixed section order, declaration-order keys."""
    cp = configparser.ConfigParser()
    for section, cls in _SECTIONS.items():
        attr = "glob" if section == "global" else section
        obj = getattr(cfg, attr)
        cp[section] = {}
        for f in fields(cls):
            v = getattr(obj, f.name)
            cp[section][f.name] = repr(v) if isinstance(v, float) else str(v)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(serialize_config(cfg))


def desk_config(root: str | Path = "desk", seed: int = 0) -> PipelineConfig:
    """Reduced-scale config for CPU workstations and the acceptance suite.

    Keeps the spec-level invariants (16x16 token grid, codebook 512, mask
    ratio 0.75) while shrinking resolution and widths for short runtimes.
    """
    root = Path(root)
    cfg = PipelineConfig(
        glob=GlobalConfig(
            image_size=64, patch_size=4, seed=seed,
            data_root=str(root / "data"), checkpoint_dir=str(root / "runs"),
        ),
        backbone=BackboneConfig(width=96, depth=4, heads=3),
        saliency=SaliencyConfig(
            base_channels=8, batch_size=8, train_steps=700, distill_steps=500,
            mlp_hidden=128,
        ),
        tokenizer=TokenizerConfig(
            embed_dim=64, enc_channels=24, batch_size=8, train_steps=2600,
            kl_ramp_steps=1500, tau_ramp_steps=1500,
        ),
        sketcher=SketcherConfig(
            decoder_width=96, decoder_depth=4, decoder_heads=3, batch_size=8,
            supervised_steps=1500, finetune_steps=600,
        ),
        translator=TranslatorConfig(
            base_channels=12, style_dim=48, disc_channels=12, batch_size=4,
            train_steps=5000,
        ),
        metrics=MetricsConfig(kid_subset_size=100, kid_num_subsets=20),
        data=DataConfig(synth_scenes=360, synth_structures=2200),
    )
    return cfg

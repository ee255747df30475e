"""Model configuration dataclasses and presets.

The full preset mirrors the documented composition: a 24-layer d=1024
vision tower over 14x14 patches of a 224x224 image, a two-layer GELU
projector into d'=2048, and a 16-layer ternary decoder at d'=2048.
Vocab and a few unstated dimensions (heads, FFN width) are config
fields with conventional defaults, not constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

# ordered glob rules: first match wins; decoder linear weights are the
# only ternary tensors, everything else stays dense
DEFAULT_PMAP: list[tuple[str, str]] = [
    ("llm.blocks.*.attn.w?.weight", "ternary"),
    ("llm.blocks.*.ffn.*.weight", "ternary"),
    ("*", "dense"),
]


@dataclass
class VisionConfig:
    layers: int
    d: int
    heads: int
    mlp_hidden: int
    patch: int = 14
    image_size: int = 224

    @property
    def n_patches(self) -> int:
        return (self.image_size * self.image_size) // (self.patch * self.patch)


@dataclass
class ProjectorConfig:
    d_in: int
    hidden: int
    d_out: int


@dataclass
class DecoderConfig:
    layers: int
    d: int
    heads: int
    head_dim: int
    ffn_hidden: int
    vocab: int
    max_context: int = 2048
    rope_base: float = 10000.0


@dataclass
class ModelConfig:
    vision: VisionConfig
    projector: ProjectorConfig
    decoder: DecoderConfig
    pmap: list[tuple[str, str]] = field(default_factory=lambda: list(DEFAULT_PMAP))

    def validate(self) -> "ModelConfig":
        v, p, d = self.vision, self.projector, self.decoder
        if p.d_in != v.d:
            raise ConfigError(f"projector.d_in {p.d_in} != vision.d {v.d}")
        if p.d_out != d.d:
            raise ConfigError(f"projector.d_out {p.d_out} != decoder.d {d.d}")
        if v.image_size % v.patch != 0:
            raise ConfigError(f"image_size {v.image_size} not divisible by patch {v.patch}")
        if v.d % v.heads != 0:
            raise ConfigError(f"vision.d {v.d} not divisible by heads {v.heads}")
        if d.head_dim % 2 != 0:
            raise ConfigError(f"decoder.head_dim {d.head_dim} must be even for rotary")
        if d.vocab < 259:
            raise ConfigError(f"decoder vocab {d.vocab} < 259 cannot carry byte tokens")
        return self

    def to_dict(self) -> dict:
        return {
            "vision": vars(self.vision).copy(),
            "projector": vars(self.projector).copy(),
            "decoder": vars(self.decoder).copy(),
            "pmap": [list(rule) for rule in self.pmap],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        try:
            return ModelConfig(
                vision=VisionConfig(**d["vision"]),
                projector=ProjectorConfig(**d["projector"]),
                decoder=DecoderConfig(**d["decoder"]),
                pmap=[tuple(rule) for rule in d.get("pmap", DEFAULT_PMAP)],
            ).validate()
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad model config: {e}") from e


@dataclass
class GenerationParams:
    max_new_tokens: int = 32
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0
    stop_id: int = 257  # EOS

    def validate(self) -> "GenerationParams":
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not (0.0 < self.top_p <= 1.0):
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        return self


def toy_config(
    vision_layers: int = 2,
    vision_d: int = 16,
    decoder_layers: int = 2,
    decoder_d: int = 32,
    image_size: int = 28,
    vocab: int = 259,
    max_context: int = 256,
) -> ModelConfig:
    """Small config for tests and desk experiments."""
    heads = 2
    return ModelConfig(
        vision=VisionConfig(
            layers=vision_layers,
            d=vision_d,
            heads=heads,
            mlp_hidden=vision_d * 4,
            image_size=image_size,
        ),
        projector=ProjectorConfig(d_in=vision_d, hidden=vision_d * 2, d_out=decoder_d),
        decoder=DecoderConfig(
            layers=decoder_layers,
            d=decoder_d,
            heads=heads,
            head_dim=decoder_d // heads,
            ffn_hidden=decoder_d * 2,
            vocab=vocab,
            max_context=max_context,
        ),
    ).validate()


def full_config(vocab: int = 50304) -> ModelConfig:
    """The documented full-scale composition with synthetic-weight dims."""
    return ModelConfig(
        vision=VisionConfig(layers=24, d=1024, heads=16, mlp_hidden=4096),
        projector=ProjectorConfig(d_in=1024, hidden=2048, d_out=2048),
        decoder=DecoderConfig(
            layers=16,
            d=2048,
            heads=16,
            head_dim=128,
            ffn_hidden=8192,
            vocab=vocab,
            max_context=2048,
        ),
    ).validate()

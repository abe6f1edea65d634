"""SwinECAT assembly: patch embedding, four Swin stages each closed by an
ECA gate, patch merging between stages, final norm, mean pooling, linear head.

Setting ``eca_enabled=False`` gives the plain Swin baseline used for the
ablation; it has the same tensors minus the four ``stages.<i>.eca.kernel``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Mapping

import numpy as np

from .eca import EcaConfig, adaptive_kernel_size, apply_eca
from .errors import ConfigurationError, DimensionError
from .swin import patch_embed, patch_merge, swin_block
from .tensor import Tensor, get_default_dtype, layer_norm, linear, mean

#: Parameter totals (millions) reported for the two models in the ablation table.
PAPER_SWIN_PARAMS_M = 27.53
PAPER_SWINECAT_PARAMS_M = 28.30


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: int = 4
    num_classes: int = 9
    eca_enabled: bool = True
    eca: EcaConfig = field(default_factory=EcaConfig)
    use_relative_bias: bool = True
    drop_rate: float = 0.0
    seed: int = 0

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(image_size=64, embed_dim=24, depths=(1, 1, 2, 1), num_heads=(2, 2, 4, 4), window_size=4)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def violations(self) -> list[str]:
        problems = []
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            problems.append("depths and num_heads must each list four stages")
            return problems
        if min(self.depths) < 1:
            problems.append("every stage needs at least one block")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            problems.append(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
            return problems
        if self.num_classes < 1:
            problems.append("num_classes must be positive")
        if self.window_size < 1:
            problems.append("window_size must be positive")
            return problems
        if self.mlp_ratio < 1:
            problems.append("mlp_ratio must be >= 1")
        if not 0.0 <= self.drop_rate < 1.0:
            problems.append("drop_rate must lie in [0, 1)")
        grid = self.image_size // self.patch_size
        for i, stage in enumerate(self.stages()):
            res = grid // 2 ** i
            if i < 3 and (grid // 2 ** i) % 2:
                problems.append(f"stage {i + 1} grid {res} is odd and cannot be merged")
            if res < 1 or res % stage.window:
                problems.append(f"stage {i + 1} grid {res} is not divisible by window {stage.window}")
            if stage.dim % stage.heads:
                problems.append(f"stage {i + 1} dim {stage.dim} is not divisible by {stage.heads} heads")
        return problems

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))

    def stages(self) -> list["StageLayout"]:
        grid = self.image_size // self.patch_size
        out = []
        for i in range(4):
            res = grid // 2 ** i
            dim = self.embed_dim * 2 ** i
            # grids no larger than one window use a single unshifted window
            window = min(self.window_size, res) if res > 0 else self.window_size
            shift = self.window_size // 2 if res > self.window_size else 0
            k = adaptive_kernel_size(dim, self.eca) if self.eca_enabled else 0
            out.append(StageLayout(i, res, dim, self.depths[i], self.num_heads[i], window, shift, k))
        return out


@dataclass(frozen=True)
class StageLayout:
    index: int
    resolution: int
    dim: int
    depth: int
    heads: int
    window: int
    shift: int
    eca_kernel: int


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered ``(name, shape, init)`` triples describing every parameter."""
    cfg.validate()
    d, p, r = cfg.embed_dim, cfg.patch_size, cfg.mlp_ratio
    specs = [
        ("patch_embed.proj.weight", (3 * p * p, d), "trunc"),
        ("patch_embed.proj.bias", (d,), "zeros"),
        ("patch_embed.norm.weight", (d,), "ones"),
        ("patch_embed.norm.bias", (d,), "zeros"),
    ]
    for st in cfg.stages():
        c = st.dim
        for j in range(st.depth):
            pre = f"stages.{st.index}.blocks.{j}."
            specs += [
                (pre + "norm1.weight", (c,), "ones"),
                (pre + "norm1.bias", (c,), "zeros"),
                (pre + "attn.qkv.weight", (c, 3 * c), "trunc"),
                (pre + "attn.qkv.bias", (3 * c,), "zeros"),
            ]
            if cfg.use_relative_bias:
                specs.append((pre + "attn.relative_position_bias_table", ((2 * st.window - 1) ** 2, st.heads), "zeros"))
            specs += [
                (pre + "attn.proj.weight", (c, c), "trunc"),
                (pre + "attn.proj.bias", (c,), "zeros"),
                (pre + "norm2.weight", (c,), "ones"),
                (pre + "norm2.bias", (c,), "zeros"),
                (pre + "mlp.fc1.weight", (c, r * c), "trunc"),
                (pre + "mlp.fc1.bias", (r * c,), "zeros"),
                (pre + "mlp.fc2.weight", (r * c, c), "trunc"),
                (pre + "mlp.fc2.bias", (c,), "zeros"),
            ]
        if cfg.eca_enabled:
            specs.append((f"stages.{st.index}.eca.kernel", (st.eca_kernel,), "eca"))
        if st.index < 3:
            pre = f"stages.{st.index}.downsample."
            specs += [
                (pre + "norm.weight", (4 * c,), "ones"),
                (pre + "norm.bias", (4 * c,), "zeros"),
                (pre + "reduction.weight", (4 * c, 2 * c), "trunc"),
            ]
    top = cfg.embed_dim * 8
    specs += [
        ("norm.weight", (top,), "ones"),
        ("norm.bias", (top,), "zeros"),
        ("head.weight", (top, cfg.num_classes), "trunc"),
        ("head.bias", (cfg.num_classes,), "zeros"),
    ]
    return specs


class ModelParams(Mapping[str, Tensor]):
    """Named, ordered parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def scope(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.tensors.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.tensors.items()},
        )


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0) -> np.ndarray:
    v = rng.standard_normal(shape)
    bad = np.abs(v) > bound
    while bad.any():
        v[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(v) > bound
    return v * std


def build(config: ModelConfig, dtype=None) -> ModelParams:
    """Seeded initialization of every tensor listed by :func:`param_specs`.

    Each tensor draws from its own generator keyed by ``(seed, crc32(name))``
    so toggling ECA leaves all shared tensors bit-identical.
    """
    dtype = dtype or get_default_dtype()
    tensors = {}
    for name, shape, init in param_specs(config):
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            rng = np.random.default_rng([config.seed, zlib.crc32(name.encode())])
            if init == "trunc":
                arr = _trunc_normal(rng, shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, shape)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return ModelParams(config, tensors)


def forward_features(params: ModelParams, images, mode: str = "eval",
                     rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
    """Run the four stages; returns the pooled feature and each stage's output grid."""
    cfg = params.config
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    images = images if isinstance(images, Tensor) else Tensor(images, dtype=params["head.weight"].dtype)
    want = (3, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise DimensionError(f"expected images of shape [B, {want[0]}, {want[1]}, {want[2]}], got {images.shape}")
    training = mode == "train"

    x = patch_embed(images, params["patch_embed.proj.weight"], params["patch_embed.proj.bias"], cfg.patch_size,
                    params["patch_embed.norm.weight"], params["patch_embed.norm.bias"])
    outputs = []
    for st in cfg.stages():
        for j in range(st.depth):
            shift = st.shift if j % 2 == 1 else 0
            x = swin_block(x, params.scope(f"stages.{st.index}.blocks.{j}."), st.heads, st.window, shift,
                           cfg.drop_rate, training, rng)
        if cfg.eca_enabled:
            x = apply_eca(x, params[f"stages.{st.index}.eca.kernel"])
        outputs.append(x)
        if st.index < 3:
            pre = f"stages.{st.index}.downsample."
            x = patch_merge(x, params[pre + "norm.weight"], params[pre + "norm.bias"], params[pre + "reduction.weight"])
    x = layer_norm(x, params["norm.weight"], params["norm.bias"])
    return mean(x, axis=(1, 2)), outputs


def forward(params: ModelParams, images, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Class logits ``[B, num_classes]`` for ``[B, 3, S, S]`` images."""
    pooled, _ = forward_features(params, images, mode, rng)
    return linear(pooled, params["head.weight"], params["head.bias"])


@dataclass
class ParameterAudit:
    total: int
    by_module: dict[str, int]

    @property
    def millions(self) -> str:
        return f"{self.total / 1e6:.2f}M"


def _module_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "stages":
        return ".".join(parts[:3])
    return parts[0]


def parameter_audit(source) -> ParameterAudit:
    """Parameter totals by module path for a ``ModelParams`` or a ``ModelConfig``.

    A config is audited from shapes alone, without allocating anything.
    """
    if isinstance(source, ModelParams):
        items = [(k, v.shape) for k, v in source.items()]
    else:
        items = [(n, s) for n, s, _ in param_specs(source)]
    by_module: dict[str, int] = {}
    for name, shape in items:
        key = _module_of(name)
        by_module[key] = by_module.get(key, 0) + int(np.prod(shape))
    return ParameterAudit(sum(by_module.values()), by_module)


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]

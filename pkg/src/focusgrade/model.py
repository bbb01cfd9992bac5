"""Tiny vision-transformer encoder with a grade classifier head.

The forward pass exposes, besides the logits, the patch-token feature grid
entering the last encoder block. That grid is what the attribution code
differentiates against: the class-token logit has a nonzero gradient with
respect to those tokens through the final attention layer, whereas the final
block's *output* patch tokens never feed the class token at all.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"FOFCKPT1"


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_grades: int = 3

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by "
                f"patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by {self.heads} heads"
            )

    @property
    def patches_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def patches_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patches_h * self.patches_w

    @property
    def background_class(self) -> int:
        return self.num_grades

    @property
    def num_classes(self) -> int:
        # grade classes plus the reserved background target
        return self.num_grades + 1


@dataclass
class ForwardCache:
    """Intermediate tensors one forward pass produces.

    token_grid: patch tokens entering the final block, [*, Ph, Pw, d]
    pooled:     class-token feature after the final layer norm, [*, d]
    logits:     classifier outputs, [*, num_grades + 1]
    """

    token_grid: Tensor
    pooled: Tensor
    logits: Tensor


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two std."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        n = int(bad.sum())
        if n == 0:
            break
        x[bad] = rng.standard_normal(n)
    return (x * std).astype(np.float32)


class Model:
    """ViT encoder plus linear head over num_grades + 1 classes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        hidden = d * config.mlp_ratio
        patch_dim = config.patch_size * config.patch_size * config.channels
        p: dict[str, Tensor] = {}

        def weight(name, shape):
            p[name] = Tensor(_trunc_normal(rng, shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape, np.float32), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape, np.float32), requires_grad=True)

        weight("cls_token", (1, 1, d))
        weight("pos_embed", (1, config.num_patches + 1, d))
        weight("patch.w", (patch_dim, d))
        zeros("patch.b", (d,))
        for i in range(config.depth):
            pre = f"blocks.{i}."
            ones(pre + "ln1.scale", (d,))
            zeros(pre + "ln1.shift", (d,))
            weight(pre + "attn.wqkv", (d, 3 * d))
            zeros(pre + "attn.bqkv", (3 * d,))
            weight(pre + "attn.wo", (d, d))
            zeros(pre + "attn.bo", (d,))
            ones(pre + "ln2.scale", (d,))
            zeros(pre + "ln2.shift", (d,))
            weight(pre + "mlp.w1", (d, hidden))
            zeros(pre + "mlp.b1", (hidden,))
            weight(pre + "mlp.w2", (hidden, d))
            zeros(pre + "mlp.b2", (d,))
        ones("ln_f.scale", (d,))
        zeros("ln_f.shift", (d,))
        weight("head.w", (d, config.num_classes))
        zeros("head.b", (config.num_classes,))
        return cls(config, p)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    # -- forward pieces -----------------------------------------------------

    def patch_embed(self, images: Tensor) -> Tensor:
        """Patchify, project, prepend the class token, add positions.

        images: [B, H, W, C] in training layout; returns [B, P + 1, d].
        """
        cfg = self.config
        b, h, w, c = images.shape
        if (h, w, c) != (cfg.image_h, cfg.image_w, cfg.channels):
            raise ValueError(
                f"input {images.shape[1:]} does not match configured "
                f"{(cfg.image_h, cfg.image_w, cfg.channels)}"
            )
        ph, pw, ps = cfg.patches_h, cfg.patches_w, cfg.patch_size
        x = ad.reshape(images, (b, ph, ps, pw, ps, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b * ph * pw, ps * ps * c))
        x = ad.linear(x, self.params["patch.w"], self.params["patch.b"])
        tokens = ad.reshape(x, (b, ph * pw, cfg.embed_dim))
        cls = Tensor(np.zeros((b, 1, cfg.embed_dim), images.dtype)) + self.params["cls_token"]
        seq = ad.concat([cls, tokens], axis=1)
        return seq + self.params["pos_embed"]

    def _block(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"blocks.{i}."
        b, n, d = x.shape
        heads = cfg.heads

        h = ad.layer_norm(x, p[pre + "ln1.scale"], p[pre + "ln1.shift"])
        qkv = ad.linear(ad.reshape(h, (b * n, d)), p[pre + "attn.wqkv"], p[pre + "attn.bqkv"])
        o = ad.multihead_attention(qkv, b, n, heads)
        o = ad.linear(o, p[pre + "attn.wo"], p[pre + "attn.bo"])
        x = x + ad.reshape(o, (b, n, d))

        m = ad.layer_norm(x, p[pre + "ln2.scale"], p[pre + "ln2.shift"])
        m = ad.linear(ad.reshape(m, (b * n, d)), p[pre + "mlp.w1"], p[pre + "mlp.b1"])
        m = ad.gelu(m)
        m = ad.linear(m, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        return x + ad.reshape(m, (b, n, d))

    def forward(self, images, attribution: bool = False) -> ForwardCache:
        """Run the encoder; accepts one [H, W, C] image or a [B, ...] batch.

        With attribution=True everything below the final block runs
        unrecorded and the cached token grid becomes a fresh gradient leaf:
        backward from a logit then yields exactly the grid gradient the
        contribution map needs, at a fraction of a full backward's cost.
        """
        cfg = self.config
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, np.float32))
        single = images.ndim == 3
        if single:
            images = ad.reshape(images, (1,) + images.shape)

        def early(images):
            x = self.patch_embed(images)
            for i in range(cfg.depth - 1):
                x = self._block(x, i)
            return x

        if attribution:
            with ad.no_grad():
                x = early(images)
        else:
            x = early(images)

        # Cache the patch tokens entering the final block, then rejoin the
        # sequence *through* the cached tensor so the class logit's gradient
        # reaches it on the tape.
        b = images.shape[0]
        ph, pw, d = cfg.patches_h, cfg.patches_w, cfg.embed_dim
        cls_row = ad.slice_(x, (slice(None), slice(0, 1)))
        tokens = ad.slice_(x, (slice(None), slice(1, None)))
        grid_shape = (ph, pw, d) if single else (b, ph, pw, d)
        token_grid = ad.reshape(tokens, grid_shape)
        if attribution:
            token_grid = Tensor(token_grid.data, requires_grad=True)
        x = ad.concat([cls_row, ad.reshape(token_grid, (b, ph * pw, d))], axis=1)
        if cfg.depth > 0:
            x = self._block(x, cfg.depth - 1)

        x = ad.layer_norm(x, self.params["ln_f.scale"], self.params["ln_f.shift"])
        pooled = ad.slice_(x, (slice(None), 0))
        logits = ad.linear(pooled, self.params["head.w"], self.params["head.b"])

        if single:
            pooled = ad.slice_(pooled, 0)
            logits = ad.slice_(logits, 0)
        return ForwardCache(token_grid=token_grid, pooled=pooled, logits=logits)

    def __call__(self, images) -> ForwardCache:
        return self.forward(images)


# ---------------------------------------------------------------------------
# checkpoint format: magic, length-prefixed JSON config, then named tensors as
# (u32 name length, name, u32 rank, u32 dims..., little-endian float32 data)


def save_checkpoint(path, config: dict, tensors: Mapping[str, np.ndarray]) -> None:
    blob = json.dumps(config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (clen,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(clen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
    return config, tensors


def model_to_tensors(model: Model, prefix: str = "model.") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in model.params.items()}


def model_from_tensors(
    config: ModelConfig, tensors: Mapping[str, np.ndarray], prefix: str = "model."
) -> Model:
    reference = Model.init(config, seed=0)
    params: dict[str, Tensor] = {}
    for name in reference.params:
        key = prefix + name
        if key not in tensors:
            raise ValueError(f"checkpoint missing parameter {key}")
        expect = reference.params[name].data.shape
        arr = np.asarray(tensors[key], np.float32)
        if arr.shape != expect:
            raise ValueError(f"{key}: shape {arr.shape} != expected {expect}")
        params[name] = Tensor(arr, requires_grad=True)
    return Model(config, params)


def config_to_json(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_json(data: dict) -> ModelConfig:
    return ModelConfig(**data)

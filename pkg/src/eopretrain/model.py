"""Learnable components: patch encoder, EMA target copy, latent predictor,
per-modality decoders, caption encoder and the two projection heads.

Batched inputs are (B, N, P) patch arrays with (B, N) integer grid positions.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .captions import PAD as PAD_ID, VOCAB
from .tiles import MODALITIES, ConfigurationError, ModalitySpec


class ContractError(ValueError):
    pass


class EmptyCaptionError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    in_channels: int = 12
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    pred_dim: int = 64
    pred_depth: int = 2
    dec_dim: int = 64
    text_width: int = 128
    text_depth: int = 6
    text_heads: int = 4
    text_max_len: int = 24
    text_dim: int = 512
    proj_dim: int = 128
    vocab_size: int = len(VOCAB)
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        for name in ("dim", "pred_dim", "dec_dim", "text_width"):
            heads = self.text_heads if name == "text_width" else self.heads
            if getattr(self, name) % heads:
                raise ConfigurationError(f"{name}={getattr(self, name)} not divisible by head count {heads}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return g, g

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# building blocks


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")
            elif isinstance(val, dict):
                for k, m in val.items():
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{k}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = ag.parameter(_trunc_normal(rng, (d_in, d_out), std))
        self.bias = ag.parameter(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ag.parameter(np.ones(d))
        self.beta = ag.parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        hd = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
        if key_bias is not None:
            att = att + key_bias
        out = ag.softmax(att, axis=-1) @ v
        return self.proj(out.transpose(0, 2, 1, 3).reshape(b, n, d))


class Block(Module):
    """Pre-norm residual block: attention token mixing, then a channel MLP."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), d, rng)

    def __call__(self, x: Tensor, key_bias=None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_bias)
        return x + self.mlp(self.norm2(x))

    def zero_(self) -> None:
        for p in self.parameters().values():
            p.data[...] = 0.0


def sincos_2d(grid: tuple[int, int], d: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table (rows use the first half of the channels,
    columns the second), used to initialise the learned per-cell embeddings."""
    if d % 4:
        raise ConfigurationError(f"sin-cos table needs a width divisible by 4, got {d}")
    gh, gw = grid
    freqs = 1.0 / 10000 ** (np.arange(d // 4) / (d // 4))
    r, c = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    parts = []
    for coord in (r.reshape(-1), c.reshape(-1)):
        ang = coord[:, None] * freqs[None]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def _check_positions(pos: np.ndarray, n: int) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise IndexError(f"patch position out of grid of {n} cells")
    return pos


# ---------------------------------------------------------------------------
# vision side


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.n_cells = cfg.n_patches
        self.embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.pos = ag.parameter(sincos_2d(cfg.grid, cfg.dim))
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def __call__(self, patches, positions) -> Tensor:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim != 3 or patches.shape[1] == 0:
            raise ContractError(f"expected a non-empty (B, N, P) patch batch, got {patches.shape}")
        positions = _check_positions(positions, self.n_cells)
        x = self.embed(Tensor(patches)) + ag.getitem(self.pos, positions)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Predictor(Module):
    """Context latents plus one positional query per target cell -> predicted target latents."""

    def __init__(self, cfg: ModelConfig, rng):
        self.n_cells = cfg.n_patches
        self.in_proj = Linear(cfg.dim, cfg.pred_dim, rng)
        self.pos = ag.parameter(sincos_2d(cfg.grid, cfg.pred_dim))
        self.query = ag.parameter(np.zeros(cfg.pred_dim))
        self.blocks = [Block(cfg.pred_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.pred_depth)]
        self.norm = LayerNorm(cfg.pred_dim)
        self.out_proj = Linear(cfg.pred_dim, cfg.dim, rng)

    def __call__(self, z_ctx: Tensor, ctx_pos, tgt_pos) -> Tensor:
        ctx_pos = _check_positions(ctx_pos, self.n_cells)
        tgt_pos = _check_positions(tgt_pos, self.n_cells)
        for c, t in zip(ctx_pos, tgt_pos):
            if np.intersect1d(c, t).size:
                raise ContractError("target positions overlap the context positions")
        n_ctx = ctx_pos.shape[1]
        c = self.in_proj(z_ctx) + ag.getitem(self.pos, ctx_pos)
        q = ag.getitem(self.pos, tgt_pos) + self.query
        x = ag.concat([c, q], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return self.out_proj(self.norm(x[:, n_ctx:]))


class Decoder(Module):
    """Visible latents are placed on the full grid, hidden cells get a learned
    mask token, one attention block mixes them, and a per-patch MLP reads out
    pixel values (continuous) or class logits (categorical)."""

    def __init__(self, spec: ModalitySpec, cfg: ModelConfig, rng):
        self.spec = spec
        self.n_cells = cfg.n_patches
        self.patch = cfg.patch
        dd = cfg.dec_dim
        self.out_dim = spec.channels if spec.categorical else spec.channels * cfg.patch ** 2
        self.in_proj = Linear(cfg.dim, dd, rng)
        self.mask_token = ag.parameter(np.zeros(dd))
        self.pos = ag.parameter(sincos_2d(cfg.grid, dd))
        self.block = Block(dd, cfg.heads, cfg.mlp_ratio, rng)
        self.norm = LayerNorm(dd)
        self.head = MLP(dd, int(dd * cfg.mlp_ratio), self.out_dim, rng)

    def __call__(self, z: Tensor, visible) -> Tensor:
        visible = _check_positions(visible, self.n_cells)
        b, nv = visible.shape
        n = self.n_cells
        seq = self.in_proj(z)
        if nv < n:
            fill = Tensor(np.ones((b, n - nv, 1))) * self.mask_token
            seq = ag.concat([seq, fill], axis=1)
        # order[b] lists grid cells in sequence order; invert it to read back in grid order
        order = np.concatenate([visible, _complement(visible, n)], axis=1)
        inv = np.argsort(order, axis=1)
        x = ag.getitem(seq, (np.arange(b)[:, None], inv), unique=True) + self.pos
        x = self.block(x)
        return self.head(self.norm(x))


def _complement(visible: np.ndarray, n: int) -> np.ndarray:
    keep = np.ones((visible.shape[0], n), dtype=bool)
    keep[np.arange(visible.shape[0])[:, None], visible] = False
    return np.nonzero(keep)[1].reshape(visible.shape[0], -1)


def masked_positions(visible, n: int) -> np.ndarray:
    """Per-row grid cells absent from ``visible`` (the reconstruction set), sorted."""
    return _complement(np.atleast_2d(np.asarray(visible, dtype=np.int64)), n)


# ---------------------------------------------------------------------------
# text side


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        w = cfg.text_width
        self.max_len = cfg.text_max_len
        self.vocab_size = cfg.vocab_size
        self.tok = ag.parameter(_trunc_normal(rng, (cfg.vocab_size, w)))
        self.pos = ag.parameter(_trunc_normal(rng, (cfg.text_max_len, w)))
        self.blocks = [Block(w, cfg.text_heads, cfg.mlp_ratio, rng) for _ in range(cfg.text_depth)]
        self.norm = LayerNorm(w)
        self.out = Linear(w, cfg.text_dim, rng)

    def __call__(self, ids) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] > self.max_len:
            raise ContractError(f"caption length {ids.shape[1]} exceeds {self.max_len}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexError(f"token id out of vocabulary of {self.vocab_size}")
        keep = ids != PAD_ID
        if not keep.any(axis=1).all():
            raise EmptyCaptionError("caption consists of padding only")
        length = ids.shape[1]
        x = ag.getitem(self.tok, ids) + self.pos[:length]
        key_bias = np.where(keep, 0.0, -1e30)[:, None, None, :]
        for blk in self.blocks:
            x = blk(x, key_bias)
        x = self.norm(x)
        w = keep[:, :, None].astype(np.float64)
        pooled = (x * w).sum(axis=1) * (1.0 / w.sum(axis=1))
        return self.out(pooled)


# ---------------------------------------------------------------------------
# full model


class JointModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, modalities=MODALITIES):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.init_seed)
        self.modalities = {m.name: m for m in modalities}
        self.encoder = Encoder(self.cfg, rng)
        self.predictor = Predictor(self.cfg, rng)
        self.decoders = {m.name: Decoder(m, self.cfg, rng) for m in modalities}
        self.text = TextEncoder(self.cfg, rng)
        self.proj_v = MLP(self.cfg.dim, self.cfg.dim, self.cfg.proj_dim, rng)
        self.proj_t = MLP(self.cfg.text_dim, self.cfg.text_dim, self.cfg.proj_dim, rng)
        # EMA copy: holds plain arrays, never registered as trainable
        self.target_encoder = Encoder(self.cfg, np.random.default_rng(0))
        for p in self.target_encoder.parameters().values():
            p.requires_grad = False
        copy_into(self.target_encoder, self.encoder)

    def named_parameters(self, prefix: str = ""):
        for name in ("encoder", "predictor", "decoders", "text", "proj_v", "proj_t"):
            val = getattr(self, name)
            if isinstance(val, dict):
                for k, m in val.items():
                    yield from m.named_parameters(f"{prefix}{name}.{k}.")
            else:
                yield from val.named_parameters(f"{prefix}{name}.")

    def target_parameters(self) -> dict[str, Tensor]:
        return dict(_all_tensors(self.target_encoder, "target_encoder."))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.parameters().items()}
        out.update({k: p.data for k, p in self.target_parameters().items()})
        return out

    def n_parameters(self, include_target: bool = True) -> int:
        n = sum(p.size for p in self.parameters().values())
        if include_target:
            n += sum(p.size for p in self.target_parameters().values())
        return n

    # -- operations --------------------------------------------------------
    def encode_visible(self, patches, positions) -> Tensor:
        return self.encoder(patches, positions)

    def encode_target(self, patches, positions) -> Tensor:
        with ag.no_grad():
            return self.target_encoder(patches, positions)

    def decode(self, z: Tensor, visible, modality: str) -> Tensor:
        """Per-patch decoder output over the whole grid, shape (B, N, out_dim)."""
        if modality not in self.decoders:
            raise ConfigurationError(f"unknown modality {modality!r}")
        return self.decoders[modality](z, visible)

    def decode_modality(self, z: Tensor, visible, modality: str) -> np.ndarray:
        """Decoded raster (B, C, H, W) for continuous modalities, or class
        logits (B, K, gh, gw) per patch for categorical ones."""
        out = self.decode(z, visible, modality).data
        spec = self.modalities[modality]
        gh, gw = self.cfg.grid
        p = self.cfg.patch
        b = out.shape[0]
        if spec.categorical:
            return out.reshape(b, gh, gw, spec.channels).transpose(0, 3, 1, 2)
        return (out.reshape(b, gh, gw, spec.channels, p, p)
                   .transpose(0, 3, 1, 4, 2, 5)
                   .reshape(b, spec.channels, gh * p, gw * p))

    def jepa_predict(self, z_ctx: Tensor, ctx_pos, tgt_pos) -> Tensor:
        return self.predictor(z_ctx, ctx_pos, tgt_pos)

    def encode_caption(self, ids) -> Tensor:
        return self.text(ids)

    def pool_and_project(self, z_ctx: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
        if z_ctx.shape[1] == 0:
            raise ContractError("cannot pool an empty context")
        v = z_ctx.mean(axis=1)
        return ag.l2_normalize(self.proj_v(v)), ag.l2_normalize(self.proj_t(t))

    def ema_update(self, momentum: float) -> None:
        ema_update(self.encoder.parameters(), self.target_encoder_arrays(), momentum)

    def target_encoder_arrays(self) -> dict[str, Tensor]:
        return dict(_all_tensors(self.target_encoder, ""))


def _all_tensors(module: Module, prefix: str):
    """Every tensor attribute regardless of requires_grad (for the EMA copy)."""
    for name, val in vars(module).items():
        if isinstance(val, Tensor):
            yield prefix + name, val
        elif isinstance(val, Module):
            yield from _all_tensors(val, f"{prefix}{name}.")
        elif isinstance(val, (list, tuple)):
            for i, m in enumerate(val):
                if isinstance(m, Module):
                    yield from _all_tensors(m, f"{prefix}{name}.{i}.")


def copy_into(dst: Module, src: Module) -> None:
    d = dict(_all_tensors(dst, ""))
    for k, p in _all_tensors(src, ""):
        d[k].data = p.data.copy()


def ema_update(online: dict[str, Tensor], target: dict[str, Tensor], momentum: float) -> None:
    """target <- momentum*target + (1-momentum)*online in place, outside any graph."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"EMA momentum must lie in [0, 1], got {momentum}")
    if set(online) != set(target):
        raise ContractError("EMA parameter sets differ")
    for k, p in online.items():
        q = target[k]
        if p.shape != q.shape:
            raise ContractError(f"EMA shape mismatch at {k}: {p.shape} vs {q.shape}")
        q.data = momentum * q.data + (1.0 - momentum) * p.data
        q.grad = None


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic "EOCKPT\x00\x01" | u16 version | u32 header_len | header (UTF-8 JSON:
#   model config, extra metadata, step, blob table) | float64 LE blobs in table
#   order | sha256 over everything before it

CKPT_MAGIC = b"EOCKPT\x00\x01"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    meta: dict

    def build_model(self) -> JointModel:
        model = JointModel(self.config)
        load_into(model, self.params)
        return model


def load_into(model: JointModel, arrays: dict[str, np.ndarray]) -> None:
    own = dict(model.parameters())
    own.update(model.target_parameters())
    missing = set(own) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, p in own.items():
        if arrays[k].shape != p.shape:
            raise CheckpointError(f"shape mismatch at {k}: {arrays[k].shape} vs {p.shape}")
        p.data = np.array(arrays[k], dtype=np.float64)


def checkpoint_bytes(model: JointModel, optimizer: dict[str, np.ndarray] | None = None,
                     step: int = 0, meta: dict | None = None) -> bytes:
    table, blobs = [], []
    groups = (("param", model.state_arrays()), ("opt", optimizer or {}))
    for group, arrays in groups:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table.append({"group": group, "name": name, "shape": list(np.shape(arr))})
            blobs.append(raw)
    header = {"config": model.cfg.to_dict(), "step": int(step), "meta": meta or {}, "blobs": table}
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join([CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(hdr)), hdr, *blobs])
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model: JointModel, optimizer=None, step: int = 0, meta=None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(model, optimizer, step, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < len(CKPT_MAGIC) + 6 + 32:
        raise CheckpointError(f"{path}: truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(CKPT_MAGIC)
    version, hdr_len = struct.unpack_from("<HI", body, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 6
    header = json.loads(body[off:off + hdr_len].decode("utf-8"))
    off += hdr_len
    params, opt = {}, {}
    for entry in header["blobs"]:
        n = int(np.prod(entry["shape"], dtype=np.int64)) * 8
        arr = np.frombuffer(body[off:off + n], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        (params if entry["group"] == "param" else opt)[entry["name"]] = arr
        off += n
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, opt, header["step"], header["meta"])

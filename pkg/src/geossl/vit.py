"""Shared ViT encoder, lightweight decoder, and the checkpoint archive."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patches import positional_embedding


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 192
    patch_h: int = 8
    patch_w: int = 8
    enc_width: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    dec_width: int = 32
    dec_layers: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    use_global_token: bool = True
    dino_hidden: int = 128
    dino_bottleneck: int = 64
    n_prototypes: int = 256

    def __post_init__(self):
        if self.image_h % self.patch_h or self.image_w % self.patch_w:
            raise ValueError("image size must be divisible by patch size")
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise ValueError("widths must be divisible by head counts")
        if self.dec_width > self.enc_width:
            raise ValueError("dec_width must not exceed enc_width")
        if self.enc_width % 4 or self.dec_width % 4:
            raise ValueError("widths must be divisible by 4 for 2-D sinusoidal embeddings")
        if self.n_prototypes < 2:
            raise ValueError("n_prototypes must be >= 2")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_h

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_w

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": ModelConfig(),
    "tiny": ModelConfig(image_h=16, image_w=32, patch_h=4, patch_w=4, enc_width=16, enc_layers=2,
                        enc_heads=4, dec_width=16, dec_layers=1, dec_heads=4, dino_hidden=32,
                        dino_bottleneck=16, n_prototypes=32),
    "paper": ModelConfig(image_h=480, image_w=1440, patch_h=30, patch_w=30, enc_width=912, enc_layers=24,
                         enc_heads=16, dec_width=512, dec_layers=8, dec_heads=16, dino_hidden=2048,
                         dino_bottleneck=256, n_prototypes=4096),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[name].to_dict()
    d.update(overrides)
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# building blocks


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_bias=None):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) * self.scale
        if key_bias is not None:
            att = att + key_bias[:, None, None, :]
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, key_bias=None):
        x = x + self.attn(self.norm1(x), key_bias)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def _key_bias(valid: torch.Tensor, dtype) -> torch.Tensor:
    bias = torch.zeros(valid.shape, dtype=dtype, device=valid.device)
    return bias.masked_fill(~valid, float("-inf"))


def visible_indices(hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Ascending visible patch positions per sample, right-padded, plus a validity mask."""
    hidden = torch.as_tensor(hidden, dtype=torch.bool)
    if hidden.ndim == 1:
        hidden = hidden[None]
    counts = (~hidden).sum(dim=1)
    if int(counts.min()) == 0:
        raise ValueError("every sample needs at least one visible patch")
    order = torch.sort(hidden.to(torch.int8), dim=1, stable=True).indices
    v = int(counts.max())
    idx = order[:, :v]
    valid = torch.arange(v)[None, :] < counts[:, None]
    return idx, valid


@dataclass
class TokenSet:
    tokens: torch.Tensor          # (B, V, enc_width), padded rows are garbage
    visible_index: torch.Tensor   # (B, V)
    valid: torch.Tensor           # (B, V)
    global_token: torch.Tensor | None  # (B, enc_width)

    @property
    def n_visible(self) -> torch.Tensor:
        return self.valid.sum(dim=1)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.enc_width)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(positional_embedding(cfg.grid_h, cfg.grid_w, cfg.enc_width)).float(),
            persistent=False,
        )
        self.global_token = nn.Parameter(torch.zeros(1, 1, cfg.enc_width)) if cfg.use_global_token else None
        self.blocks = nn.ModuleList(Block(cfg.enc_width, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(cfg.enc_width)

    def forward(self, x: torch.Tensor, hidden: torch.Tensor) -> TokenSet:
        """``x``: (B, N, patch_dim) pixels; ``hidden``: (B, N) booleans."""
        idx, valid = visible_indices(hidden)
        idx = idx.to(x.device)
        valid = valid.to(x.device)
        vis = torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))
        tok = self.patch_embed(vis) + self.pos_embed.to(x.dtype)[idx]
        b = x.shape[0]
        if self.global_token is not None:
            tok = torch.cat([self.global_token.expand(b, -1, -1), tok], dim=1)
            kvalid = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=x.device), valid], dim=1)
        else:
            kvalid = valid
        bias = None if bool(kvalid.all()) else _key_bias(kvalid, tok.dtype)
        for blk in self.blocks:
            tok = blk(tok, bias)
        tok = self.norm(tok)
        if self.global_token is not None:
            return TokenSet(tok[:, 1:], idx, valid, tok[:, 0])
        w = valid.to(tok.dtype)[..., None]
        pooled = (tok * w).sum(1) / w.sum(1)
        return TokenSet(tok, idx, valid, pooled)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, out_dim: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.enc_width, cfg.dec_width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dec_width))
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(positional_embedding(cfg.grid_h, cfg.grid_w, cfg.dec_width)).float(),
            persistent=False,
        )
        self.blocks = nn.ModuleList(Block(cfg.dec_width, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_layers))
        self.norm = nn.LayerNorm(cfg.dec_width)
        self.head = nn.Linear(cfg.dec_width, out_dim or cfg.patch_dim)

    def features(self, ts: TokenSet) -> torch.Tensor:
        b, v, _ = ts.tokens.shape
        n = self.cfg.n_patches
        proj = self.embed(ts.tokens)
        full = self.mask_token.to(proj.dtype).expand(b, n, -1).reshape(b * n, -1)
        rows = (torch.arange(b, device=proj.device)[:, None] * n + ts.visible_index)[ts.valid]
        full = full.index_put((rows,), proj[ts.valid]).reshape(b, n, -1)
        x = full + self.pos_embed.to(proj.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, ts: TokenSet) -> torch.Tensor:
        return self.head(self.features(ts))


class MaskedViT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x, hidden):
        ts = self.encoder(x, hidden)
        return self.decoder(ts), ts


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit norm gains.

    Parameters are initialized in ``named_parameters`` order from a single
    seeded generator, so the result depends only on the architecture and seed.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                nn.init.trunc_normal_(p, mean=0.0, std=0.02, a=-0.04, b=0.04, generator=gen)
    return module


def init_params(cfg: ModelConfig, seed: int = 0) -> MaskedViT:
    return init_weights(MaskedViT(cfg), seed)


def to_batch(x) -> torch.Tensor:
    """Accept a PatchGrid, an ndarray or a tensor; return a float (B, N, D) tensor."""
    data = getattr(x, "data", x)
    t = torch.as_tensor(np.asarray(data) if not isinstance(data, torch.Tensor) else data)
    if t.ndim == 2:
        t = t[None]
    return t if t.is_floating_point() else t.float()


def encode(patches, mask, model: MaskedViT) -> TokenSet:
    x = to_batch(patches).to(next(model.parameters()).dtype)
    hidden = torch.as_tensor(np.asarray(getattr(mask, "hidden", mask)), dtype=torch.bool)
    if hidden.ndim == 1:
        hidden = hidden[None].expand(x.shape[0], -1)
    if hidden.shape[-1] != x.shape[1]:
        raise ValueError("mask does not match the patch grid")
    return model.encoder(x, hidden)


def decode(tokens: TokenSet, model: MaskedViT) -> torch.Tensor:
    return model.decoder(tokens)


# ---------------------------------------------------------------------------
# checkpoint archive

CKPT_MAGIC = b"GSSLCKPT"
CKPT_VERSION = 1
_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4",
    torch.bool: "|b1", torch.float16: "<f2", torch.uint8: "|u1",
}


def save_checkpoint(path: str | Path, tensors: dict, header: dict | None = None) -> Path:
    """Write ``{name: tensor}`` plus a JSON header.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
    with ``version`` and per-tensor ``{name, dtype, shape, offset, nbytes}``
    (offsets relative to the payload start), then the raw little-endian payloads.
    Loading never executes code.
    """
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu() if isinstance(t, torch.Tensor) else torch.as_tensor(np.asarray(t))
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        code = _DTYPES[arr.dtype]
        raw = np.ascontiguousarray(arr.numpy()).astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header or {})
    head["format"] = "geossl-checkpoint"
    head["version"] = CKPT_VERSION
    head["tensors"] = entries
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.uint64(len(hb)).astype("<u8").tobytes())
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    n = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=base + e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return header, tensors


def prefixed(state: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in state.items()}


def unprefixed(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_model(path: str | Path, namespace: str = "student/") -> tuple[MaskedViT, dict]:
    """Rebuild the student encoder/decoder stored in a checkpoint."""
    header, tensors = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"]["model"])
    model = MaskedViT(cfg)
    state = unprefixed(tensors, namespace)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensors {missing[:5]}... for this config")
    model.eval()
    return model, header

"""Volumetric ViT, anatomy query pooling, byte-level text encoder, checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from fvlm import autodiff as ad
from fvlm import nn
from fvlm.atlas import PatchPartition
from fvlm.autodiff import Tensor
from fvlm.reports import default_sentence

PAD, CLS = 256, 257
VOCAB = 258


@dataclass(frozen=True)
class ModelConfig:
    volume: tuple[int, int, int] = (32, 64, 64)
    patch: tuple[int, int, int] = (8, 8, 8)
    width: int = 64
    embed_dim: int = 32
    vision_layers: int = 2
    text_layers: int = 2
    max_text_len: int = 128
    n_anatomies: int = 4
    tau_init: float = 1.0 / 14.3
    tau_min: float = 0.01
    kind: str = "fvlm"  # or "global_clip"

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def full_partition(self) -> PatchPartition:
        return PatchPartition(self.volume, self.patch)


# --- vision ----------------------------------------------------------------------


INPUT_MEAN, INPUT_STD = 0.5, 0.125  # applied to windowed [0, 1] intensities


class VisionEncoder(nn.Module):
    """Patch embedding + learned absolute positions + pre-norm transformer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        part = cfg.full_partition
        patch_voxels = int(np.prod(cfg.patch))
        self.patch_embed = nn.Linear(patch_voxels, cfg.width, rng)
        self.pos = nn.param(rng.normal(scale=0.02, size=(part.n_tokens, cfg.width)))
        self.blocks = [nn.Block(cfg.width, rng) for _ in range(cfg.vision_layers)]
        self.norm = nn.LayerNorm(cfg.width)
        self._cfg = cfg

    def __call__(self, patches: np.ndarray, pos_index: np.ndarray) -> Tensor:
        """``patches``: [B, t, voxels]; ``pos_index``: [B, t] indices into the full grid."""
        # centring matters: LayerNorm erases the amplitude of a flat patch, so
        # flat tissue only stays distinguishable by sign and pattern around 0.5
        x = self.patch_embed(Tensor((patches - INPUT_MEAN) / INPUT_STD)) + self.pos[pos_index]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def crop_position_index(cfg: ModelConfig, origin: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """Full-grid token index of every token of an aligned crop, row-major."""
    full = cfg.full_partition
    for o, p in zip(origin, cfg.patch):
        if o % p:
            raise ValueError(f"crop origin {tuple(origin)} is not aligned to patch {cfg.patch}")
    crop = PatchPartition(tuple(size), cfg.patch)
    d0, h0, w0 = (o // p for o, p in zip(origin, cfg.patch))
    z, y, x = np.meshgrid(*(np.arange(n) for n in crop.grid), indexing="ij")
    _, H, W = full.grid
    return (((z + d0) * H + (y + h0)) * W + (x + w0)).reshape(-1)


def encode_volumes(
    enc: VisionEncoder, volumes: Sequence[np.ndarray], origins: Sequence[Sequence[int]] | None = None
) -> Tensor:
    """Token grids F for equally sized volumes (crops) -> [B, t, c]."""
    cfg = enc._cfg
    size = tuple(volumes[0].shape)
    part = PatchPartition(size, cfg.patch)
    origins = origins or [(0, 0, 0)] * len(volumes)
    patches = np.stack([part.patchify(np.asarray(v, dtype=np.float64)) for v in volumes])
    pos = np.stack([crop_position_index(cfg, o, size) for o in origins])
    return enc(patches, pos)


def encode_volume(v: np.ndarray, enc: VisionEncoder, origin: Sequence[int] = (0, 0, 0)) -> Tensor:
    """Single-volume token grid [t, c]."""
    return encode_volumes(enc, [v], [origin])[0]


# --- anatomy pooling ---------------------------------------------------------------


class PoolingError(ValueError):
    pass


class AnatomyQueryBank(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        # unit scale to match LayerNorm-ed backbone tokens
        self.queries = nn.param(rng.normal(size=(cfg.n_anatomies, cfg.width)))
        self.attn = nn.Attention(cfg.width, rng)
        self.proj = nn.Linear(cfg.width, cfg.embed_dim, rng, bias=False)

    def pool(self, tokens: Tensor, requests: Sequence[tuple[int, Sequence[int], int]]) -> Tensor:
        """Pool many (batch row, token indices, anatomy) requests at once.

        ``tokens`` is [B, t, c]. Each request attends its anatomy query over
        the gathered tokens plus the query itself (a positionless attention
        layer, so the readout does not depend on token order); the attention
        output at the query position is projected and L2-normalized. Returns [len(requests), e].
        """
        B, t, c = tokens.shape
        kmax = max(len(idx) for _, idx, _ in requests)
        gather = np.zeros((len(requests), kmax), dtype=np.int64)
        mask = np.zeros((len(requests), kmax + 1), dtype=bool)
        anat = np.zeros(len(requests), dtype=np.int64)
        for r, (b, idx, j) in enumerate(requests):
            if len(idx) == 0:
                raise PoolingError(f"anatomy {j} has no tokens in batch row {b}")
            idx = np.sort(np.fromiter(idx, dtype=np.int64))
            gather[r, : idx.size] = b * t + idx
            mask[r, : idx.size] = True
            anat[r] = j
        mask[:, kmax] = True
        flat = tokens.reshape(B * t, c)
        q = self.queries[anat].reshape(len(requests), 1, c)
        keys = ad.concat([flat[gather], q], axis=1)
        updated = self.attn(q, keys, mask)
        return ad.l2_normalize(self.proj(updated.reshape(len(requests), c)), axis=-1)


def pool_anatomy(F: Tensor, indices, bank: AnatomyQueryBank, j: int) -> Tensor:
    """Visual embedding V for one anatomy from one token grid F [t, c]."""
    idx = list(indices)
    if not idx:
        raise PoolingError(f"anatomy {j} has no tokens (absent or filtered)")
    return bank.pool(F.reshape(1, *F.shape), [(0, idx, j)])[0]


# --- text -----------------------------------------------------------------------------


def tokenize(texts: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Byte ids with a leading CLS; returns (ids [n, L], key mask [n, L])."""
    seqs = [[CLS, *t.encode("utf-8")[:max_len]] for t in texts]
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = nn.param(rng.normal(scale=0.1, size=(VOCAB, cfg.width)))
        self.pos = nn.param(rng.normal(scale=0.02, size=(cfg.max_text_len + 1, cfg.width)))
        self.blocks = [nn.Block(cfg.width, rng) for _ in range(cfg.text_layers)]
        self.norm = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.embed_dim, rng, bias=False)
        self._max_len = cfg.max_text_len

    def __call__(self, texts: Sequence[str]) -> Tensor:
        ids, mask = tokenize(texts, self._max_len)
        x = self.embed[ids] + self.pos[np.arange(ids.shape[1])]
        for blk in self.blocks:
            x = blk(x, mask)
        cls = self.norm(x[:, 0, :])
        return ad.l2_normalize(self.proj(cls), axis=-1)


def encode_texts(enc: TextEncoder, texts: Sequence[str], fallback_anatomy: str = "Anatomy") -> tuple[Tensor, list[int]]:
    """Encode unique strings once; returns ([n_unique, e], row index per input)."""
    cleaned = [t if t.strip() else default_sentence(fallback_anatomy) for t in texts]
    uniq = list(dict.fromkeys(cleaned))
    where = {t: i for i, t in enumerate(uniq)}
    return enc(uniq), [where[t] for t in cleaned]


def encode_text(s: str, enc: TextEncoder, anatomy: str = "Anatomy") -> Tensor:
    emb, _ = encode_texts(enc, [s], anatomy)
    return emb[0]


# --- full models -------------------------------------------------------------------


class FVLM(nn.Module):
    """Fine-grained model: per-anatomy visual queries vs per-anatomy text."""

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(cfg, rng)
        self.bank = AnatomyQueryBank(cfg, rng)
        self.text = TextEncoder(cfg, rng)
        self.log_tau = nn.param(np.log(cfg.tau_init))
        self.cfg = cfg

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp_tau(self) -> None:
        self.log_tau.data[...] = max(float(self.log_tau.data), np.log(self.cfg.tau_min))


class GlobalCLIP(nn.Module):
    """Baseline: mean-pooled volume tokens vs whole-report text."""

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(cfg, rng)
        self.proj = nn.Linear(cfg.width, cfg.embed_dim, rng, bias=False)
        self.text = TextEncoder(cfg, rng)
        self.log_tau = nn.param(np.log(cfg.tau_init))
        self.cfg = cfg

    tau = FVLM.tau
    clamp_tau = FVLM.clamp_tau

    def embed_image(self, tokens: Tensor) -> Tensor:
        return ad.l2_normalize(self.proj(tokens.mean(axis=1)), axis=-1)


def build_model(cfg: ModelConfig, seed: int) -> FVLM | GlobalCLIP:
    if cfg.kind == "fvlm":
        return FVLM(cfg, seed)
    if cfg.kind == "global_clip":
        return GlobalCLIP(cfg, seed)
    raise ValueError(f"unknown model kind {cfg.kind!r}")


# --- checkpoints ------------------------------------------------------------------------

MAGIC = b"FVLM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: nn.Module, extra: dict | None = None) -> None:
    """Magic, u32 version, u32 header length, JSON header, little-endian f64 tensors."""
    named = list(model.named_parameters())
    header = {
        "config": model.cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an FVLM checkpoint")
    version, n = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[12 : 12 + n])
    offset = 12 + n
    arrays = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[FVLM | GlobalCLIP, dict]:
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, seed=0)
    named = dict(model.named_parameters())
    if set(named) != set(arrays):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for name, p in named.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data[...] = arrays[name]
    return model, header.get("extra", {})


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def parameter_distance(a: nn.Module, b: nn.Module) -> float:
    return float(np.sqrt(sum(((p.data - q.data) ** 2).sum() for p, q in zip(a.parameters(), b.parameters()))))

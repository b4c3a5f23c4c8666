"""Anatomy grouping, volume preprocessing, patch partition and crop sampling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

Triple = tuple[int, int, int]

# Full-scale constants (axial, coronal, sagittal); desk presets are scaled down.
FULL_SCALE = {
    "hu_window": (-300.0, 400.0),
    "spacing_mm": (5.0, 1.0, 1.0),
    "patch": (16, 16, 32),
    "crop": (96, 256, 384),
}
DESK_SCALE = {
    "hu_window": (-300.0, 400.0),
    "spacing_mm": (1.0, 1.0, 1.0),
    "volume": (32, 64, 64),
    "patch": (8, 8, 8),
    "crop": (16, 48, 48),
}


class PartitionError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


# --- anatomy table -----------------------------------------------------------


@dataclass
class AnatomyTable:
    fine_to_group: dict[str, str]
    groups: list[str]
    group_index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.group_index = {g: j for j, g in enumerate(self.groups)}
        unknown = sorted(set(self.fine_to_group.values()) - set(self.group_index))
        if unknown:
            raise ValueError(f"fine labels map to undeclared groups: {unknown}")
        unused = [g for g in self.groups if g not in set(self.fine_to_group.values())]
        if unused:
            raise ValueError(f"groups without any fine label: {unused}")

    @property
    def T(self) -> int:
        return len(self.groups)

    @classmethod
    def from_dict(cls, obj: dict) -> "AnatomyTable":
        if "fine_to_group" in obj:
            f2g = dict(obj["fine_to_group"])
            groups = list(obj.get("groups") or dict.fromkeys(f2g.values()))
        else:
            f2g = dict(obj)
            groups = list(dict.fromkeys(f2g.values()))
        return cls(f2g, groups)

    @classmethod
    def load(cls, path: str | Path) -> "AnatomyTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "AnatomyTable":
        text = resources.files("fvlm").joinpath("data/anatomy_table.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"groups": list(self.groups), "fine_to_group": dict(self.fine_to_group)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def lookup_table(self, label_names: Sequence[str]) -> np.ndarray:
        """Map mask label ids to group indices; background and unknown names -> -1."""
        lut = np.full(max(len(label_names), 1), -1, dtype=np.int64)
        for i, name in enumerate(label_names):
            if i == 0:
                continue
            g = self.fine_to_group.get(name)
            if g is not None:
                lut[i] = self.group_index[g]
        return lut


def group_labels(table: AnatomyTable, fine_label: str) -> str:
    try:
        return table.fine_to_group[fine_label]
    except KeyError:
        known = ", ".join(sorted(table.fine_to_group))
        raise KeyError(f"unknown fine label {fine_label!r}; known labels: {known}") from None


# --- volumes and masks -------------------------------------------------------


@dataclass
class VolumeGrid:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    hu_windowed: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3-d with positive dims, got {self.data.shape}")

    @property
    def dims(self) -> Triple:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass
class SegMask:
    labels: np.ndarray
    label_names: list[str]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError("mask must be 3-d")

    @property
    def dims(self) -> Triple:
        return tuple(self.labels.shape)  # type: ignore[return-value]

    def grouped(self, table: AnatomyTable) -> np.ndarray:
        """Per-voxel group index (-1 = background)."""
        return table.lookup_table(self.label_names)[self.labels.astype(np.int64)]


def hu_window_normalize(v: VolumeGrid, lo: float = -300.0, hi: float = 400.0) -> VolumeGrid:
    if not hi > lo:
        raise ValueError("window upper bound must exceed lower bound")
    out = np.clip((v.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return VolumeGrid(out, v.spacing, hu_windowed=True)


def _sample_positions(n: int, src: float, dst: float) -> np.ndarray:
    """Fractional source indices of a centre-aligned grid with spacing ``dst``."""
    m = int(np.floor(n * src / dst + 1e-9))
    if m < 1:
        raise ValueError(f"resampling {n} voxels at {src}mm to {dst}mm gives zero voxels")
    centre = (n - 1) / 2.0
    return centre + (np.arange(m) - (m - 1) / 2.0) * (dst / src)


def _linear_axis(a: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def resample_trilinear(v: VolumeGrid, target_spacing: Sequence[float]) -> VolumeGrid:
    target = tuple(float(t) for t in target_spacing)
    if min(target) <= 0 or min(v.spacing) <= 0:
        raise ValueError("spacings must be positive")
    if target == tuple(v.spacing):
        return VolumeGrid(v.data.copy(), v.spacing, v.hu_windowed)
    out = v.data.astype(np.float64)
    for ax in range(3):
        out = _linear_axis(out, _sample_positions(v.dims[ax], v.spacing[ax], target[ax]), ax)
    return VolumeGrid(out, target, v.hu_windowed)


def resample_nearest(mask: SegMask, spacing: Sequence[float], target_spacing: Sequence[float]) -> SegMask:
    out = mask.labels
    for ax in range(3):
        pos = _sample_positions(mask.dims[ax], float(spacing[ax]), float(target_spacing[ax]))
        idx = np.clip(np.floor(pos + 0.5).astype(np.int64), 0, mask.dims[ax] - 1)
        out = np.take(out, idx, axis=ax)
    return SegMask(out, list(mask.label_names))


# --- patches and tokens -------------------------------------------------------


@dataclass(frozen=True)
class PatchPartition:
    dims: Triple
    patch: Triple

    def __post_init__(self) -> None:
        for n, p in zip(self.dims, self.patch):
            if p < 1 or n % p:
                raise PartitionError(f"volume dims {self.dims} are not divisible by patch {self.patch}")

    @property
    def grid(self) -> Triple:
        return tuple(n // p for n, p in zip(self.dims, self.patch))  # type: ignore[return-value]

    @property
    def n_tokens(self) -> int:
        d, h, w = self.grid
        return d * h * w

    def token_index(self, z: int, y: int, x: int) -> int:
        _, h, w = self.grid
        return (z * h + y) * w + x

    def patchify(self, a: np.ndarray) -> np.ndarray:
        """[D,H,W] -> [tokens, pD*pH*pW] in row-major token order."""
        (d, h, w), (pd, ph, pw) = self.grid, self.patch
        blocks = a.reshape(d, pd, h, ph, w, pw).transpose(0, 2, 4, 1, 3, 5)
        return blocks.reshape(d * h * w, pd * ph * pw)


def token_membership(groups: np.ndarray, part: PatchPartition, n_groups: int) -> np.ndarray:
    """Bool [n_groups, tokens]: token holds at least one voxel of the group."""
    if tuple(groups.shape) != part.dims:
        raise PartitionError(f"mask dims {groups.shape} differ from partition dims {part.dims}")
    patches = part.patchify(groups)
    out = np.zeros((n_groups, part.n_tokens), dtype=bool)
    for j in range(n_groups):
        out[j] = (patches == j).any(axis=1)
    return out


def anatomy_token_indices(mask: SegMask, table: AnatomyTable, part: PatchPartition, j: int) -> set[int]:
    member = token_membership(mask.grouped(table), part, table.T)
    return set(np.flatnonzero(member[j]).tolist())


# --- crops ---------------------------------------------------------------------


@dataclass(frozen=True)
class CropSpec:
    origin: Triple
    size: Triple

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))  # type: ignore[return-value]

    def apply(self, a: np.ndarray) -> np.ndarray:
        return a[self.slices()]


class Completeness(enum.Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    ABSENT = "absent"


def bounding_boxes(groups: np.ndarray, n_groups: int) -> list[tuple[Triple, Triple] | None]:
    """Inclusive-exclusive (lo, hi) voxel bbox per group, None when absent."""
    boxes: list[tuple[Triple, Triple] | None] = []
    for j in range(n_groups):
        idx = np.nonzero(groups == j)
        if idx[0].size == 0:
            boxes.append(None)
            continue
        lo = tuple(int(i.min()) for i in idx)
        hi = tuple(int(i.max()) + 1 for i in idx)
        boxes.append((lo, hi))  # type: ignore[arg-type]
    return boxes


def _feasible_origins(
    box: tuple[Triple, Triple], dims: Triple, size: Triple, align: Triple
) -> list[np.ndarray] | None:
    axes = []
    for lo, hi, n, s, a in zip(box[0], box[1], dims, size, align):
        first = max(hi - s, 0)
        last = min(lo, n - s)
        cand = np.arange(first, last + 1)
        cand = cand[cand % a == 0]
        if cand.size == 0:
            return None
        axes.append(cand)
    return axes


def crop_with_anatomy_guarantee(
    mask: SegMask | None,
    table: AnatomyTable,
    crop_size: Sequence[int],
    rng: np.random.Generator,
    align: Sequence[int] = (1, 1, 1),
    groups: np.ndarray | None = None,
) -> tuple[CropSpec, int]:
    """Pick an anatomy uniformly among those that fit, then a uniform crop containing it.

    Origins are restricted to multiples of ``align`` (the patch size in the
    training pipeline) so crops stay on the token grid.
    """
    size = tuple(int(s) for s in crop_size)
    groups = mask.grouped(table) if groups is None else groups  # type: ignore[union-attr]
    dims = tuple(groups.shape)
    if any(s > n for s, n in zip(size, dims)):
        raise SamplingError(f"crop {size} larger than volume {dims}")
    candidates = []
    for j, box in enumerate(bounding_boxes(groups, table.T)):
        if box is None:
            continue
        origins = _feasible_origins(box, dims, size, tuple(align))
        if origins is not None:
            candidates.append((j, origins))
    if not candidates:
        raise SamplingError("no anatomy fits inside the requested crop size")
    j, origins = candidates[int(rng.integers(len(candidates)))]
    origin = tuple(int(ax[rng.integers(ax.size)]) for ax in origins)
    return CropSpec(origin, size), j  # type: ignore[arg-type]


def completeness_filter(
    mask: SegMask, table: AnatomyTable, crop: CropSpec, groups: np.ndarray | None = None
) -> list[Completeness]:
    groups = mask.grouped(table) if groups is None else groups
    total = np.bincount(groups[groups >= 0], minlength=table.T)
    inner = crop.apply(groups)
    inside = np.bincount(inner[inner >= 0], minlength=table.T)
    out = []
    for j in range(table.T):
        if total[j] == 0:
            out.append(Completeness.ABSENT)
        elif inside[j] == total[j]:
            out.append(Completeness.COMPLETE)
        else:
            out.append(Completeness.INCOMPLETE)
    return out


# --- file formats -------------------------------------------------------------


def write_volume(stem: str | Path, v: VolumeGrid) -> None:
    stem = Path(stem)
    stem.with_suffix(".raw").write_bytes(v.data.astype("<f4").tobytes())
    meta = {"dims": list(v.dims), "spacing": list(v.spacing), "hu_windowed": bool(v.hu_windowed)}
    stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def read_volume(stem: str | Path) -> VolumeGrid:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<f4").astype(np.float64)
    return VolumeGrid(data.reshape(meta["dims"]), tuple(meta["spacing"]), bool(meta["hu_windowed"]))


def write_mask(stem: str | Path, m: SegMask) -> None:
    stem = Path(stem)
    if m.labels.max(initial=0) > 255:
        raise ValueError("mask labels exceed uint8 range")
    stem.with_suffix(".raw").write_bytes(m.labels.astype(np.uint8).tobytes())
    meta = {"dims": list(m.dims), "label_names": list(m.label_names)}
    stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def read_mask(stem: str | Path) -> SegMask:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype=np.uint8)
    return SegMask(data.reshape(meta["dims"]).copy(), list(meta["label_names"]))

"""Synthetic patients with box anatomies, spherical lesions and templated reports."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fvlm import atlas
from fvlm.atlas import AnatomyTable, SegMask, VolumeGrid
from fvlm.reports import RawReport, write_reports


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Abnormality:
    name: str
    prevalence: float
    delta: float  # lesion peak change in windowed [0, 1] units
    radius: int
    # one sentence, appended verbatim to both findings and impression
    sentence: str = "{Anatomy}: {abn}."


@dataclass(frozen=True)
class AnatomySpec:
    name: str
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]  # exclusive
    intensity: float
    abnormalities: tuple[Abnormality, ...]
    # fine labels split the box along x; one label when empty
    fine_labels: tuple[str, ...] = ()
    normal_sentence: str = "The {anat} appears normal."


@dataclass(frozen=True)
class WorldSpec:
    anatomies: tuple[AnatomySpec, ...]
    dims: tuple[int, int, int] = (32, 64, 64)
    background: float = 0.15
    noise: float = 0.05
    normal_sentence_rate: float = 0.5

    def __post_init__(self) -> None:
        if len(self.anatomies) < 2:
            raise SpecError("a world needs at least two anatomies")
        boxes = []
        for a in self.anatomies:
            if not a.abnormalities:
                raise SpecError(f"{a.name}: needs at least one abnormality")
            if any(l < 0 or h > n or h <= l for l, h, n in zip(a.lo, a.hi, self.dims)):
                raise SpecError(f"{a.name}: bbox {a.lo}-{a.hi} outside grid {self.dims}")
            for ab in a.abnormalities:
                if not 0.0 < ab.prevalence < 1.0:
                    raise SpecError(f"{a.name}/{ab.name}: prevalence must lie in (0, 1)")
                if any(h - l < 2 * ab.radius + 1 for l, h in zip(a.lo, a.hi)):
                    raise SpecError(f"{a.name}/{ab.name}: lesion radius {ab.radius} exceeds bbox")
            for other in boxes:
                if all(l < oh and ol < h for l, h, ol, oh in zip(a.lo, a.hi, other.lo, other.hi)):
                    raise SpecError(f"bboxes of {a.name} and {other.name} overlap")
            boxes.append(a)

    # --- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, obj: dict) -> "WorldSpec":
        anats = []
        for a in obj["anatomies"]:
            abn = tuple(
                Abnormality(
                    x["name"], float(x["prevalence"]), float(x["delta"]), int(x["radius"]),
                    x.get("sentence", Abnormality.sentence),
                )
                for x in a["abnormalities"]
            )
            anats.append(
                AnatomySpec(
                    a["name"], tuple(a["lo"]), tuple(a["hi"]), float(a["intensity"]), abn,
                    tuple(a.get("fine_labels", ())), a.get("normal_sentence", AnatomySpec.normal_sentence),
                )
            )
        kw = {k: obj[k] for k in ("background", "noise", "normal_sentence_rate") if k in obj}
        if "dims" in obj:
            kw["dims"] = tuple(obj["dims"])
        return cls(tuple(anats), **kw)

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_prevalence(self, value: float | None = None, only: str | None = None, setting: float | None = None) -> "WorldSpec":
        """Copy with prevalences replaced (bypasses the open-interval check for edge cases)."""
        anats = []
        for a in self.anatomies:
            abn = []
            for ab in a.abnormalities:
                p = ab.prevalence if value is None else value
                if only is not None and f"{a.name}/{ab.name}" == only:
                    p = setting if setting is not None else p
                abn.append(Abnormality(ab.name, p, ab.delta, ab.radius, ab.sentence))
            anats.append(AnatomySpec(a.name, a.lo, a.hi, a.intensity, tuple(abn), a.fine_labels, a.normal_sentence))
        out = object.__new__(WorldSpec)
        object.__setattr__(out, "anatomies", tuple(anats))
        for k in ("dims", "background", "noise", "normal_sentence_rate"):
            object.__setattr__(out, k, getattr(self, k))
        return out

    # --- derived tables ---------------------------------------------------------

    def label_names(self) -> list[str]:
        names = ["background"]
        for a in self.anatomies:
            names.extend(a.fine_labels or (a.name,))
        return names

    def anatomy_table(self) -> AnatomyTable:
        fine = {}
        for a in self.anatomies:
            for f in a.fine_labels or (a.name,):
                fine[f] = a.name
        return AnatomyTable(fine, [a.name for a in self.anatomies])

    def abnormality_keys(self) -> list[str]:
        return [f"{a.name}/{ab.name}" for a in self.anatomies for ab in a.abnormalities]


def default_world() -> WorldSpec:
    """Four anatomies with two abnormalities each (one bright, one dark).

    The boxes share one axial band in a 2x2 in-plane layout so that a
    16x48x48 crop usually holds more than one complete anatomy.
    """

    abn = Abnormality
    return WorldSpec(
        (
            AnatomySpec("Liver", (2, 10, 10), (14, 30, 30), 0.35,
                        (abn("hyperdense nodule", 0.3, 0.5, 5), abn("hypodense cyst", 0.3, -0.5, 5))),
            AnatomySpec("Spleen", (2, 10, 34), (14, 30, 54), 0.45,
                        (abn("calcification", 0.3, 0.6, 4), abn("infarct", 0.3, -0.5, 5))),
            AnatomySpec("Kidney", (2, 34, 10), (14, 54, 30), 0.55,
                        (abn("renal stone", 0.3, 0.6, 4), abn("cyst", 0.3, -0.5, 5)),
                        fine_labels=("Kidney left", "Kidney right")),
            AnatomySpec("Pancreas", (2, 34, 34), (14, 54, 54), 0.65,
                        (abn("mass", 0.3, 0.5, 5), abn("hypodense lesion", 0.3, -0.5, 5))),
        )
    )


@dataclass
class GeneratedPatient:
    volume: VolumeGrid
    mask: SegMask
    report: RawReport
    gold: dict[str, int] = field(default_factory=dict)
    lesions: list[tuple[str, tuple[int, int, int], int]] = field(default_factory=list)


def _fill(template: str, anatomy: str, abn: str = "") -> str:
    return template.format(anat=anatomy.lower(), Anatomy=anatomy, abn=abn)


def generate_patient(spec: WorldSpec, rng: np.random.Generator, patient_id: str = "p0") -> GeneratedPatient:
    D, H, W = spec.dims
    u = np.full(spec.dims, spec.background)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    names = spec.label_names()
    grid = np.indices(spec.dims)
    findings: list[str] = []
    impression: list[str] = []
    gold: dict[str, int] = {}
    lesions = []
    for a in spec.anatomies:
        sl = tuple(slice(l, h) for l, h in zip(a.lo, a.hi))
        u[sl] = a.intensity
        fines = a.fine_labels or (a.name,)
        edges = np.linspace(a.lo[2], a.hi[2], len(fines) + 1).round().astype(int)
        for f, x0, x1 in zip(fines, edges[:-1], edges[1:]):
            labels[sl[0], sl[1], x0:x1] = names.index(f)
        present = []
        for ab in a.abnormalities:
            hit = bool(rng.random() < ab.prevalence)
            gold[f"{a.name}/{ab.name}"] = int(hit)
            if not hit:
                continue
            r = ab.radius
            centre = tuple(int(rng.integers(l + r, h - r)) for l, h in zip(a.lo, a.hi))
            d2 = sum((g - c) ** 2 for g, c in zip(grid, centre))
            ball = d2 <= r * r
            u = u + np.where(ball, ab.delta * np.exp(-d2 / (2.0 * (r / 2.0) ** 2)), 0.0)
            lesions.append((f"{a.name}/{ab.name}", centre, r))
            present.append(ab)
        for ab in present:
            sentence = _fill(ab.sentence, a.name, ab.name)
            findings.append(sentence)
            impression.append(sentence)
        if not present and rng.random() < spec.normal_sentence_rate:
            findings.append(_fill(a.normal_sentence, a.name))
    u = u + rng.normal(scale=spec.noise, size=spec.dims)
    hu = (u * 700.0 - 300.0).astype(np.float32)
    report = RawReport(patient_id, " ".join(findings), " ".join(impression))
    return GeneratedPatient(VolumeGrid(hu, (1.0, 1.0, 1.0), False), SegMask(labels, names), report, gold, lesions)


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_corpus(
    spec: WorldSpec, n: int, seed: int, out_dir: str | Path, workers: int = 1, prefix: str = "p"
) -> Path:
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    def one(i: int) -> GeneratedPatient:
        pid = f"{prefix}{i:05d}"
        p = generate_patient(spec, patient_rng(seed, i), pid)
        atlas.write_volume(out / "volumes" / pid, p.volume)
        atlas.write_mask(out / "masks" / pid, p.mask)
        return p

    with ThreadPoolExecutor(max(1, workers)) as pool:
        patients = list(pool.map(one, range(n)))
    write_reports(out / "reports.jsonl", [p.report for p in patients])
    with open(out / "gold.jsonl", "w") as fh:
        for p in patients:
            for key, label in p.gold.items():
                anatomy, abn = key.split("/", 1)
                row = {"patient_id": p.report.patient_id, "anatomy": anatomy, "abnormality": key, "label": label}
                fh.write(json.dumps(row) + "\n")
    spec.anatomy_table().save(out / "anatomy_table.json")
    manifest = {"spec_hash": spec.digest(), "seed": seed, "n": n, "spec": spec.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def split_keys(keys: Sequence[str]) -> list[tuple[str, str]]:
    return [tuple(k.split("/", 1)) for k in keys]  # type: ignore[misc]

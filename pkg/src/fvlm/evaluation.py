"""Zero-shot scoring, ROC/threshold metrics and token heatmaps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fvlm import autodiff as ad
from fvlm.encoders import FVLM, GlobalCLIP, encode_texts, encode_volumes
from fvlm.reports import default_sentence
from fvlm.training import full_view


@dataclass(frozen=True)
class PromptPair:
    anatomy: str
    abnormality: str
    positive: str
    negative: str

    def __post_init__(self) -> None:
        if not self.positive or not self.negative or self.positive == self.negative:
            raise ValueError("prompts must be non-empty and distinct")

    @classmethod
    def for_finding(cls, anatomy: str, abnormality: str) -> "PromptPair":
        return cls(anatomy, abnormality, f"{anatomy}: {abnormality}.", default_sentence(anatomy))


def zero_shot_score(V: np.ndarray, t_pos: np.ndarray, t_neg: np.ndarray, tau: float) -> float:
    """Positive component of a two-way softmax over scaled similarities."""
    s = np.array([np.dot(V, t_pos), np.dot(V, t_neg)]) / tau
    s -= s.max()
    e = np.exp(s)
    return float(e[0] / e.sum())


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney statistic with average ranks for ties; None for one class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Metrics:
    auc: float | None
    acc: float | None
    sens: float | None
    spec: float | None
    prec: float | None
    f1: float | None
    threshold: float | None
    n_pos: int
    n_neg: int
    n_skipped: int = 0


def confusion_at(scores: np.ndarray, labels: np.ndarray, thr: float) -> tuple[int, int, int, int]:
    pred = scores >= thr
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    tn = int((~pred & ~labels).sum())
    return tp, fp, fn, tn


def threshold_metrics(scores: Sequence[float], labels: Sequence[int]) -> dict | None:
    """Youden-optimal threshold over observed scores (lowest one on ties)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    # positives predicted at threshold t = count of scores >= t; vectorised over sorted unique scores
    cand = np.unique(s)
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = n_pos - np.searchsorted(pos_sorted, cand, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, cand, side="left")
    # J scaled by n_pos * n_neg stays integral, so ties are exact
    j = tp * n_neg - fp * n_pos
    k = int(np.argmax(j))
    thr = float(cand[k])
    TP, FP, FN, TN = confusion_at(s, y, thr)
    sens, spec = TP / n_pos, TN / n_neg
    prec = TP / (TP + FP) if TP + FP else 0.0
    f1_pos = 2 * TP / (2 * TP + FP + FN) if TP + FP + FN else 0.0
    f1_neg = 2 * TN / (2 * TN + FN + FP) if TN + FN + FP else 0.0
    f1 = (n_pos * f1_pos + n_neg * f1_neg) / (n_pos + n_neg)
    return {"acc": (sens + spec) / 2.0, "sens": sens, "spec": spec, "prec": prec, "f1": f1, "threshold": thr}


# --- score tables ------------------------------------------------------------------


@dataclass
class ScoreTable:
    rows: list[dict] = field(default_factory=list)  # patient_id, abnormality, score, label
    skipped: list[dict] = field(default_factory=list)

    def abnormalities(self) -> list[str]:
        return list(dict.fromkeys(r["abnormality"] for r in self.rows))

    def column(self, abnormality: str) -> tuple[np.ndarray, np.ndarray]:
        sel = [r for r in self.rows if r["abnormality"] == abnormality and r["label"] is not None]
        return np.array([r["score"] for r in sel]), np.array([r["label"] for r in sel], dtype=int)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["patient_id", "abnormality", "score", "label"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "score": repr(r["score"])})


@dataclass
class MetricReport:
    per_abnormality: dict[str, Metrics]
    aggregate: dict[str, float | None]
    config_hash: str = ""

    @classmethod
    def from_scores(cls, table: ScoreTable, config_hash: str = "") -> "MetricReport":
        per = {}
        for abn in table.abnormalities():
            s, y = table.column(abn)
            tm = threshold_metrics(s, y) or {}
            per[abn] = Metrics(
                roc_auc(s, y), tm.get("acc"), tm.get("sens"), tm.get("spec"), tm.get("prec"), tm.get("f1"),
                tm.get("threshold"), int(y.sum()), int(len(y) - y.sum()),
                sum(1 for k in table.skipped if k["abnormality"] == abn),
            )
        agg: dict[str, float | None] = {}
        for key in ("auc", "acc", "sens", "spec", "prec", "f1"):
            vals = [getattr(m, key) for m in per.values() if getattr(m, key) is not None]
            agg[key] = float(np.mean(vals)) if vals else None
        return cls(per, agg, config_hash)

    def to_dict(self) -> dict:
        return {
            "per_abnormality": {k: asdict(v) for k, v in self.per_abnormality.items()},
            "aggregate": self.aggregate,
            "config_hash": self.config_hash,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


# --- model readout ----------------------------------------------------------------------


def image_embeddings(model: FVLM | GlobalCLIP, patient) -> dict[int, np.ndarray]:
    """Unit visual embedding per present anatomy (full volume, no crop)."""
    view = full_view(patient, model.cfg)
    with ad.no_grad():
        tokens = encode_volumes(model.vision, [view.volume], [view.origin])
        if isinstance(model, GlobalCLIP):
            v = model.embed_image(tokens).data[0]
            return {j: v for j in range(len(patient.texts)) if patient.total_voxels[j] > 0}
        present = [j for j in range(len(patient.texts)) if patient.total_voxels[j] > 0]
        V = model.bank.pool(tokens, [(0, view.members[j], j) for j in present]).data
    return {j: V[k] for k, j in enumerate(present)}


def score_patients(
    model: FVLM | GlobalCLIP,
    patients: Sequence,
    anatomies: Sequence[str],
    gold: Sequence[dict],
) -> ScoreTable:
    """Score every gold (patient, abnormality) pair; absent anatomies are skipped and recorded."""
    keys = list(dict.fromkeys(g["abnormality"] for g in gold))
    pairs = {}
    for key in keys:
        anatomy, abn = key.split("/", 1) if "/" in key else (None, key)
        if anatomy is None:
            raise ValueError(f"abnormality {key!r} must be written as 'Anatomy/abnormality'")
        pairs[key] = PromptPair.for_finding(anatomy, abn)
    prompts = [t for p in pairs.values() for t in (p.positive, p.negative)]
    with ad.no_grad():
        emb, rows = encode_texts(model.text, prompts)
    T = emb.data[np.asarray(rows)]
    prompt_vec = {key: (T[2 * i], T[2 * i + 1]) for i, key in enumerate(pairs)}
    labels = {(g["patient_id"], g["abnormality"]): g.get("label") for g in gold}
    table = ScoreTable()
    for p in patients:
        emb_p = image_embeddings(model, p)
        for key, pair in pairs.items():
            if (p.patient_id, key) not in labels:
                continue
            j = anatomies.index(pair.anatomy)
            if j not in emb_p:
                table.skipped.append({"patient_id": p.patient_id, "abnormality": key, "reason": "anatomy absent"})
                continue
            pos, neg = prompt_vec[key]
            score = zero_shot_score(emb_p[j], pos, neg, model.tau)
            table.rows.append({"patient_id": p.patient_id, "abnormality": key, "score": score, "label": labels[(p.patient_id, key)]})
    return table


# --- heatmaps -------------------------------------------------------------------------


def token_similarity_map(tokens: np.ndarray, proj, text_emb: np.ndarray) -> np.ndarray:
    """Cosine between each projected token and the text embedding -> [t]."""
    with ad.no_grad():
        z = proj(ad.Tensor(tokens)).data
    norms = np.linalg.norm(z, axis=-1)
    tnorm = np.linalg.norm(text_emb)
    sim = z @ text_emb / np.maximum(norms * tnorm, 1e-12)
    return np.clip(sim, -1.0, 1.0)


def export_heatmap(sim: np.ndarray, grid: tuple[int, int, int], out_stem: str | Path, indices=None) -> list[Path]:
    """Write a z,y,x,value CSV and one min-max scaled 8-bit PGM per axial slab.

    Tokens outside ``indices`` (when given) are written as 0.
    """
    out = Path(out_stem)
    out.parent.mkdir(parents=True, exist_ok=True)
    vals = np.asarray(sim, dtype=np.float64).copy()
    if indices is not None:
        keep = np.zeros(vals.size, dtype=bool)
        keep[np.asarray(list(indices), dtype=np.int64)] = True
        vals[~keep] = 0.0
    vol = vals.reshape(grid)
    paths = [out.with_suffix(".csv")]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "y", "x", "value"])
        for (z, y, x), v in np.ndenumerate(vol):
            w.writerow([z, y, x, repr(float(v))])
    lo, hi = float(vol.min()), float(vol.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    for z in range(grid[0]):
        img = np.round((vol[z] - lo) * scale).astype(np.uint8)
        p = out.parent / f"{out.name}_z{z:02d}.pgm"
        header = f"P5\n{grid[2]} {grid[1]}\n255\n".encode()
        p.write_bytes(header + img.tobytes())
        paths.append(p)
    return paths


def anatomy_heatmap(model: FVLM, patient, anatomy_index: int, text: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-token similarity map for a full volume and the anatomy's token indices."""
    view = full_view(patient, model.cfg)
    with ad.no_grad():
        tokens = encode_volumes(model.vision, [view.volume], [view.origin]).data[0]
        emb, _ = encode_texts(model.text, [text])
    proj = model.bank.proj if isinstance(model, FVLM) else model.proj
    sim = token_similarity_map(tokens, proj, emb.data[0])
    return sim, view.members[anatomy_index]

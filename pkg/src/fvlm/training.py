"""Corpus loading, augmented views, train_step and the co-teaching loop."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fvlm import atlas
from fvlm import autodiff as ad
from fvlm import nn
from fvlm.atlas import AnatomyTable, CropSpec, PatchPartition
from fvlm.contrastive import LabelMatrix, SimilarityBlock, apply_fncn, base_targets, blend_coteach, compute_similarities, itc_loss
from fvlm.encoders import FVLM, GlobalCLIP, ModelConfig, build_model, encode_texts, encode_volumes, parameter_distance, save_checkpoint
from fvlm.reports import AnatomyLexicon, DecomposedReport, RawReport, decompose, read_decomposed, read_reports

log = logging.getLogger(__name__)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FVLM_THREADS", "1")))
    except ValueError:
        return 1


# --- corpus ------------------------------------------------------------------------


@dataclass
class Patient:
    patient_id: str
    volume: np.ndarray  # windowed intensities in [0, 1], float32
    groups: np.ndarray  # per-voxel anatomy index, -1 background
    texts: list[str]  # merged description per anatomy
    normal: np.ndarray  # bool per anatomy
    report_text: str
    total_voxels: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.total_voxels is None:
            g = self.groups
            self.total_voxels = np.bincount(g[g >= 0].ravel(), minlength=len(self.texts))


def _load_patient(
    volumes: Path, masks: Path, report: RawReport, dec: DecomposedReport, table: AnatomyTable, target_spacing
) -> Patient:
    vol = atlas.read_volume(volumes / report.patient_id)
    mask = atlas.read_mask(masks / report.patient_id)
    if tuple(vol.spacing) != tuple(target_spacing):
        mask = atlas.resample_nearest(mask, vol.spacing, target_spacing)
        vol = atlas.resample_trilinear(vol, target_spacing)
    if not vol.hu_windowed:
        vol = atlas.hu_window_normalize(vol)
    groups = mask.grouped(table).astype(np.int8)
    texts = [dec[a].merged for a in table.groups]
    normal = np.array([dec[a].normal for a in table.groups], dtype=bool)
    text = " ".join(s for s in (report.findings, report.impression) if s.strip())
    return Patient(report.patient_id, vol.data.astype(np.float32), groups, texts, normal, text or "null")


def load_corpus(
    corpus_dir: str | Path,
    table: AnatomyTable | None = None,
    lexicon: AnatomyLexicon | None = None,
    decomposed: str | Path | None = None,
    target_spacing=(1.0, 1.0, 1.0),
    *,
    reports_path: str | Path | None = None,
    volumes_dir: str | Path | None = None,
    masks_dir: str | Path | None = None,
) -> tuple[list[Patient], AnatomyTable]:
    """Read a corpus directory; individual parts may live elsewhere."""
    corpus = Path(corpus_dir)
    if table is None:
        table = AnatomyTable.load(corpus / "anatomy_table.json")
    lexicon = lexicon or AnatomyLexicon.default()
    reports = read_reports(Path(reports_path) if reports_path else corpus / "reports.jsonl")
    volumes = Path(volumes_dir) if volumes_dir else corpus / "volumes"
    masks = Path(masks_dir) if masks_dir else corpus / "masks"
    if not reports:
        raise ValueError(f"{corpus}: corpus is empty")
    if decomposed is not None:
        decs = read_decomposed(decomposed)
    else:
        decs = {r.patient_id: decompose(r, lexicon, table) for r in reports}
    with ThreadPoolExecutor(worker_count()) as pool:
        patients = list(pool.map(lambda r: _load_patient(volumes, masks, r, decs[r.patient_id], table, target_spacing), reports))
    return patients, table


def read_gold(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


# --- augmented views -----------------------------------------------------------------


@dataclass
class View:
    """One training view of a patient: aligned crop plus flip/noise augmentation."""

    crop: CropSpec
    flip: bool
    volume: np.ndarray
    complete: np.ndarray  # bool per anatomy
    members: list[np.ndarray]  # token indices per anatomy (empty if not complete)
    origin: tuple[int, int, int]


def augment(p: Patient, crop: CropSpec, cfg: ModelConfig, rng: np.random.Generator, flip_prob: float, noise_std: float) -> View:
    vol = crop.apply(p.volume).astype(np.float64)
    groups = crop.apply(p.groups)
    flip = bool(rng.random() < flip_prob)
    if flip:
        vol = vol[:, :, ::-1]
        groups = groups[:, :, ::-1]
    if noise_std > 0:
        vol = vol + rng.normal(scale=noise_std, size=vol.shape)
    inside = np.bincount(groups[groups >= 0].ravel(), minlength=len(p.texts))
    complete = (inside == p.total_voxels) & (p.total_voxels > 0)
    part = PatchPartition(crop.size, cfg.patch)
    member = atlas.token_membership(groups, part, len(p.texts))
    members = [np.flatnonzero(member[j]) if complete[j] else np.zeros(0, dtype=np.int64) for j in range(len(p.texts))]
    return View(crop, flip, vol, complete, members, crop.origin)


def full_view(p: Patient, cfg: ModelConfig) -> View:
    crop = CropSpec((0, 0, 0), tuple(p.volume.shape))
    return augment(p, crop, cfg, np.random.default_rng(0), 0.0, 0.0)


def sample_crop(p: Patient, table_T: int, cfg: ModelConfig, crop_size, rng: np.random.Generator) -> CropSpec:
    crop, _ = atlas.crop_with_anatomy_guarantee(None, _index_table(table_T), crop_size, rng, align=cfg.patch, groups=p.groups)
    return crop


_TABLES: dict[int, AnatomyTable] = {}


def _index_table(T: int) -> AnatomyTable:
    if T not in _TABLES:
        names = [f"a{j}" for j in range(T)]
        _TABLES[T] = AnatomyTable({n: n for n in names}, names)
    return _TABLES[T]


# --- forward passes ---------------------------------------------------------------


@dataclass
class BlockMeta:
    anatomy: int
    rows: np.ndarray  # batch positions in block order
    normal: np.ndarray


def forward_blocks(
    model: FVLM | GlobalCLIP, patients: Sequence[Patient], views: Sequence[View]
) -> tuple[list[SimilarityBlock], list[BlockMeta]]:
    """Similarity blocks for every anatomy with at least two complete samples."""
    tokens = encode_volumes(model.vision, [v.volume for v in views], [v.origin for v in views])
    if isinstance(model, GlobalCLIP):
        V = model.embed_image(tokens)
        emb, rows = encode_texts(model.text, [p.report_text for p in patients])
        T = emb[np.asarray(rows)]
        normal = np.array([bool(p.normal.all()) for p in patients])
        blk = compute_similarities(V, T, model.log_tau, 0)
        if blk is None:
            return [], []
        return [blk], [BlockMeta(0, np.arange(len(patients)), normal)]

    requests = [
        (b, v.members[j], j)
        for j in range(model.cfg.n_anatomies)
        for b, v in enumerate(views)
        if v.complete[j]
    ]
    counts = np.bincount([j for _, _, j in requests], minlength=model.cfg.n_anatomies)
    requests = [r for r in requests if counts[r[2]] >= 2]
    if not requests:
        return [], []
    V = model.bank.pool(tokens, requests)
    emb, rows = encode_texts(model.text, [patients[b].texts[j] for b, _, j in requests])
    T = emb[np.asarray(rows)]
    anat = np.array([j for _, _, j in requests])
    batch_rows = np.array([b for b, _, _ in requests])
    blocks, metas = [], []
    for j in np.unique(anat):
        sel = np.flatnonzero(anat == j)
        blk = compute_similarities(V[sel], T[sel], model.log_tau, int(j))
        rows_j = batch_rows[sel]
        blocks.append(blk)
        metas.append(BlockMeta(int(j), rows_j, np.array([patients[b].normal[j] for b in rows_j])))
    return blocks, metas


def partner_predictions(model, patients, views) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Constant (rows, p_i2t, p_t2i) per anatomy from a frozen partner model."""
    with ad.no_grad():
        blocks, metas = forward_blocks(model, patients, views)
    return {m.anatomy: (m.rows, b.p_i2t, b.p_t2i) for b, m in zip(blocks, metas)}


def build_targets(
    metas: Sequence[BlockMeta], fncn: bool, alpha: float, partner: dict | None
) -> list[LabelMatrix]:
    labels = []
    for m in metas:
        y = base_targets(len(m.rows), m.anatomy)
        if fncn:
            y = apply_fncn(y, m.normal)
        if partner is not None and m.anatomy in partner:
            rows, p_i2t, p_t2i = partner[m.anatomy]
            if not np.array_equal(rows, m.rows):
                raise RuntimeError("partner block rows differ from the active block")
            y = blend_coteach(y, p_i2t, p_t2i, alpha)
        labels.append(y)
    return labels


# --- optimisation -------------------------------------------------------------------


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def train_step(
    model: FVLM | GlobalCLIP,
    opt: nn.Adam,
    patients: Sequence[Patient],
    views: Sequence[View],
    lr: float,
    fncn: bool = True,
    alpha: float = 1.0,
    partner: dict | None = None,
) -> tuple[float, int]:
    """One Adam step; returns (loss, number of anatomies contributing)."""
    def abort(reason: str, value: float) -> TrainingError:
        opt.zero_grad()
        return TrainingError(
            f"non-finite contrastive loss ({reason})",
            {
                "loss": repr(value),
                "tau": model.tau,
                "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()},
                "patients": [p.patient_id for p in patients],
            },
        )

    graph = ad.Graph()
    try:
        with graph:
            blocks, metas = forward_blocks(model, patients, views)
            labels = build_targets(metas, fncn, alpha, partner)
            try:
                loss = itc_loss(blocks, labels)
            except ad.NumericError as exc:
                raise abort(str(exc), float("nan")) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise abort("loss", value)
            if loss._graph is not None:
                loss.backward()
    finally:
        graph.nodes = []
    opt.step(lr)
    model.clamp_tau()
    opt.zero_grad()
    return value, len(blocks)


# --- co-teaching -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 3e-3
    final_lr: float = 3e-5
    warmup_epochs: int = 1
    alpha: float = 0.5
    burn_in_epochs: int = 5
    fncn: bool = True
    coteach: bool = True
    crop: tuple[int, int, int] = (16, 48, 48)
    flip_prob: float = 0.5
    noise_std: float = 0.02
    seed: int = 0
    # the text tower collapses onto a constant before images carry any signal
    # unless it learns more slowly than the vision side
    text_lr_scale: float = 0.1


class Replica:
    """One model with its own init, data order and augmentation streams."""

    def __init__(self, model_cfg: ModelConfig, tcfg: TrainConfig, index: int, n_patients: int):
        seq = np.random.SeedSequence([tcfg.seed, index])
        init, order, aug, partner_aug = seq.spawn(4)
        self.model_id = "AB"[index] if index < 2 else str(index)
        self.model = build_model(model_cfg, int(init.generate_state(1)[0]))
        text_ids = {id(p) for p in self.model.text.parameters()}
        params = self.model.parameters()
        scales = [tcfg.text_lr_scale if id(p) in text_ids else 1.0 for p in params]
        self.opt = nn.Adam(params, scales=scales)
        self.order_rng = np.random.default_rng(order)
        self.aug_rng = np.random.default_rng(aug)
        self.partner_aug_rng = np.random.default_rng(partner_aug)
        self.tcfg = tcfg
        self.n = n_patients
        self.epoch = -1
        self.step = 0
        self._queue: list[np.ndarray] = []
        bs = min(tcfg.batch_size, n_patients)
        self.steps_per_epoch = max(1, n_patients // bs)
        self.total_steps = self.steps_per_epoch * tcfg.epochs

    def next_batch(self) -> np.ndarray:
        if not self._queue:
            self.epoch += 1
            perm = self.order_rng.permutation(self.n)
            bs = min(self.tcfg.batch_size, self.n)
            self._queue = [perm[i * bs : (i + 1) * bs] for i in range(self.steps_per_epoch)]
        return self._queue.pop(0)

    def lr(self) -> float:
        t = self.tcfg
        return nn.warmup_cosine(self.step, self.total_steps, t.warmup_epochs * self.steps_per_epoch, t.peak_lr, t.final_lr)

    def views(self, patients: Sequence[Patient], crops: Sequence[CropSpec] | None, rng) -> list[View]:
        cfg = self.model.cfg
        if cfg.kind == "global_clip":
            return [augment(p, CropSpec((0, 0, 0), tuple(p.volume.shape)), cfg, rng, self.tcfg.flip_prob, self.tcfg.noise_std) for p in patients]
        if crops is None:
            crops = [sample_crop(p, cfg.n_anatomies, cfg, self.tcfg.crop, rng) for p in patients]
        return [augment(p, c, cfg, rng, self.tcfg.flip_prob, self.tcfg.noise_std) for p, c in zip(patients, crops)]


@dataclass
class RunResult:
    models: dict[str, FVLM | GlobalCLIP]
    log: list[dict]
    distance_burn_in: float | None = None
    distance_final: float | None = None
    burn_in_models: dict[str, bytes] = field(default_factory=dict)


def run_coteaching(
    patients: Sequence[Patient],
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    config_hash: str = "",
    replica_indices: Sequence[int] | None = None,
    on_burn_in: Callable[[dict], None] | None = None,
) -> RunResult:
    """Alternate one optimizer step per model; blend partner predictions after burn-in.

    With ``coteach`` off a single replica is trained. ``replica_indices``
    overrides which seed streams are used (for reproducing one side of a
    co-teaching run on its own).
    """
    if not patients:
        raise ValueError("cannot train on an empty corpus")
    if replica_indices is None:
        replica_indices = (0, 1) if tcfg.coteach else (0,)
    reps = [Replica(model_cfg, tcfg, i, len(patients)) for i in replica_indices]
    log_rows: list[dict] = []
    total = sum(r.total_steps for r in reps)
    result = RunResult({r.model_id: r.model for r in reps}, log_rows)
    burn_in_done = False
    for it in range(total):
        active = reps[it % len(reps)]
        partner_rep = reps[(it + 1) % len(reps)] if len(reps) > 1 else None
        idx = active.next_batch()
        batch = [patients[i] for i in idx]
        views = active.views(batch, None, active.aug_rng)
        blend = (
            tcfg.coteach
            and partner_rep is not None
            and tcfg.alpha < 1.0
            and active.epoch >= tcfg.burn_in_epochs
        )
        partner = None
        if blend:
            pviews = partner_rep.views(batch, [v.crop for v in views], partner_rep.partner_aug_rng)
            partner = partner_predictions(partner_rep.model, batch, pviews)
        loss, n_active = train_step(
            active.model, active.opt, batch, views, active.lr(), tcfg.fncn, tcfg.alpha, partner
        )
        active.step += 1
        log_rows.append(
            {
                "iter": it,
                "model_id": active.model_id,
                "epoch": active.epoch,
                "loss": loss,
                "tau": active.model.tau,
                "n_active_anatomies": n_active,
                "blend": bool(blend),
                "config_hash": config_hash,
            }
        )
        if len(reps) == 2 and not burn_in_done and all(r.step >= r.steps_per_epoch * tcfg.burn_in_epochs for r in reps):
            burn_in_done = True
            result.distance_burn_in = parameter_distance(reps[0].model, reps[1].model)
            if on_burn_in is not None:
                on_burn_in({r.model_id: r.model for r in reps})
        if it % 50 == 0:
            log.info("iter %d model %s loss %.4f tau %.4f", it, active.model_id, loss, active.model.tau)
    if len(reps) == 2:
        result.distance_final = parameter_distance(reps[0].model, reps[1].model)
        if result.distance_burn_in is None:
            result.distance_burn_in = result.distance_final
    return result


def save_run(out_dir: str | Path, result: RunResult, extra: dict) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for mid, model in result.models.items():
        p = out / f"model_{mid}.fvlm"
        save_checkpoint(p, model, {**extra, "model_id": mid})
        paths.append(p)
    with open(out / "train_log.jsonl", "w") as fh:
        for row in result.log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return paths

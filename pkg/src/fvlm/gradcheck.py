"""Finite-difference audit of the contrastive loss on a two-patient micro-batch."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fvlm import autodiff as ad
from fvlm.contrastive import itc_loss
from fvlm.encoders import FVLM, ModelConfig
from fvlm.training import Patient, build_targets, forward_blocks, full_view

MICRO = ModelConfig(
    volume=(16, 16, 16),
    patch=(8, 8, 8),
    width=8,
    embed_dim=4,
    vision_layers=1,
    text_layers=1,
    max_text_len=24,
    n_anatomies=2,
)
TOLERANCE = 1e-4


@dataclass
class GradReport:
    max_rel_err: float
    per_seed: list[float] = field(default_factory=list)
    n_params: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def micro_batch(rng: np.random.Generator, cfg: ModelConfig = MICRO) -> list[Patient]:
    """Two patients, anatomy 0 in the upper half and anatomy 1 in the lower half."""
    D, H, W = cfg.volume
    groups = np.full(cfg.volume, -1, dtype=np.int8)
    groups[: D // 2, 2 : H - 2, 2 : W - 2] = 0
    groups[D // 2 :, 2 : H - 2, 2 : W - 2] = 1
    alphabet = list("abcdefghij .")
    patients = []
    for i in range(2):
        texts = ["".join(rng.choice(alphabet, size=int(rng.integers(3, 12)))) for _ in range(2)]
        patients.append(
            Patient(f"g{i}", rng.random(cfg.volume), groups.copy(), texts, np.array([i == 0, True]), " ".join(texts))
        )
    return patients


def check_seed(seed: int, cfg: ModelConfig = MICRO, max_entries: int = 6) -> tuple[float, int]:
    rng = np.random.default_rng(seed)
    model = FVLM(cfg, seed=seed)
    # move off the symmetric init so every parameter sees a generic point
    for p in model.parameters():
        p.data += rng.normal(scale=0.05, size=p.data.shape)
    patients = micro_batch(rng, cfg)
    views = [full_view(p, cfg) for p in patients]
    raw = rng.random((2, 2, 2)) + 0.1
    partner = {j: (np.arange(2), raw[j] / raw[j].sum(1, keepdims=True), raw[j].T / raw[j].T.sum(1, keepdims=True)) for j in range(2)}

    def loss() -> ad.Tensor:
        blocks, metas = forward_blocks(model, patients, views)
        return itc_loss(blocks, build_targets(metas, True, 0.5, partner))

    params = model.parameters()
    err = ad.finite_difference_check(loss, params, max_entries=max_entries, rng=rng)
    return err, len(params)


def run_suite(seeds: Sequence[int] = range(20), flip_op: str | None = None) -> GradReport:
    """Check d(loss)/d(every parameter tensor, log tau included) for each seed.

    ``flip_op`` negates the backward of one autodiff op (fault injection).
    """
    ctx = ad.inject_sign_flip(flip_op) if flip_op else contextlib.nullcontext()
    errs = []
    n = 0
    with ctx:
        for s in seeds:
            e, n = check_seed(int(s))
            errs.append(e)
    return GradReport(max(errs) if errs else 0.0, errs, n)

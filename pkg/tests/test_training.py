import numpy as np
import pytest

from fvlm import autodiff as ad
from fvlm.atlas import CropSpec
from fvlm.contrastive import itc_loss
from fvlm.encoders import ModelConfig, parameter_digest
from fvlm.training import (
    Replica,
    TrainConfig,
    TrainingError,
    augment,
    build_targets,
    forward_blocks,
    partner_predictions,
    run_coteaching,
    train_step,
)

CFG = ModelConfig(n_anatomies=4)


def _replica(n, index=0, **kw):
    return Replica(CFG, TrainConfig(epochs=1, **kw), index, n)


def _fixed_views(rep, batch):
    return rep.views(batch, None, np.random.default_rng(0))


def _grads(model, batch, views):
    model.zero_grad()
    with ad.Graph():
        blocks, metas = forward_blocks(model, batch, views)
        itc_loss(blocks, build_targets(metas, True, 1.0, None)).backward()
    return {n: (None if p.grad is None else p.grad.copy()) for n, p in model.named_parameters()}


def test_fixed_batch_loss_strictly_decreases(corpus):
    patients, _ = corpus
    rep = _replica(len(patients))
    batch = patients[:8]
    views = _fixed_views(rep, batch)
    # Adam's first update is a sign step on every weight, so the rate stays small
    losses = [train_step(rep.model, rep.opt, batch, views, 3e-5)[0] for _ in range(51)]
    assert losses[-1] < 0.9 * losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:])), np.round(losses, 4)


def test_zero_lr_leaves_parameters_bit_identical(corpus):
    patients, _ = corpus
    rep = _replica(len(patients))
    before = parameter_digest(rep.model)
    train_step(rep.model, rep.opt, patients[:8], _fixed_views(rep, patients[:8]), 0.0)
    assert parameter_digest(rep.model) == before
    assert all(p.grad is None for p in rep.model.parameters())


def test_text_lr_scale_zero_freezes_text(corpus):
    patients, _ = corpus
    rep = _replica(len(patients), text_lr_scale=0.0)
    text_before = [p.data.copy() for p in rep.model.text.parameters()]
    vis_before = rep.model.vision.patch_embed.weight.data.copy()
    train_step(rep.model, rep.opt, patients[:8], _fixed_views(rep, patients[:8]), 1e-3)
    assert all(np.array_equal(a, p.data) for a, p in zip(text_before, rep.model.text.parameters()))
    assert not np.array_equal(vis_before, rep.model.vision.patch_embed.weight.data)


def test_non_finite_loss_aborts_with_diagnostics(corpus):
    patients, _ = corpus
    rep = _replica(len(patients))
    rep.model.log_tau.data[...] = np.nan
    with pytest.raises(TrainingError) as info:
        train_step(rep.model, rep.opt, patients[:8], _fixed_views(rep, patients[:8]), 1e-3)
    assert info.value.diagnostics


def test_incomplete_anatomies_get_no_gradient(corpus):
    patients, table = corpus
    rep = _replica(len(patients))
    batch = [p for p in patients[:6]]
    # this crop holds the upper-left anatomy only
    crop = CropSpec((0, 0, 0), (16, 48, 48))
    views = [augment(p, crop, CFG, np.random.default_rng(i), 0.0, 0.0) for i, p in enumerate(batch)]
    assert all(v.complete.tolist() == [True, False, False, False] for v in views)
    g1 = _grads(rep.model, batch, views)
    q = g1["bank.queries"]
    assert np.all(q[1:] == 0.0) and np.any(q[0] != 0.0)

    from dataclasses import replace

    altered = [replace(p, texts=[p.texts[0], "zzz", "qqq q", "kkk"]) for p in batch]
    g2 = _grads(rep.model, altered, views)
    for name in g1:
        a, b = g1[name], g2[name]
        assert (a is None and b is None) or np.array_equal(a, b), name


def test_partner_receives_no_gradient(corpus):
    patients, _ = corpus
    a, b = _replica(len(patients), 0), _replica(len(patients), 1)
    batch = patients[:8]
    views = _fixed_views(a, batch)
    partner = partner_predictions(b.model, batch, views)
    before = parameter_digest(b.model)
    train_step(a.model, a.opt, batch, views, 1e-3, True, 0.5, partner)
    assert all(p.grad is None or not np.any(p.grad) for p in b.model.parameters())
    assert parameter_digest(b.model) == before


def _run(patients, **kw):
    base = dict(epochs=2, batch_size=8, burn_in_epochs=1)
    base.update(kw)
    return run_coteaching(patients, CFG, TrainConfig(**base))


def test_runs_are_deterministic(corpus):
    patients, _ = corpus
    r1, r2 = _run(patients), _run(patients)
    assert r1.log == r2.log
    for k in ("A", "B"):
        assert parameter_digest(r1.models[k]) == parameter_digest(r2.models[k])
    assert {"iter", "model_id", "loss", "tau", "n_active_anatomies"} <= set(r1.log[0])
    assert [row["model_id"] for row in r1.log[:4]] == ["A", "B", "A", "B"]


def test_full_burn_in_equals_independent_runs(corpus):
    patients, _ = corpus
    joint = _run(patients, burn_in_epochs=2)
    assert not any(row["blend"] for row in joint.log)
    for idx, key in ((0, "A"), (1, "B")):
        solo = _run(patients, coteach=False, burn_in_epochs=2) if idx == 0 else run_coteaching(
            patients, CFG, TrainConfig(epochs=2, batch_size=8, coteach=False), replica_indices=(1,)
        )
        assert parameter_digest(solo.models[key]) == parameter_digest(joint.models[key])


def test_alpha_one_equals_fncn_only(corpus):
    patients, _ = corpus
    blended = _run(patients, alpha=1.0, burn_in_epochs=0)
    plain = _run(patients, alpha=1.0, burn_in_epochs=2)
    for k in ("A", "B"):
        assert parameter_digest(blended.models[k]) == parameter_digest(plain.models[k])


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        run_coteaching([], CFG, TrainConfig())

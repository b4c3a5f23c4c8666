"""Command line entry point: synth, decompose, train, eval, gradcheck, heatmap."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fvlm import reports as rp
from fvlm.atlas import AnatomyTable
from fvlm.config import RunConfig

log = logging.getLogger("fvlm")


class CliError(Exception):
    pass


# --- synth ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from fvlm.synth import WorldSpec, default_world, generate_corpus
    from fvlm.training import worker_count

    if args.spec:
        if not Path(args.spec).is_file():
            raise CliError(f"spec file not found: {args.spec}")
        spec = WorldSpec.load(args.spec)
    else:
        spec = default_world()
    out = generate_corpus(spec, args.n, args.seed, args.out, workers=worker_count(), prefix=args.prefix)
    print(f"wrote {args.n} patients to {out} (spec {spec.digest()[:12]})")
    return 0


# --- decompose ------------------------------------------------------------------------


def cmd_decompose(args) -> int:
    table = AnatomyTable.load(args.table)
    lexicon = rp.AnatomyLexicon.load(args.lexicon) if args.lexicon else rp.AnatomyLexicon.default()
    reports = rp.read_reports(args.inp)
    extractor = rp.SubprocessExtractor(args.extractor, table.groups) if args.extractor else None
    try:
        out = [rp.decompose(r, lexicon, table, extractor) for r in reports]
    finally:
        if extractor is not None:
            extractor.close()
    rp.write_decomposed(args.out, out)
    warnings = [w for d in out for w in d.warnings]
    sidecar = Path(str(args.out) + ".warnings.txt")
    sidecar.write_text("".join(w + "\n" for w in warnings))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"decomposed {len(out)} reports, {len(warnings)} warnings")
    return 0


# --- train ----------------------------------------------------------------------------

_OVERRIDES = {
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "peak_lr": float,
    "alpha": float,
    "burn_in_epochs": int,
}
_SWITCHES = ("fga", "fncn", "coteach")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    kw = {k: getattr(args, k) for k in (*_OVERRIDES, *_SWITCHES)}
    kw["baseline"] = args.baseline
    return cfg.override(**kw)


def cmd_train(args) -> int:
    from fvlm import plotting
    from fvlm.training import load_corpus, run_coteaching, save_run

    cfg = resolve_config(args)
    table = AnatomyTable.load(cfg.anatomy_table) if cfg.anatomy_table else None
    lexicon = rp.AnatomyLexicon.load(cfg.lexicon) if cfg.lexicon else None
    patients, table = load_corpus(args.corpus, table, lexicon, decomposed=args.decomposed)
    digest = cfg.digest()
    result = run_coteaching(patients, cfg.model_config(len(table.groups)), cfg.train_config(), config_hash=digest)
    out = Path(args.out)
    paths = save_run(out, result, {"config_hash": digest, "config": cfg.to_dict(), "anatomies": table.groups})
    summary = {
        "config_hash": digest,
        "config": cfg.to_dict(),
        "checkpoints": [p.name for p in paths],
        "distance_burn_in": result.distance_burn_in,
        "distance_final": result.distance_final,
        "final_loss": {m: float(np.mean([r["loss"] for r in result.log if r["model_id"] == m][-10:])) for m in result.models},
    }
    (out / "run.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    if not args.no_figures:
        plotting.plot_training_log(result.log, out / "figures" / "loss.png")
    print(f"trained {', '.join(p.name for p in paths)} (config {digest})")
    return 0


# --- eval / heatmap -------------------------------------------------------------------


def _load_eval_inputs(args):
    from fvlm.encoders import load_checkpoint
    from fvlm.training import load_corpus

    if not Path(args.ckpt).is_file():
        raise CliError(f"checkpoint not found: {args.ckpt}")
    model, extra = load_checkpoint(args.ckpt)
    corpus = Path(args.corpus)
    corpus_dir = corpus if corpus.is_dir() else corpus.parent
    reports = None if corpus.is_dir() else corpus
    table = AnatomyTable.load(args.table) if args.table else None
    if table is None and "anatomies" in extra and not (corpus_dir / "anatomy_table.json").exists():
        names = list(extra["anatomies"])
        table = AnatomyTable({n: n for n in names}, names)
    volumes = Path(args.volumes) if args.volumes else None
    masks = Path(args.masks) if args.masks else (volumes.parent / "masks" if volumes else None)
    patients, table = load_corpus(corpus_dir, table, reports_path=reports, volumes_dir=volumes, masks_dir=masks)
    return model, extra, patients, table


def _heatmap(model, patients, table, pid: str, key: str, out_stem: Path) -> list[Path]:
    from fvlm import plotting
    from fvlm.encoders import FVLM
    from fvlm.evaluation import PromptPair, anatomy_heatmap, export_heatmap

    if not isinstance(model, FVLM):
        raise CliError("heatmaps need a fine-grained checkpoint")
    by_id = {p.patient_id: p for p in patients}
    if pid not in by_id:
        raise CliError(f"unknown patient {pid!r}")
    if "/" not in key:
        raise CliError("abnormality must be written as 'Anatomy/abnormality'")
    anatomy, abn = key.split("/", 1)
    if anatomy not in table.groups:
        raise CliError(f"unknown anatomy {anatomy!r}")
    j = table.groups.index(anatomy)
    sim, members = anatomy_heatmap(model, by_id[pid], j, PromptPair.for_finding(anatomy, abn).positive)
    grid = model.cfg.full_partition.grid
    paths = export_heatmap(sim, grid, out_stem, members)
    paths.append(plotting.plot_heatmap(np.where(np.isin(np.arange(sim.size), members), sim, 0.0), grid, out_stem.with_suffix(".png"), f"{pid} {key}"))
    return paths


def cmd_eval(args) -> int:
    from fvlm import plotting
    from fvlm.evaluation import MetricReport, score_patients
    from fvlm.training import read_gold

    model, extra, patients, table = _load_eval_inputs(args)
    gold = read_gold(args.labels)
    scores = score_patients(model, patients, table.groups, gold)
    report = MetricReport.from_scores(scores, extra.get("config_hash", ""))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    if args.scores_csv:
        scores.to_csv(args.scores_csv)
    if scores.skipped:
        Path(str(out) + ".skipped.jsonl").write_text("".join(json.dumps(s) + "\n" for s in scores.skipped))
    fig_dir = Path(args.figures) if args.figures else out.parent / "figures"
    if not args.no_figures:
        plotting.plot_roc(scores, report, fig_dir / "roc.png")
        per = {k: [m.auc] for k, m in report.per_abnormality.items() if m.auc is not None}
        plotting.plot_auc_bars(per, fig_dir / "auc.png", f"mean AUC {report.aggregate['auc']:.3f}")
    if args.heatmap:
        pid, key = args.heatmap
        _heatmap(model, patients, table, pid, key, fig_dir / f"heatmap_{pid}_{key.replace('/', '_').replace(' ', '_')}")
    auc = report.aggregate["auc"]
    print(f"mean AUC {auc:.4f}" if auc is not None else "mean AUC undefined")
    return 0


def cmd_heatmap(args) -> int:
    model, _, patients, table = _load_eval_inputs(args)
    paths = _heatmap(model, patients, table, args.patient, args.abnormality, Path(args.out))
    print(f"wrote {len(paths)} files")
    return 0


# --- gradcheck ------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from fvlm.gradcheck import TOLERANCE, run_suite

    report = run_suite(range(args.seeds), flip_op=args.debug_sign_flip)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max rel. err {report.max_rel_err:.3e} over {len(report.per_seed)} seeds, {report.n_params} tensors (tol {TOLERANCE:g})")
    return 0 if report.passed else 1


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fvlm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", help="world spec JSON (default: built-in four-anatomy world)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--prefix", default="p")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("decompose", help="split reports into per-anatomy descriptions")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--table", required=True)
    s.add_argument("--lexicon")
    s.add_argument("--out", required=True)
    s.add_argument("--extractor", help="command of an external line-JSON extractor")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("train", help="train a model (co-teaching pair by default)")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--decomposed", help="precomputed decompose output")
    s.add_argument("--out", required=True)
    s.add_argument("--baseline", choices=("fvlm", "global_clip"))
    for name, typ in _OVERRIDES.items():
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    for name in _SWITCHES:
        s.add_argument("--" + name, dest=name, action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_train)

    def eval_inputs(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--corpus", required=True, help="corpus directory or reports JSONL")
        p.add_argument("--volumes", help="volume directory (default: <corpus>/volumes)")
        p.add_argument("--masks", help="mask directory (default: next to volumes)")
        p.add_argument("--table")

    s = sub.add_parser("eval", help="zero-shot evaluation against gold labels")
    eval_inputs(s)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scores-csv")
    s.add_argument("--figures", help="figure directory (default: next to --out)")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--heatmap", nargs=2, metavar=("PATIENT_ID", "ABNORMALITY"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("heatmap", help="token similarity map for one patient and finding")
    eval_inputs(s)
    s.add_argument("--patient", required=True)
    s.add_argument("--abnormality", required=True, help="'Anatomy/abnormality'")
    s.add_argument("--out", required=True, help="output stem")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("gradcheck", help="finite-difference audit of the loss gradients")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--debug-sign-flip", metavar="OP", help="negate one op's backward to prove the check bites")
    s.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError, rp.CorpusFormatError) as exc:
        print(f"fvlm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

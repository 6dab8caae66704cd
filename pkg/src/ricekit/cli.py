"""Command-line entry point: generate, preprocess, train, ablate, evaluate,
occlude, report.

Every subcommand is deterministic given (config, seed). Failures surface as
nonzero exit codes with a diagnostic on stderr: 2 for configuration/usage
problems, 3 for runtime errors (generation, I/O, training divergence).
"""

from __future__ import annotations

import argparse
import os
import sys


def _default_thread_env() -> None:
    # Keep BLAS single-threaded unless the user says otherwise: the heavy
    # loops here parallelize across processes, and nested BLAS threads only
    # add contention. Must run before numpy is first imported.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _build_parser() -> argparse.ArgumentParser:
    from .config import schema_help

    parser = argparse.ArgumentParser(
        prog="ricekit",
        description="Synthetic multimodal cohorts, 3D residual-network training, "
                    "modality ablations, and occlusion maps for lesion classification.",
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", default=None, help="INI config file (all keys optional)")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--workers", type=int, default=None, help="process workers override")
    parser.add_argument("--workdir", default=None, help="artifact directory override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort")
    p.add_argument("--out", default=None, help="cohort directory (default <workdir>/cohort)")

    p = sub.add_parser("preprocess", help="resample, accumulate dose, normalize, crop")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None, help="default <workdir>/preprocessed")

    p = sub.add_parser("train", help="train a single fold of one combination")
    p.add_argument("--combo", type=int, required=True, help="combination index 1..7")
    p.add_argument("--fold", type=int, required=True, help="validation fold 0..4")
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--out", default=None, help="default <workdir>/train")

    p = sub.add_parser("ablate", help="run combinations x folds, vote on the test set")
    p.add_argument("--combos", default="1,2,3,4,5,6,7", help="comma-separated indices")
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--out", default=None, help="default <workdir>/ablation")
    # also accepted here (not only before the subcommand); distinct dest so an
    # absent subcommand flag cannot clobber the global one
    p.add_argument("--workers", type=int, default=None, dest="workers_override")

    p = sub.add_parser("evaluate", help="score a named checkpoint set on the test split")
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="one or more checkpoint paths (an odd count votes cleanly)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None, help="default <workdir>/evaluation.json")

    p = sub.add_parser("occlude", help="occlusion-sensitivity map for one subject")
    p.add_argument("--subject", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--cube", type=int, default=None, help="cube edge override")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--fill", type=float, default=None)
    p.add_argument("--slice", dest="slice_index", type=int, default=None,
                   help="axial slice for overlays (default: strongest slice)")
    p.add_argument("--out", default=None, help="default <workdir>/occlusion")

    p = sub.add_parser("report", help="emit results CSV and the grouped-bar figure")
    p.add_argument("--results", default=None, help="default <workdir>/ablation/ablation_results.json")
    p.add_argument("--out-csv", default=None, help="default <workdir>/ablation_results.csv")
    p.add_argument("--out-svg", default=None, help="default <workdir>/figure2.svg")
    p.add_argument("--paper-reference", action="store_true",
                   help="overlay the published reference scores")
    return parser


def _snapshot_config(cfg, workdir: str) -> None:
    from .config import schema, SECTIONS

    os.makedirs(workdir, exist_ok=True)
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key in schema()[section]:
            value = getattr(getattr(cfg, section), key)
            shown = " ".join(str(v) for v in value) if isinstance(value, tuple) else value
            lines.append(f"{key} = {shown}")
        lines.append("")
    with open(os.path.join(workdir, "config_snapshot.ini"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def _ensure_folds(manifest_path: str, folds_path: str, seed: int):
    from .manifest import load_manifest
    from .sampling import load_folds, make_folds, save_folds

    if os.path.exists(folds_path):
        return load_folds(folds_path)
    folds = make_folds(load_manifest(manifest_path), seed)
    os.makedirs(os.path.dirname(os.path.abspath(folds_path)), exist_ok=True)
    save_folds(folds, folds_path)
    return folds


def _cmd_generate(cfg, args) -> int:
    from .phantom import generate_cohort

    out = args.out or os.path.join(cfg.run.workdir, "cohort")
    manifest = generate_cohort(
        cfg.phantom,
        n_train_recurrence=cfg.cohort.n_train_recurrence,
        n_train_rice=cfg.cohort.n_train_rice,
        n_test_recurrence=cfg.cohort.n_test_recurrence,
        n_test_rice=cfg.cohort.n_test_rice,
        out_dir=out,
        target_spacing_mm=cfg.preprocess.target_spacing_mm,
        crop_shape=cfg.preprocess.crop_shape,
    )
    print(f"generate: wrote {len(manifest.subjects)} subjects under {out}")
    print(os.path.join(out, "manifest.json"))
    return 0


def _cmd_preprocess(cfg, args) -> int:
    from .preprocess import preprocess_cohort

    manifest = args.manifest or os.path.join(cfg.run.workdir, "cohort", "manifest.json")
    out = args.out or os.path.join(cfg.run.workdir, "preprocessed")
    path = preprocess_cohort(manifest, os.path.dirname(manifest), out,
                             normalize_mode=cfg.preprocess.normalize_mode,
                             dose_ref_gy=cfg.preprocess.dose_ref_gy, verbose=True)
    print(path)
    return 0


def _cmd_train(cfg, args) -> int:
    from .combos import ModalityCombo
    from .manifest import load_manifest
    from .train import train_fold

    manifest_path = args.manifest or os.path.join(cfg.run.workdir, "preprocessed", "manifest.json")
    folds_path = args.folds or os.path.join(cfg.run.workdir, "folds.json")
    folds = _ensure_folds(manifest_path, folds_path, cfg.run.seed)
    out = args.out or os.path.join(cfg.run.workdir, "train")
    result = train_fold(
        manifest=load_manifest(manifest_path),
        cohort_dir=os.path.dirname(manifest_path),
        folds=folds,
        fold_id=args.fold,
        combo=ModalityCombo(args.combo),
        train_cfg=cfg.train,
        aug_cfg=cfg.augment,
        base_width=cfg.model.base_width,
        stem_kernel=cfg.model.stem_kernel,
        out_dir=out,
    )
    print(f"train: combo {result.combo} fold {result.fold_id}: "
          f"best val F1 {result.best_val_f1:.4f} (epoch {result.best_epoch}), "
          f"final val F1 {result.final_val_f1:.4f}")
    print(result.best_checkpoint)
    return 0


def _cmd_ablate(cfg, args) -> int:
    from .ablation import run_ablation, save_results
    from .combos import ModalityCombo

    try:
        indices = sorted({int(tok) for tok in args.combos.replace(" ", "").split(",") if tok})
        combos = tuple(ModalityCombo(i) for i in indices)
    except ValueError as exc:
        from .errors import ConfigError
        raise ConfigError(f"--combos: {exc}") from exc
    manifest_path = args.manifest or os.path.join(cfg.run.workdir, "preprocessed", "manifest.json")
    folds_path = args.folds or os.path.join(cfg.run.workdir, "folds.json")
    _ensure_folds(manifest_path, folds_path, cfg.run.seed)
    out = args.out or os.path.join(cfg.run.workdir, "ablation")
    if args.workers_override is not None:
        cfg.run.workers = args.workers_override
    results = run_ablation(
        manifest_path=manifest_path,
        cohort_dir=os.path.dirname(manifest_path),
        folds_path=folds_path,
        train_cfg=cfg.train,
        aug_cfg=cfg.augment,
        combos=combos,
        base_width=cfg.model.base_width,
        stem_kernel=cfg.model.stem_kernel,
        out_dir=out,
        workers=cfg.run.workers,
    )
    results_path = os.path.join(out, "ablation_results.json")
    save_results(results, {"seed": cfg.run.seed}, results_path)
    for r in results:
        print(f"ablate: ({r.combo_index}) {r.combo_name:22s} "
              f"val {r.val_mean:.4f} +/- {r.val_sd:.4f}  test(vote) {r.test_f1_vote:.4f}")
    print(results_path)
    return 0


def _cmd_evaluate(cfg, args) -> int:
    import json

    import numpy as np

    from . import net3d
    from .combos import ModalityCombo
    from .manifest import load_manifest
    from .metrics import macro_f1_score, majority_vote
    from .train import load_subject_sample, predict_with_probs

    manifest_path = args.manifest or os.path.join(cfg.run.workdir, "preprocessed", "manifest.json")
    manifest = load_manifest(manifest_path)
    cohort_dir = os.path.dirname(manifest_path)
    test_recs = manifest.test_subjects()
    labels = np.array([r.label_int for r in test_recs])

    votes, probs, per_model = [], [], []
    for ck in args.checkpoint:
        net_cfg, params = net3d.load_checkpoint(ck)
        extra = net3d.load_checkpoint_extra(ck)
        combo = ModalityCombo(int(extra.get("combo_index", 7)))
        arrays = [load_subject_sample(cohort_dir, rec, combo) for rec in test_recs]
        preds, p1 = predict_with_probs(params, net_cfg, arrays)
        f1 = macro_f1_score(labels, preds)
        per_model.append({"checkpoint": ck, "test_macro_f1": f1})
        votes.append(preds)
        probs.append(p1)
        print(f"evaluate: {ck}: test macro F1 {f1:.4f}")
    ensemble = majority_vote(np.stack(votes), np.stack(probs))
    ens_f1 = macro_f1_score(labels, ensemble)
    print(f"evaluate: ensemble of {len(votes)}: test macro F1 {ens_f1:.4f}")
    out = args.out or os.path.join(cfg.run.workdir, "evaluation.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"models": per_model, "ensemble_test_macro_f1": ens_f1,
                   "subjects": {rec.subject_id: int(v) for rec, v in zip(test_recs, ensemble)}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(out)
    return 0


def _cmd_occlude(cfg, args) -> int:
    import numpy as np

    from . import net3d
    from .combos import ModalityCombo
    from .manifest import load_manifest
    from .occlusion import occlusion_map, overlay_export, save_occlusion_map
    from .train import load_subject_sample
    from .volume import read_volume

    manifest_path = args.manifest or os.path.join(cfg.run.workdir, "preprocessed", "manifest.json")
    manifest = load_manifest(manifest_path)
    cohort_dir = os.path.dirname(manifest_path)
    rec = manifest.by_id(args.subject)
    net_cfg, params = net3d.load_checkpoint(args.checkpoint)
    extra = net3d.load_checkpoint_extra(args.checkpoint)
    combo = ModalityCombo(int(extra.get("combo_index", 7)))
    sample = load_subject_sample(cohort_dir, rec, combo)

    occ_cfg = cfg.occlusion
    if args.cube is not None:
        occ_cfg.cube_size_vox = args.cube
    if args.stride is not None:
        occ_cfg.stride_vox = args.stride
    if args.fill is not None:
        occ_cfg.fill_value = args.fill
    omap = occlusion_map(params, net_cfg, sample, occ_cfg)

    out = args.out or os.path.join(cfg.run.workdir, "occlusion")
    os.makedirs(out, exist_ok=True)
    base = os.path.join(out, f"{rec.subject_id}_map")
    save_occlusion_map(omap, base, model_id=os.path.basename(args.checkpoint),
                       subject_id=rec.subject_id)
    if args.slice_index is not None:
        idx = args.slice_index
    else:
        flat = np.abs(omap.values).sum(axis=(0, 1))
        idx = int(np.argmax(flat))
    images = []
    for name in ("post_op", "event", "dose"):
        under = read_volume(os.path.join(cohort_dir, rec.channel_paths[name]))
        img = os.path.join(out, f"{rec.subject_id}_{name}_z{idx}.png")
        overlay_export(omap.values, under, idx, img)
        images.append(img)
    print(f"occlude: subject {rec.subject_id} target class {omap.target_class} "
          f"baseline p {omap.baseline_prob:.4f}")
    for img in images:
        print(img)
    return 0


def _cmd_report(cfg, args) -> int:
    from .ablation import load_results
    from .report import emit_report

    results_path = args.results or os.path.join(cfg.run.workdir, "ablation", "ablation_results.json")
    csv_path = args.out_csv or os.path.join(cfg.run.workdir, "ablation_results.csv")
    svg_path = args.out_svg or os.path.join(cfg.run.workdir, "figure2.svg")
    for path in (csv_path, svg_path):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
    emit_report(load_results(results_path), csv_path, svg_path,
                paper_reference=args.paper_reference)
    print(csv_path)
    print(svg_path)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "evaluate": _cmd_evaluate,
    "occlude": _cmd_occlude,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    _default_thread_env()
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .config import load_run_config
    from .errors import ConfigError, RicekitError

    try:
        cfg = load_run_config(args.config, seed=args.seed,
                              workdir=args.workdir, workers=args.workers)
        _snapshot_config(cfg, cfg.run.workdir)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ricekit {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except RicekitError as exc:
        print(f"ricekit {args.command}: error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"ricekit {args.command}: missing input: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

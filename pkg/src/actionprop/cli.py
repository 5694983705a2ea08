"""Command-line front end wiring the pipeline end to end.

Every subcommand prints one machine-readable JSON summary line to stdout;
logs go to stderr and data goes to files only. Exit codes: 0 on success,
2 for usage or config-invariant errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, data
from .anchors import AnchorSet, annotation_widths, assign_anchors_to_levels, kmeans_anchors
from .autodiff import _sigmoid as stable_sigmoid
from .config import PipelineConfig, echo_config, load_pipeline_config
from .errors import ContractError, PipelineError
from .evaluation import build_report, emit_report
from .model import ModelConfig, build_model, decode, load_checkpoint, save_checkpoint
from .postprocess import (
    PemConfig,
    PemModel,
    ensemble_fuse,
    pem_rerank,
    snap_boundaries,
    soft_nms,
    tag_regions,
    train_pem,
)
from .training import train

log = logging.getLogger("actionprop")


def _config_from(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_pipeline_config(args.config)
    return PipelineConfig()


def _load_corpus_dir(path) -> data.SyntheticCorpus:
    root = Path(path)
    annotations = data.load_annotations(root / "annotations.json")
    features = {}
    for f in sorted((root / "features").glob("*.rapf")):
        features[f.stem] = data.read_feature_file(f)
    if not features:
        raise ContractError(f"no feature files under {root / 'features'}")
    actionness = {}
    oracle_path = root / "actionness_oracle.json"
    if oracle_path.exists():
        actionness = data.read_actionness(oracle_path)
    return data.SyntheticCorpus(annotations=annotations, features=features, actionness=actionness)


def _model_from_checkpoint(path):
    doc, arrays = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(doc["model"])
    anchor_set = AnchorSet.from_json_dict(doc["anchors"])
    net = build_model(model_cfg)
    net.load_state({k: v for k, v in arrays.items() if not k.startswith("optim/")})
    return net, anchor_set


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> dict:
    cfg = _config_from(args)
    corpus = data.generate_synthetic_corpus(cfg.data)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    data.save_annotations(out / "annotations.json", corpus.annotations)
    for vid, fmap in corpus.features.items():
        data.write_feature_file(out / "features" / f"{vid}.rapf", fmap)
    data.write_actionness(out / "actionness_oracle.json", corpus.actionness)
    echo_config(cfg, out)
    instances = sum(len(a.segments) for a in corpus.annotations.values())
    return {
        "command": "gen-data",
        "videos": len(corpus.annotations),
        "instances": instances,
        "training": len(corpus.subset_ids("training")),
        "validation": len(corpus.subset_ids("validation")),
        "out": str(out),
    }


def cmd_cluster_anchors(args) -> dict:
    cfg = _config_from(args)
    k = args.k if args.k is not None else cfg.anchors.k
    levels = args.levels if args.levels is not None else cfg.model.levels
    annotations = data.load_annotations(args.annotations)
    widths = annotation_widths(annotations)
    centroids = kmeans_anchors(widths, k, seed=cfg.anchors.seed)
    anchor_set = assign_anchors_to_levels(centroids, levels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(anchor_set.to_json_dict(), indent=1, sort_keys=True))
    return {
        "command": "cluster-anchors",
        "k": k,
        "levels": levels,
        "widths_clustered": len(widths),
        "out": str(out),
    }


def cmd_train(args) -> dict:
    cfg = _config_from(args)
    corpus = _load_corpus_dir(args.data)
    anchor_set = AnchorSet.from_json_dict(json.loads(Path(args.anchors).read_text()))
    if anchor_set.num_levels != cfg.model.levels:
        raise ContractError(
            f"anchor set has {anchor_set.num_levels} levels, model expects {cfg.model.levels}"
        )
    if anchor_set.anchors_per_level != cfg.model.anchors_per_level:
        raise ContractError(
            f"anchor set has {anchor_set.anchors_per_level} anchors per level, "
            f"model expects {cfg.model.anchors_per_level}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train
    train_cfg.checkpoint_path = str(out / "checkpoint.rapc")

    log.info("training on %d videos", len(corpus.subset_ids("training")))
    result = train(cfg.model, train_cfg, corpus, anchor_set)
    with (out / "train_log.jsonl").open("w") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    summary = {
        "command": "train",
        "epochs": train_cfg.epochs,
        "checkpoint": train_cfg.checkpoint_path,
        "initial_loss": result.log[0]["total"] if result.log else None,
        "final_loss": result.log[-1]["total"] if result.log else None,
    }

    if not args.skip_pem:
        records, curves = [], {}
        gts = {}
        for vid in corpus.subset_ids("training"):
            fmap = data.rescale_features(corpus.features[vid], cfg.model.input_t)
            preds = result.net.forward(fmap.values.astype(np.float64))
            curves[vid] = data.ActionnessCurve(vid, stable_sigmoid(preds.actionness_logits.data))
            decoded = decode(preds, anchor_set, cfg.model.input_t, vid)
            decoded.sort(key=lambda r: (-r.score, r.segment.start, r.segment.end))
            records.extend(decoded[:100])
            gts[vid] = corpus.annotations[vid].segments
        pem = train_pem(cfg.pem, records, curves, gts)
        pem_doc = {"pem": {f: getattr(cfg.pem, f) for f in cfg.pem.__dataclass_fields__}}
        save_checkpoint(out / "pem.rapc", pem_doc, pem.state_arrays())
        summary["pem_model"] = str(out / "pem.rapc")

    echo_config(cfg, out)
    return summary


def cmd_infer(args) -> dict:
    net, anchor_set = _model_from_checkpoint(args.checkpoint)
    cfg_t = net.config.input_t
    feature_dir = Path(args.features)
    paths = sorted(feature_dir.glob("*.rapf"))
    if not paths:
        raise ContractError(f"no feature files under {feature_dir}")
    if args.annotations:
        annotations = data.load_annotations(args.annotations)
        if args.subset != "all":
            keep = {v for v, a in annotations.items() if a.subset == args.subset}
        else:
            keep = set(annotations)
        paths = [p for p in paths if p.stem in keep]
        if not paths:
            raise ContractError(
                f"no feature files match subset {args.subset!r} of {args.annotations}"
            )

    def run_one(path):
        fmap = data.rescale_features(data.read_feature_file(path), cfg_t)
        preds = net.forward(fmap.values.astype(np.float64))
        curve = data.ActionnessCurve(fmap.video_id, stable_sigmoid(preds.actionness_logits.data))
        records = decode(preds, anchor_set, cfg_t, fmap.video_id)
        return fmap.video_id, records, curve

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run_one, paths))
    else:
        results = [run_one(p) for p in paths]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_records = [r for _, records, _ in results for r in records]
    data.write_proposals(out / "proposals.json", all_records)
    data.write_actionness(out / "actionness.json", {vid: c for vid, _, c in results})
    return {
        "command": "infer",
        "videos": len(results),
        "proposals": len(all_records),
        "out": str(out),
    }


def cmd_postprocess(args) -> dict:
    cfg = _config_from(args)
    if args.nms_sigma is not None:
        cfg.nms.sigma = args.nms_sigma
    proposals = data.read_proposals(args.proposals)
    actionness = data.read_actionness(args.actionness)

    pem_failures: dict[str, str] = {}
    if args.pem:
        if args.pem_oracle:
            if not args.gt:
                raise ContractError("--pem-oracle needs --gt for true IoU targets")
            pem = PemModel(cfg.pem, oracle_mode=True)
            gt_db = data.load_annotations(args.gt)
            gts = {vid: ann.segments for vid, ann in gt_db.items()}
            proposals, pem_failures = pem_rerank(pem, proposals, actionness, gts)
        else:
            if not args.pem_model:
                raise ContractError("--pem needs --pem-model (or --pem-oracle)")
            doc, arrays = load_checkpoint(args.pem_model)
            pem = PemModel(PemConfig.from_dict(doc["pem"]))
            pem.load_state(arrays)
            proposals, pem_failures = pem_rerank(pem, proposals, actionness)
        for vid, reason in pem_failures.items():
            log.warning("pem skipped video %s: %s", vid, reason)

    suppressed = {vid: soft_nms(records, cfg.nms) for vid, records in proposals.items()}

    if args.tag:
        adjusted = {}
        for vid, records in suppressed.items():
            if vid in actionness:
                regions = tag_regions(actionness[vid], cfg.tag)
                adjusted[vid] = snap_boundaries(records, regions, cfg.tag)
            else:
                adjusted[vid] = records
        suppressed = adjusted

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    flat = [r for records in suppressed.values() for r in records]
    data.write_proposals(out, flat)
    return {
        "command": "postprocess",
        "pem": bool(args.pem),
        "tag": bool(args.tag),
        "nms_sigma": cfg.nms.sigma,
        "videos": len(suppressed),
        "proposals": len(flat),
        "pem_skipped": len(pem_failures),
        "out": str(out),
    }


def cmd_ensemble(args) -> dict:
    cfg = _config_from(args)
    if args.nms_sigma is not None:
        cfg.nms.sigma = args.nms_sigma
    if len(args.results) < 2:
        raise ContractError("ensemble needs at least two results files")
    lists = [data.read_proposals(p) for p in args.results]
    names = [Path(p).stem for p in args.results]
    result = ensemble_fuse(lists, cfg.nms, names)
    if result.missing_warnings:
        log.warning("%d videos missing from some sources", result.missing_warnings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    flat = [r for records in result.fused.values() for r in records]
    data.write_proposals(out, flat)
    return {
        "command": "ensemble",
        "sources": names,
        "videos": len(result.fused),
        "missing_warnings": result.missing_warnings,
        "out": str(out),
    }


def cmd_eval(args) -> dict:
    cfg = _config_from(args)
    subset = args.subset or cfg.eval.subset
    annotations = data.load_annotations(args.gt)
    gts = {
        vid: ann.segments
        for vid, ann in annotations.items()
        if subset == "all" or ann.subset == subset
    }
    proposals = data.read_proposals(args.proposals)
    report = build_report(
        proposals, gts,
        tiou_grid=cfg.eval.tiou_grid,
        an_max=cfg.eval.an_max,
        config={"subset": subset, "tiou_grid": list(cfg.eval.tiou_grid), "an_max": cfg.eval.an_max},
    )
    out = Path(args.out)
    paths = emit_report(report, out)
    echo_config(cfg, out)
    return {
        "command": "eval",
        "subset": subset,
        **{k: report.metrics[k] for k in sorted(report.metrics)},
        "files": [str(p) for p in paths],
    }


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionprop",
        description="Temporal action proposal pipeline: synthetic data, anchor "
        "clustering, pyramid-network training, boundary adjustment, AR@AN/AUC evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"actionprop {__version__}")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for per-video stages (1 = fully serial)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate the deterministic synthetic corpus")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("cluster-anchors", help="k-means anchor widths from annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--k", type=int, help="number of anchors (default from config)")
    p.add_argument("--levels", type=int, help="pyramid levels to spread anchors over")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="anchors JSON path")
    p.set_defaults(func=cmd_cluster_anchors)

    p = sub.add_parser("train", help="train the proposal network (and the PEM scorer)")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--anchors", required=True, help="anchors JSON from cluster-anchors")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--skip-pem", action="store_true", help="do not fit the PEM scorer")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decode raw proposals and actionness curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="directory of .rapf files")
    p.add_argument("--annotations", help="restrict to videos in this annotation file")
    p.add_argument("--subset", default="all", choices=["training", "validation", "testing", "all"])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("postprocess", help="PEM re-rank, soft-NMS, TAG boundary snapping")
    p.add_argument("--proposals", required=True)
    p.add_argument("--actionness", required=True)
    p.add_argument("--pem", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--pem-model", help="pem.rapc from train")
    p.add_argument("--pem-oracle", action="store_true", help="score by true IoU (testing)")
    p.add_argument("--gt", help="annotations for --pem-oracle")
    p.add_argument("--tag", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--nms-sigma", type=float)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output proposals JSON path")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("ensemble", help="fuse proposal lists from several models")
    p.add_argument("results", nargs="+", help="two or more proposal JSON files")
    p.add_argument("--nms-sigma", type=float)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="AR@AN and AUC against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--subset", choices=["training", "validation", "testing", "all"])
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        summary = args.func(args)
    except ContractError as exc:
        log.error("%s", exc)
        return 2
    except PipelineError as exc:
        log.error("%s", exc)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

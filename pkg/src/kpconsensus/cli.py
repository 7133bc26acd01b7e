"""Command-line entry point.

Subcommands::

    kpconsensus consensus --predictions P [--annotations DIR] --out F
    kpconsensus partbox   --consensus C [--proposals P] --out F
    kpconsensus evaluate  --consensus C --annotations DIR --std S [--proposals P | --partboxes B] --out F
    kpconsensus prepare   --annotations DIR --proposals P --out F
    kpconsensus simulate  [--dump DIR] --out F

Every command reads an optional JSON ``--config`` document; command-line
flags override it and the fully resolved configuration is written into the
header of every output.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from kpconsensus import io
from kpconsensus.consensus import AUTO, PRESETS, ConsensusConfig, ConsensusResult, Method, consensus_image
from kpconsensus.geometry import containment_fraction, iou
from kpconsensus.metrics import evaluate
from kpconsensus.partbox import PartDefinition, ScoredBox, gt_part_boxes, predicted_part_boxes
from kpconsensus.records import NUM_KEYPOINTS, PredictionSet, RecordError, group_by_image, natural_key
from kpconsensus.simulator import (
    DEFAULT_BOX_COUNTS,
    NoiseModel,
    format_sweep,
    run_sweep,
    simulate_predictions,
    stable_id,
    synthetic_dataset,
)
from kpconsensus.training_prep import MAX_BACKGROUND, prepare_image

DEFAULT_PARTS = {
    "head": ["beak", "crown", "forehead", "eyes", "nape", "throat"],
    "torso": ["back", "breast", "wings", "tail", "throat", "belly", "legs"],
}


@dataclass
class SimulateConfig:
    n_images: int = 40
    n_proposals: int = 1000
    box_counts: list[int] = field(default_factory=lambda: list(DEFAULT_BOX_COUNTS))
    noise: dict = field(default_factory=dict)
    annotator_std: float = 5.0


@dataclass
class RunConfig:
    """Declarative run configuration; ``None`` thresholds defer to the preset."""

    preset: Optional[str] = None
    visibility_threshold: Optional[float] = None
    z_threshold: Optional[float] = None
    lam: float = 0.6745
    method: str = "inliers"
    bandwidth: object = AUTO
    inlier_location: str = "filtered"
    shift_inliers: str = "zscore"
    top_k: int = 600
    gt_min_containment: float = 0.5
    gt_min_iou: float = 0.2
    parts: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_PARTS.items()})
    body_containment_min: float = 0.9
    body_iou_min: float = 0.5
    ae_units: str = "std"
    ae_cap: float = 5.0
    coord_shift: float = 0.0
    max_background: int = MAX_BACKGROUND
    flip: bool = True
    seed: int = 0
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "simulate" in d:
            sim = d["simulate"] or {}
            sk = {f.name for f in fields(SimulateConfig)}
            if set(sim) - sk:
                raise ValueError(f"unknown simulate config keys: {sorted(set(sim) - sk)}")
            d["simulate"] = SimulateConfig(**sim)
        return cls(**d)

    def consensus_config(self, has_gt_box: bool) -> ConsensusConfig:
        preset = self.preset or ("gt-box" if has_gt_box else "no-gt-box")
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        base = PRESETS[preset]
        return replace(
            base,
            visibility_threshold=base.visibility_threshold if self.visibility_threshold is None else self.visibility_threshold,
            z_threshold=base.z_threshold if self.z_threshold is None else self.z_threshold,
            lam=self.lam,
            method=Method(self.method),
            bandwidth=self.bandwidth,
            inlier_location=self.inlier_location,
            shift_inliers=self.shift_inliers,
        )

    def part_definitions(self) -> list[PartDefinition]:
        return [PartDefinition.from_names(name, members) for name, members in self.parts.items()]

    def noise_model(self) -> NoiseModel:
        nm = dict(self.simulate.noise)
        nm.setdefault("seed", self.seed)
        for key in ("conf_visible", "conf_invisible"):
            if key in nm:
                nm[key] = tuple(nm[key])
        return NoiseModel(**nm)

    def resolved(self, has_gt_box: bool) -> dict:
        """Fully specified configuration for provenance headers."""
        cc = self.consensus_config(has_gt_box)
        d = asdict(self)
        d["preset"] = self.preset or ("gt-box" if has_gt_box else "no-gt-box")
        d["visibility_threshold"] = cc.visibility_threshold
        d["z_threshold"] = cc.z_threshold
        d["simulate"]["noise"] = asdict(self.noise_model())
        return d


class CLIError(Exception):
    pass


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CLIError(f"{args.config}: invalid JSON: {e}") from None
        if not isinstance(data, dict):
            raise CLIError(f"{args.config}: config must be a JSON object")
        cfg = RunConfig.from_dict(data)
    overrides = {}
    for flag, key in (("preset", "preset"), ("method", "method"), ("top_k", "top_k"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    cfg = replace(cfg, **overrides)
    cfg.consensus_config(True)  # validate early
    return cfg


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    """Order-preserving map, threaded when ``threads > 1``."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _top_k(preds: Sequence[PredictionSet], k: int) -> list[PredictionSet]:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].box_score, i))
    return [preds[i] for i in order[:k]]


def _candidates(proposals: Sequence[PredictionSet], k: int) -> list[ScoredBox]:
    return [ScoredBox(p.box, p.box_score) for p in _top_k(proposals, k)]


def _load_annotations(args, cfg: RunConfig):
    return io.load_cub_annotations(args.annotations, coord_shift=cfg.coord_shift).by_id()


# -- commands -----------------------------------------------------------------

def cmd_consensus(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    has_gt = bool(args.annotations)
    cc = cfg.consensus_config(has_gt)
    anns = _load_annotations(args, cfg) if has_gt else {}
    by_image = group_by_image(io.load_predictions(args.predictions))

    def work(item):
        iid, preds = item
        if has_gt:
            if iid not in anns:
                raise CLIError(f"no annotation for image {iid}")
            gt = anns[iid].object_box
            preds = [
                p for p in preds
                if containment_fraction(p.box, gt) >= cfg.gt_min_containment and iou(p.box, gt) >= cfg.gt_min_iou
            ]
            n = anns[iid].num_keypoints
        else:
            preds = _top_k(preds, cfg.top_k)
            n = None
        return iid, consensus_image(preds, cfg=cc, num_keypoints=n)

    results = dict(_map(work, list(by_image.items()), args.threads))
    io.save_consensus(args.out, results, {"config": cfg.resolved(has_gt)})


def _part_boxes(cfg: RunConfig, results: dict[str, list[ConsensusResult]], proposals: dict, threads: int):
    parts = cfg.part_definitions()

    def work(iid):
        cands = _candidates(proposals.get(iid, []), cfg.top_k)
        return iid, predicted_part_boxes(results[iid], cands, parts, cfg.body_containment_min, cfg.body_iou_min)

    return dict(_map(work, sorted(results, key=natural_key), threads))


def cmd_partbox(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    results = io.load_consensus(args.consensus)
    proposals = group_by_image(io.load_predictions(args.proposals)) if args.proposals else {}
    boxes = _part_boxes(cfg, results, proposals, args.threads)
    io.save_partboxes(args.out, boxes, {"config": cfg.resolved(False)})


def cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    anns = _load_annotations(args, cfg)
    std = io.load_annotator_std(args.std)
    results = io.load_consensus(args.consensus)
    missing = [iid for iid in results if iid not in anns]
    if missing:
        raise CLIError(f"no annotation for images {sorted(missing, key=natural_key)}")
    if args.partboxes:
        pboxes = io.load_partboxes(args.partboxes)
    else:
        proposals = group_by_image(io.load_predictions(args.proposals)) if args.proposals else {}
        pboxes = _part_boxes(cfg, results, proposals, args.threads)
    ids = sorted(results, key=natural_key)
    gts = [anns[i] for i in ids]
    parts = cfg.part_definitions()
    report = evaluate(
        [results[i] for i in ids],
        gts,
        std,
        part_boxes=[pboxes.get(i, {}) for i in ids],
        gt_boxes=[gt_part_boxes(a, parts) for a in gts],
        ae_units=cfg.ae_units,
        ae_cap=cfg.ae_cap,
    )
    io.save_report(args.out, report, {"config": cfg.resolved(True), "images": len(ids)})


def cmd_prepare(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    anns = _load_annotations(args, cfg)
    proposals = group_by_image(io.load_predictions(args.proposals))
    ids = [i for i in sorted(anns, key=natural_key) if i in proposals]

    def work(iid):
        rects = [p.box for p in proposals[iid]]
        return prepare_image(anns[iid], rects, seed=[cfg.seed, stable_id(iid)], max_bg=cfg.max_background,
                             flip=cfg.flip)

    examples = [e for chunk in _map(work, ids, args.threads) for e in chunk]
    io.save_manifest(args.out, examples, {"config": cfg.resolved(True)})


def cmd_simulate(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    sim = cfg.simulate
    nm = cfg.noise_model()
    cc = cfg.consensus_config(False)
    dataset = synthetic_dataset(sim.n_images, sim.n_proposals, cfg.seed)
    rows = run_sweep(dataset, nm, sorted(sim.box_counts, reverse=True), cc, cfg.part_definitions(), args.threads)
    header = "# config: " + io.dumps(cfg.resolved(False)) + "\n"
    Path(args.out).write_text(header + format_sweep(rows), encoding="utf-8")
    if args.dump:
        dump_synthetic(Path(args.dump), dataset, nm, cfg)


def dump_synthetic(root: Path, dataset, nm: NoiseModel, cfg: RunConfig) -> None:
    """Write a synthetic dataset as CUB files plus proposal and prediction files."""
    root.mkdir(parents=True, exist_ok=True)
    io.write_cub_annotations([im.annotation for im in dataset], root)
    (root / "annotator_std.txt").write_text(
        "".join(f"{p} {cfg.simulate.annotator_std!r}\n" for p in range(1, NUM_KEYPOINTS + 1)), encoding="utf-8"
    )
    proposals, preds = [], []
    for im in dataset:
        proposals += [PredictionSet(im.annotation.image_id, s.rect, s.score) for s in im.proposals]
        top = im.proposals[: cfg.top_k]
        preds += simulate_predictions(im.annotation, [s.rect for s in top], nm, [s.score for s in top])
    meta = {"config": cfg.resolved(False)}
    io.save_predictions(root / "proposals.jsonl", proposals, meta)
    io.save_predictions(root / "predictions.jsonl", preds, meta)


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpconsensus", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", choices=sorted(PRESETS), help="threshold preset")
        p.add_argument("--method", choices=[m.value for m in Method], help="consensus method")
        p.add_argument("--top-k", type=int, dest="top_k", help="proposals kept by score (no GT box)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (output is identical)")
        p.add_argument("--out", required=out_required, help="output file")

    p = sub.add_parser("consensus", help="per-keypoint consensus from proposal predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", help="CUB directory; enables the GT-box proposal filter")
    common(p)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("partbox", help="head/torso/body boxes from a consensus file")
    p.add_argument("--consensus", required=True)
    p.add_argument("--proposals", help="scored proposals for whole-body expansion")
    common(p)
    p.set_defaults(func=cmd_partbox)

    p = sub.add_parser("evaluate", help="PCP, AE, FVR, FIR and part accuracy")
    p.add_argument("--consensus", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--std", required=True, help="annotator std file: '<part_id> <sigma>' lines")
    p.add_argument("--proposals")
    p.add_argument("--partboxes", help="precomputed part boxes (overrides --proposals)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("prepare", help="training-crop manifest")
    p.add_argument("--annotations", required=True)
    p.add_argument("--proposals", required=True)
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("simulate", help="synthetic boxes-vs-accuracy sweep")
    p.add_argument("--dump", help="also write the synthetic dataset, proposals and predictions here")
    common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("kpconsensus: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (CLIError, io.AnnotationError, io.SchemaError, RecordError, ValueError, OSError) as e:
        print(f"kpconsensus {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Readers and writers for CUB annotations and the package's JSON-lines files.

Every JSON-lines file starts with a header record naming its format and
schema version; each following line is one record. Writers are canonical:
keys sorted, no insignificant whitespace, floats in shortest round-trip
form (optionally rounded to a fixed number of significant digits), so the
same data always produces the same bytes.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

import numpy as np

from kpconsensus.consensus import ConsensusResult, KeypointObservation
from kpconsensus.geometry import Point, Rect
from kpconsensus.metrics import ErrorTally, EvalReport, Tally
from kpconsensus.records import (
    KEYPOINT_NAMES,
    NUM_KEYPOINTS,
    ImageAnnotation,
    Keypoint,
    PredictionSet,
    RecordError,
    natural_key,
)

SCHEMA_VERSION = 1
PREDICTIONS = "kpconsensus.predictions"
CONSENSUS = "kpconsensus.consensus"
REPORT = "kpconsensus.report"
PARTBOXES = "kpconsensus.partboxes"
MANIFEST = "kpconsensus.manifest"


def toy_cub_root() -> Path:
    """Directory of the packaged five-image CUB-format fixture.

    Besides the CUB files it holds ``annotator_std.txt``, ``proposals.jsonl``
    (40 scored boxes per image) and ``predictions.jsonl`` (simulated
    network output for those boxes).
    """
    return Path(__file__).parent / "data" / "toy_cub"


class AnnotationError(ValueError):
    """Malformed or inconsistent CUB annotation files."""

    def __init__(self, message: str, path: Optional[os.PathLike] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class SchemaError(ValueError):
    pass


# -- CUB ---------------------------------------------------------------------

@dataclass
class CubDataset:
    annotations: list[ImageAnnotation]
    part_names: tuple[str, ...] = KEYPOINT_NAMES

    def __len__(self) -> int:
        return len(self.annotations)

    def __iter__(self) -> Iterator[ImageAnnotation]:
        return iter(self.annotations)

    def by_id(self) -> dict[str, ImageAnnotation]:
        return {a.image_id: a for a in self.annotations}

    def split(self, train: bool) -> list[ImageAnnotation]:
        return [a for a in self.annotations if a.is_train is train]


def _records(path: Path, ncols: int, exact: bool = True) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split() if exact else line.rstrip("\n").split(None, ncols - 1)
            if len(parts) != ncols:
                raise AnnotationError(f"expected {ncols} fields, got {len(parts)}", path, lineno)
            yield lineno, parts


def _num(s: str, path, lineno, kind=float):
    try:
        v = kind(s)
    except ValueError:
        raise AnnotationError(f"not a number: {s!r}", path, lineno) from None
    if kind is float and not math.isfinite(v):
        raise AnnotationError(f"non-finite value {s!r}", path, lineno)
    return v


def _find(root: Path, name: str, required: bool = True) -> Optional[Path]:
    for cand in (root / name, root / "parts" / name):
        if cand.is_file():
            return cand
    if required:
        raise AnnotationError(f"missing {name}", root)
    return None


def load_cub_annotations(root: os.PathLike, coord_shift: float = 0.0, num_parts: int = NUM_KEYPOINTS) -> CubDataset:
    """Parse a CUB-200-2011 style directory.

    Reads ``images.txt``, ``bounding_boxes.txt``, ``part_locs.txt`` (at the
    root or under ``parts/``) and, when present, ``train_test_split.txt``,
    ``image_class_labels.txt`` and ``image_sizes.txt``. Coordinates are
    taken as-is; pass ``coord_shift=-1`` to convert 1-based pixel positions.
    Invisible keypoints keep whatever coordinates the file stores (usually 0, 0).

    Raises:
        AnnotationError: missing file, malformed line, or inconsistent ids.
    """
    root = Path(root)
    images_path = _find(root, "images.txt")
    paths: dict[int, str] = {}
    for lineno, (sid, rel) in _records(images_path, 2, exact=False):
        iid = _num(sid, images_path, lineno, int)
        if iid in paths:
            raise AnnotationError(f"duplicate image id {iid}", images_path, lineno)
        paths[iid] = rel.strip()

    def known(iid: int, path: Path, lineno: int) -> int:
        if iid not in paths:
            raise AnnotationError(f"image id {iid} not in images.txt", path, lineno)
        return iid

    bb_path = _find(root, "bounding_boxes.txt")
    boxes: dict[int, Rect] = {}
    for lineno, parts in _records(bb_path, 5):
        iid = known(_num(parts[0], bb_path, lineno, int), bb_path, lineno)
        x, y, w, h = (_num(p, bb_path, lineno) for p in parts[1:])
        try:
            boxes[iid] = Rect(x + coord_shift, y + coord_shift, w, h)
        except ValueError as e:
            raise AnnotationError(str(e), bb_path, lineno) from None

    pl_path = _find(root, "part_locs.txt")
    kps: dict[int, dict[int, Keypoint]] = {}
    for lineno, parts in _records(pl_path, 5):
        iid = known(_num(parts[0], pl_path, lineno, int), pl_path, lineno)
        pid = _num(parts[1], pl_path, lineno, int)
        if not 1 <= pid <= num_parts:
            raise AnnotationError(f"part id {pid} outside 1..{num_parts}", pl_path, lineno)
        x, y = _num(parts[2], pl_path, lineno), _num(parts[3], pl_path, lineno)
        vis = _num(parts[4], pl_path, lineno, int)
        if vis not in (0, 1):
            raise AnnotationError(f"visibility flag must be 0 or 1, got {vis}", pl_path, lineno)
        slot = kps.setdefault(iid, {})
        if pid in slot:
            raise AnnotationError(f"duplicate part {pid} for image {iid}", pl_path, lineno)
        if vis:
            x, y = x + coord_shift, y + coord_shift
        slot[pid] = Keypoint(x, y, bool(vis))

    split: dict[int, bool] = {}
    sp_path = _find(root, "train_test_split.txt", required=False)
    if sp_path is not None:
        for lineno, parts in _records(sp_path, 2):
            iid = known(_num(parts[0], sp_path, lineno, int), sp_path, lineno)
            flag = _num(parts[1], sp_path, lineno, int)
            if flag not in (0, 1):
                raise AnnotationError(f"split flag must be 0 or 1, got {flag}", sp_path, lineno)
            split[iid] = bool(flag)

    labels: dict[int, str] = {}
    lb_path = _find(root, "image_class_labels.txt", required=False)
    if lb_path is not None:
        for lineno, parts in _records(lb_path, 2):
            labels[known(_num(parts[0], lb_path, lineno, int), lb_path, lineno)] = parts[1]

    sizes: dict[int, tuple[float, float]] = {}
    sz_path = _find(root, "image_sizes.txt", required=False)
    if sz_path is not None:
        for lineno, parts in _records(sz_path, 3):
            iid = known(_num(parts[0], sz_path, lineno, int), sz_path, lineno)
            sizes[iid] = (_num(parts[1], sz_path, lineno), _num(parts[2], sz_path, lineno))

    annotations = []
    for iid in sorted(paths):
        if iid not in boxes:
            raise AnnotationError(f"image {iid} has no bounding box", bb_path)
        slot = kps.get(iid, {})
        if len(slot) != num_parts:
            raise AnnotationError(f"image {iid} has {len(slot)} of {num_parts} parts", pl_path)
        w, h = sizes.get(iid, (None, None))
        label = labels.get(iid, paths[iid].split("/", 1)[0] if "/" in paths[iid] else "")
        try:
            ann = ImageAnnotation(
                image_id=str(iid),
                keypoints=tuple(slot[p] for p in range(1, num_parts + 1)),
                object_box=boxes[iid],
                width=w,
                height=h,
                class_label=label,
                is_train=split.get(iid),
                path=paths[iid],
            )
        except RecordError as e:
            raise AnnotationError(str(e), pl_path) from None
        annotations.append(ann)
    return CubDataset(annotations)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cub_annotations(dataset: Iterable[ImageAnnotation], root: os.PathLike) -> None:
    """Inverse of :func:`load_cub_annotations` (image ids must be integers)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    anns = sorted(dataset, key=lambda a: int(a.image_id))
    lines = {k: [] for k in ("images", "bounding_boxes", "part_locs", "train_test_split", "image_class_labels", "image_sizes")}
    for a in anns:
        iid = int(a.image_id)
        lines["images"].append(f"{iid} {a.path or f'{iid}.jpg'}")
        b = a.object_box
        lines["bounding_boxes"].append(f"{iid} {_fmt(b.x)} {_fmt(b.y)} {_fmt(b.w)} {_fmt(b.h)}")
        for p, kp in enumerate(a.keypoints, 1):
            lines["part_locs"].append(f"{iid} {p} {_fmt(kp.x)} {_fmt(kp.y)} {int(kp.visible)}")
        if a.is_train is not None:
            lines["train_test_split"].append(f"{iid} {int(a.is_train)}")
        if a.class_label:
            lines["image_class_labels"].append(f"{iid} {a.class_label}")
        if a.width is not None and a.height is not None:
            lines["image_sizes"].append(f"{iid} {_fmt(a.width)} {_fmt(a.height)}")
    for name, rows in lines.items():
        if rows or name in ("images", "bounding_boxes", "part_locs"):
            (root / f"{name}.txt").write_text("".join(r + "\n" for r in rows), encoding="utf-8")


def load_annotator_std(path: os.PathLike, num_parts: int = NUM_KEYPOINTS):
    """Read ``<part_id> <sigma>`` lines into an :class:`~kpconsensus.metrics.AnnotatorStd`."""
    from kpconsensus.metrics import AnnotatorStd

    path = Path(path)
    if not path.is_file():
        raise AnnotationError("missing annotator std file", path)
    sig: dict[int, float] = {}
    for lineno, parts in _records(path, 2):
        pid = _num(parts[0], path, lineno, int)
        if not 1 <= pid <= num_parts:
            raise AnnotationError(f"part id {pid} outside 1..{num_parts}", path, lineno)
        s = _num(parts[1], path, lineno)
        if s <= 0:
            raise AnnotationError(f"sigma must be positive, got {s}", path, lineno)
        sig[pid] = s
    missing = [p for p in range(1, num_parts + 1) if p not in sig]
    if missing:
        raise AnnotationError(f"no sigma for parts {missing}", path)
    return AnnotatorStd(tuple(sig[p] for p in range(1, num_parts + 1)))


# -- JSON lines --------------------------------------------------------------

def _canon(obj: Any, digits: Optional[int]) -> Any:
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise RecordError(f"non-finite number {x!r} cannot be written")
        if digits is not None and x != 0.0:
            x = float(f"{x:.{digits}g}")
        return x
    if isinstance(obj, dict):
        return {str(k): _canon(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_canon(v, digits) for v in obj]
    return obj


def dumps(obj: Any, digits: Optional[int] = None) -> str:
    return json.dumps(_canon(obj, digits), sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path: os.PathLike, fmt: str, records: Iterable[dict], meta: Optional[dict] = None,
                digits: Optional[int] = None) -> None:
    header = {"format": fmt, "version": SCHEMA_VERSION}
    if meta:
        header.update(meta)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(header, digits) + "\n")
        for r in records:
            f.write(dumps(r, digits) + "\n")


def read_jsonl(path: os.PathLike, fmt: str) -> tuple[dict, list[dict]]:
    """Return ``(header, records)``, checking format and schema version."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = [(i, ln) for i, ln in enumerate(f, 1) if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: missing header record")

    def parse(i, ln):
        try:
            return json.loads(ln, parse_constant=lambda c: _reject_constant(c, path, i))
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{i}: invalid JSON: {e.msg}") from None

    header = parse(*lines[0])
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise SchemaError(f"{path}: expected format {fmt!r}, got {header.get('format') if isinstance(header, dict) else header!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {header.get('version')!r}")
    return header, [parse(i, ln) for i, ln in lines[1:]]


def _reject_constant(c, path, line):
    raise RecordError(f"{c} is not allowed", f"{path}:{line}")


def _field(rec: dict, key: str, where: str):
    if key not in rec:
        raise RecordError("missing field", f"{where}.{key}")
    return rec[key]


def _rect(v, where: str) -> Rect:
    try:
        return Rect(*(float(x) for x in v))
    except (TypeError, ValueError) as e:
        raise RecordError(str(e), where) from None


def prediction_to_record(p: PredictionSet) -> dict:
    return {
        "image_id": p.image_id,
        "box": p.box.as_list(),
        "box_score": p.box_score,
        "loc": p.loc.tolist(),
        "vis": p.vis.tolist(),
    }


def save_predictions(path: os.PathLike, preds: Iterable[PredictionSet], meta: Optional[dict] = None) -> None:
    write_jsonl(path, PREDICTIONS, (prediction_to_record(p) for p in preds), meta)


def load_predictions(path: os.PathLike) -> list[PredictionSet]:
    """Load prediction (or proposal-only) records. Invalid values raise :class:`RecordError`."""
    _, recs = read_jsonl(path, PREDICTIONS)
    out = []
    for i, r in enumerate(recs):
        where = f"record[{i}]"
        try:
            out.append(
                PredictionSet(
                    image_id=str(_field(r, "image_id", where)),
                    box=_rect(_field(r, "box", where), f"{where}.box"),
                    box_score=float(r.get("box_score", 0.0)),
                    loc=np.asarray(r.get("loc", []), dtype=float).reshape(-1, 2),
                    vis=np.asarray(r.get("vis", []), dtype=float),
                )
            )
        except RecordError as e:
            raise RecordError(e.message, f"{where}.{e.field}") from None
        except (TypeError, ValueError) as e:
            raise RecordError(str(e), where) from None
    return out


def _obs_rec(o: KeypointObservation) -> list:
    return [o.location[0], o.location[1], o.confidence, o.source_box_id]


def _obs(v, where: str) -> KeypointObservation:
    try:
        x, y, c, b = v
        return KeypointObservation(Point(float(x), float(y)), float(c), b)
    except (TypeError, ValueError) as e:
        raise RecordError(str(e), where) from None


def consensus_to_record(image_id: str, k: int, r: ConsensusResult, names: Sequence[str] = KEYPOINT_NAMES) -> dict:
    return {
        "image_id": image_id,
        "keypoint": k,
        "name": names[k] if k < len(names) else str(k),
        "visible": r.visible,
        "location": list(r.location) if r.location is not None else None,
        "inliers": [_obs_rec(o) for o in r.inliers],
        "filtered": [_obs_rec(o) for o in r.all_filtered],
    }


def save_consensus(path: os.PathLike, results: dict[str, Sequence[ConsensusResult]], meta: Optional[dict] = None) -> None:
    """Write one record per (image, keypoint), images in natural id order."""
    recs = (
        consensus_to_record(iid, k, r)
        for iid in sorted(results, key=natural_key)
        for k, r in enumerate(results[iid])
    )
    write_jsonl(path, CONSENSUS, recs, meta)


def load_consensus(path: os.PathLike) -> dict[str, list[ConsensusResult]]:
    _, recs = read_jsonl(path, CONSENSUS)
    out: dict[str, dict[int, ConsensusResult]] = {}
    for i, r in enumerate(recs):
        where = f"record[{i}]"
        loc = _field(r, "location", where)
        try:
            res = ConsensusResult(
                visible=bool(_field(r, "visible", where)),
                location=None if loc is None else Point(float(loc[0]), float(loc[1])),
                inliers=tuple(_obs(o, f"{where}.inliers[{j}]") for j, o in enumerate(r.get("inliers", []))),
                all_filtered=tuple(_obs(o, f"{where}.filtered[{j}]") for j, o in enumerate(r.get("filtered", []))),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, RecordError):
                raise
            raise RecordError(str(e), where) from None
        slot = out.setdefault(str(_field(r, "image_id", where)), {})
        k = int(_field(r, "keypoint", where))
        if k in slot:
            raise RecordError(f"duplicate keypoint {k}", where)
        slot[k] = res
    result = {}
    for iid, slot in out.items():
        if sorted(slot) != list(range(len(slot))):
            raise RecordError(f"keypoints {sorted(slot)} are not contiguous from 0", f"image {iid}")
        result[iid] = [slot[k] for k in range(len(slot))]
    return result


def _tally_rec(metric: str, group: Optional[str], t: Tally) -> dict:
    return {"metric": metric, "group": group, "num": t.num, "den": t.den, "value": t.value}


def report_to_records(rep: EvalReport) -> list[dict]:
    recs = [_tally_rec("pcp", None, rep.pcp_total)]
    recs += [_tally_rec("pcp_keypoint", n, t) for n, t in rep.pcp_per_keypoint.items()]
    recs += [_tally_rec("pcp_part", n, t) for n, t in rep.pcp_per_part.items()]
    recs.append({"metric": "ae", "group": rep.ae_units, "total": rep.ae.total, "count": rep.ae.count, "value": rep.ae.value})
    recs.append(_tally_rec("fvr", None, rep.fvr))
    recs.append(_tally_rec("fir", None, rep.fir))
    recs += [_tally_rec("part_acc", n, t) for n, t in rep.part_acc.items()]
    return recs


def save_report(path: os.PathLike, rep: EvalReport, meta: Optional[dict] = None, digits: Optional[int] = 6) -> None:
    """Write an evaluation report; derived ``value`` fields are rounded to ``digits`` significant digits."""
    recs = report_to_records(rep)
    if digits is not None:
        for r in recs:
            if r["value"] is not None:
                r["value"] = _canon(r["value"], digits)
    write_jsonl(path, REPORT, recs, meta)


def load_report(path: os.PathLike) -> EvalReport:
    _, recs = read_jsonl(path, REPORT)
    rep = EvalReport({}, {}, Tally(), ErrorTally(), Tally(), Tally(), {})
    for i, r in enumerate(recs):
        m = _field(r, "metric", f"record[{i}]")
        if m == "ae":
            rep.ae = ErrorTally(float(r["total"]), int(r["count"]))
            rep.ae_units = r["group"]
            continue
        t = Tally(int(r["num"]), int(r["den"]))
        if m == "pcp":
            rep.pcp_total = t
        elif m == "pcp_keypoint":
            rep.pcp_per_keypoint[r["group"]] = t
        elif m == "pcp_part":
            rep.pcp_per_part[r["group"]] = t
        elif m == "fvr":
            rep.fvr = t
        elif m == "fir":
            rep.fir = t
        elif m == "part_acc":
            rep.part_acc[r["group"]] = t
        else:
            raise RecordError(f"unknown metric {m!r}", f"record[{i}].metric")
    return rep


def save_partboxes(path: os.PathLike, boxes: dict[str, dict[str, Optional[Rect]]], meta: Optional[dict] = None) -> None:
    recs = (
        {"image_id": iid, **{name: (b.as_list() if b is not None else None) for name, b in boxes[iid].items()}}
        for iid in sorted(boxes, key=natural_key)
    )
    write_jsonl(path, PARTBOXES, recs, meta)


def load_partboxes(path: os.PathLike) -> dict[str, dict[str, Optional[Rect]]]:
    _, recs = read_jsonl(path, PARTBOXES)
    out = {}
    for i, r in enumerate(recs):
        where = f"record[{i}]"
        iid = str(_field(r, "image_id", where))
        out[iid] = {k: (None if v is None else _rect(v, f"{where}.{k}")) for k, v in r.items() if k != "image_id"}
    return out


def example_to_record(ex) -> dict:
    """Manifest record; location targets of absent keypoints are written as null."""
    l = [None if v == 0 else [float(a), float(b)] for v, (a, b) in zip(ex.targets_v, ex.targets_l)]
    return {
        "image_id": ex.image_id,
        "box": ex.box.as_list(),
        "padded_box": ex.padded_box.as_list(),
        "v": ex.targets_v.tolist(),
        "l": l,
        "flip": ex.flipped,
        "background": ex.is_background,
    }


def save_manifest(path: os.PathLike, examples: Iterable, meta: Optional[dict] = None) -> None:
    write_jsonl(path, MANIFEST, (example_to_record(e) for e in examples), meta)


def load_manifest(path: os.PathLike) -> list:
    from kpconsensus.training_prep import TrainingExample

    _, recs = read_jsonl(path, MANIFEST)
    out = []
    for i, r in enumerate(recs):
        where = f"record[{i}]"
        v = np.asarray(_field(r, "v", where), dtype=np.int8)
        l = np.array([[np.nan, np.nan] if e is None else e for e in _field(r, "l", where)], dtype=float).reshape(-1, 2)
        out.append(
            TrainingExample(
                box=_rect(r["box"], f"{where}.box"),
                padded_box=_rect(r["padded_box"], f"{where}.padded_box"),
                targets_v=v,
                targets_l=l,
                is_background=bool(r["background"]),
                flipped=bool(r["flip"]),
                image_id=str(r["image_id"]),
            )
        )
    return out

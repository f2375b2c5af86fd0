import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import InvalidInputError
from .images import read_image
from .metrics import mae_angular, psnr, ssim

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
IMAGE_SUFFIXES = (".pfm", ".png")
CSV_FIELDS = ["path", "kind", "psnr", "ssim", "mae"]


@dataclass
class EvalRow:
    """Metrics of one prediction/ground-truth pair."""

    path: str
    kind: str
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    mae: Optional[float] = None

    def as_csv(self) -> Dict[str, Any]:
        def fmt(v: Optional[float]) -> str:
            if v is None:
                return ""
            return "inf" if math.isinf(v) else f"{v:.6f}"
        return {"path": self.path, "kind": self.kind, "psnr": fmt(self.psnr),
                "ssim": fmt(self.ssim), "mae": fmt(self.mae)}


def _is_normal_map(path: Path) -> bool:
    return path.stem.startswith("normal")


def pair_files(pred_dir: Union[str, Path], gt_dir: Union[str, Path]) -> Tuple[List[Tuple[Path, Path]], List[str]]:
    """
    Match ground-truth images to predictions by relative path.

    Returns:
        Tuple of (matched pairs, relative paths with no prediction).

    Raises:
        InvalidInputError: If either directory does not exist.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise InvalidInputError(f"directory not found: {d}")
    pairs, missing = [], []
    for gt in sorted(p for p in gt_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
        rel = gt.relative_to(gt_dir)
        pred = pred_dir / rel
        if pred.is_file():
            pairs.append((pred, gt))
        else:
            missing.append(str(rel))
    return pairs, missing


def evaluate_pair(pred: Path, gt: Path, rel: str) -> EvalRow:
    """Normals get the angular error, everything else PSNR and SSIM."""
    a, b = read_image(pred), read_image(gt)
    if a.shape != b.shape:
        raise InvalidInputError(f"{rel}: prediction {tuple(a.shape)} vs ground truth {tuple(b.shape)}")
    if _is_normal_map(gt):
        return EvalRow(path=rel, kind="normal", mae=mae_angular(a, b))
    return EvalRow(path=rel, kind="image", psnr=psnr(a, b), ssim=ssim(a, b))


def evaluate_directories(pred_dir: Union[str, Path], gt_dir: Union[str, Path]
                         ) -> Tuple[List[EvalRow], List[str]]:
    pairs, missing = pair_files(pred_dir, gt_dir)
    for rel in missing:
        logger.warning(f"No prediction for {rel}")
    rows = [evaluate_pair(pred, gt, str(gt.relative_to(gt_dir))) for pred, gt in pairs]
    return rows, missing


def summarize(rows: List[EvalRow], missing: Optional[List[str]] = None) -> Dict[str, Any]:
    """Mean metrics; identical pairs (infinite PSNR) are counted, not averaged."""
    images = [r for r in rows if r.kind == "image"]
    normals = [r for r in rows if r.kind == "normal"]
    finite = [r.psnr for r in images if r.psnr is not None and math.isfinite(r.psnr)]
    return {
        "version": REPORT_VERSION,
        "images": len(images),
        "normals": len(normals),
        "missing": list(missing or []),
        "identical": len(images) - len(finite),
        "psnr": float(np.mean(finite)) if finite else None,
        "ssim": float(np.mean([r.ssim for r in images])) if images else None,
        "mae": float(np.mean([r.mae for r in normals])) if normals else None,
    }


def export_report(rows: List[EvalRow], summary: Dict[str, Any], report: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write the per-pair CSV table and the JSON summary next to it.

    Args:
        rows: Per-pair metrics.
        summary: Output of :func:`summarize`.
        report: CSV path; the summary goes to the same stem with ``.json``.

    Returns:
        Tuple of the CSV and JSON paths written.

    Examples:
        >>> rows, missing = evaluate_directories("pred", "gt")
        >>> export_report(rows, summarize(rows, missing), "report.csv")
        # Creates report.csv and report.json
    """
    csv_path = Path(report)
    json_path = csv_path.with_suffix(".json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as cf:
        writer = csv.DictWriter(cf, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_csv())
    logger.info(f"Written to CSV: {csv_path}")
    with open(json_path, "w") as jf:
        json.dump(summary, jf, indent=2)
    logger.info(f"Written to JSON: {json_path}")
    return csv_path, json_path


def format_table(rows: List[EvalRow], summary: Dict[str, Any]) -> str:
    """Human-readable table of every pair and the means."""
    width = max([len(r.path) for r in rows] + [4])
    lines = [f"{'path':<{width}}  {'PSNR':>8}  {'SSIM':>7}  {'MAE':>7}", "-" * (width + 30)]
    for r in rows:
        p = "" if r.psnr is None else ("inf" if math.isinf(r.psnr) else f"{r.psnr:8.2f}")
        s = "" if r.ssim is None else f"{r.ssim:7.4f}"
        m = "" if r.mae is None else f"{r.mae:7.4f}"
        lines.append(f"{r.path:<{width}}  {p:>8}  {s:>7}  {m:>7}")
    lines.append("-" * (width + 30))
    mean_p = "" if summary["psnr"] is None else f"{summary['psnr']:8.2f}"
    mean_s = "" if summary["ssim"] is None else f"{summary['ssim']:7.4f}"
    mean_m = "" if summary["mae"] is None else f"{summary['mae']:7.4f}"
    lines.append(f"{'mean':<{width}}  {mean_p:>8}  {mean_s:>7}  {mean_m:>7}")
    return "\n".join(lines)

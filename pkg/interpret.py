"""
Class activation maps from the pre-pooling feature volume and the classifier weights.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image

from architecture import ArchitectureGraph
from constants import BSCAN_SHAPE, CAM_COLORMAP, CAM_OVERLAY_ALPHA
from dataset import BScan, GradeLabel, quantize, resample_bilinear
from error_responses import IoFailureError, ShapeMismatchError
from model import ForwardTrace, ModelParameters, forward


@dataclass(frozen=True)
class ClassActivationMap:
    map: np.ndarray
    grade: GradeLabel
    image_id: str = ""


def raw_cam(feature_volume: np.ndarray, theta: np.ndarray, class_index: int) -> np.ndarray:
    """sum_k theta[k, c] * F[h, w, k] at the feature resolution."""
    features = np.asarray(feature_volume, dtype=np.float64)
    weights = np.asarray(theta, dtype=np.float64)
    if features.ndim != 3 or weights.ndim != 2 or weights.shape[0] != features.shape[2]:
        raise ShapeMismatchError(
            f"Feature volume {features.shape} does not match classifier weights {weights.shape}",
            details={"features": list(features.shape), "theta": list(weights.shape)},
        )
    if not 0 <= class_index < weights.shape[1]:
        raise ShapeMismatchError(f"Class {class_index} outside {weights.shape[1]} classes", details={"class": class_index})
    return features @ weights[:, class_index]


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def compute_cam(trace: ForwardTrace, theta: np.ndarray, grade: Union[GradeLabel, int],
                image_id: str = "", output_shape: Tuple[int, int] = BSCAN_SHAPE) -> ClassActivationMap:
    """
    Class activation map for ``grade``, bilinearly upsampled to ``output_shape``.

    Raises:
        ShapeMismatchError: If theta does not match the feature channels
    """
    grade = GradeLabel.parse(grade)
    raw = raw_cam(trace.feature_volume, theta, int(grade))
    return ClassActivationMap(normalize_map(resample_bilinear(raw, output_shape)), grade, image_id)


def cams_for_scans(params: ModelParameters, graph: ArchitectureGraph, scans: Sequence[BScan],
                   grades: Optional[Iterable[Union[GradeLabel, int]]] = None) -> List[ClassActivationMap]:
    """Maps for every scan and grade in scan-major order; without grades, the predicted grade of each scan."""
    chosen = [GradeLabel.parse(g) for g in grades] if grades is not None else None
    theta = params.classifier_weights
    cams: List[ClassActivationMap] = []
    for scan, trace in zip(scans, forward(params, graph, list(scans))):
        selected = chosen if chosen is not None else [GradeLabel(int(np.argmax(trace.probabilities)))]
        cams.extend(compute_cam(trace, theta, grade, scan.image_id) for grade in selected)
    return cams


def heatmap_filename(image_id: str, grade: GradeLabel, prefix: str = "") -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", image_id)
    return f"{prefix}{safe}_{grade.label_name}.png"


def overlay(cam: ClassActivationMap, scan: BScan) -> np.ndarray:
    """Grayscale scan blended with the colormap: gray * (1 - a * m) + a * m * rgb(m)."""
    if cam.map.shape != scan.pixels.shape:
        raise ShapeMismatchError(
            f"Map {cam.map.shape} does not match scan {scan.pixels.shape}",
            details={"map": list(cam.map.shape), "scan": list(scan.pixels.shape)},
        )
    gray = np.repeat(scan.pixels.astype(np.float64)[..., None], 3, axis=2)
    weight = CAM_OVERLAY_ALPHA * cam.map[..., None]
    colors = colormaps[CAM_COLORMAP](cam.map)[..., :3]
    return quantize_rgb(gray * (1.0 - weight) + weight * colors)


def quantize_rgb(image: np.ndarray) -> np.ndarray:
    return np.stack([quantize(image[..., channel]) for channel in range(image.shape[2])], axis=2)


def _save_rgb(image: np.ndarray, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image).save(path, format="PNG")
    except OSError as exc:
        raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc
    return path


def export_heatmap(cam: ClassActivationMap, scan: BScan, path: Union[str, Path], dump_raw: bool = False) -> Path:
    """
    Write an 8-bit RGB overlay PNG (and optionally the map as ``.npy`` beside it).

    Raises:
        ShapeMismatchError: If the map and scan differ in shape
        IoFailureError: If the file cannot be written
    """
    path = Path(path)
    _save_rgb(overlay(cam, scan), path)
    if dump_raw:
        try:
            np.save(path.with_suffix(".npy"), cam.map, allow_pickle=False)
        except OSError as exc:
            raise IoFailureError(f"Failed to write {path.with_suffix('.npy')}: {exc}", details={"path": str(path)}) from exc
    return path


def export_comparison(cams: Sequence[ClassActivationMap], scan: BScan, path: Union[str, Path]) -> Path:
    """Overlays of several models' maps for one scan, side by side left to right."""
    if not cams:
        raise ShapeMismatchError("No maps to compare")
    return _save_rgb(np.concatenate([overlay(cam, scan) for cam in cams], axis=1), Path(path))

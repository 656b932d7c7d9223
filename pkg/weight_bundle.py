"""
Weight bundles: a directory of ``<name>.npy`` arrays plus ``index.json``.

The index records shape, dtype and frozen flag per tensor and, when known,
the architecture config that produced the tensors, so a bundle alone is
enough to rebuild a model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch

from architecture import ArchitectureConfig, ArchitectureGraph, build_graph
from constants import VGG_BLOCKS
from error_responses import IoFailureError, ShapeMismatchError, UnknownBackboneError
from model import ModelParameters
from structured_logger import get_logger

logger = get_logger(__name__)

INDEX_FILENAME = "index.json"


@dataclass(frozen=True)
class WeightBundle:
    arrays: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    architecture: Optional[ArchitectureConfig] = None


def save_bundle(params: ModelParameters, out_dir: Union[str, Path],
                graph: Optional[ArchitectureGraph] = None) -> Path:
    """Write every tensor as ``<name>.npy`` and an index describing them."""
    out_dir = Path(out_dir)
    index = {
        "architecture": graph.config.model_dump(mode="json") if graph is not None else None,
        "parameters": {},
    }
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, array in params.to_numpy().items():
            np.save(out_dir / f"{name}.npy", array, allow_pickle=False)
            index["parameters"][name] = {
                "shape": list(array.shape),
                "dtype": str(array.dtype),
                "frozen": params.frozen[name],
            }
        (out_dir / INDEX_FILENAME).write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"Failed to write weight bundle {out_dir}: {exc}", details={"path": str(out_dir)}) from exc
    return out_dir


def load_bundle(path: Union[str, Path]) -> WeightBundle:
    """
    Read a bundle directory.

    Raises:
        IoFailureError: If the index or an array file cannot be read
        ShapeMismatchError: If an array disagrees with its indexed shape
    """
    path = Path(path)
    try:
        index = json.loads((path / INDEX_FILENAME).read_text(encoding="utf-8"))
        arrays: Dict[str, np.ndarray] = {}
        frozen: Dict[str, bool] = {}
        for name, meta in index["parameters"].items():
            array = np.load(path / f"{name}.npy", allow_pickle=False)
            if list(array.shape) != list(meta["shape"]):
                raise ShapeMismatchError(
                    f"Bundle tensor {name} has shape {array.shape}, index says {meta['shape']}",
                    details={"name": name},
                )
            arrays[name] = array
            frozen[name] = bool(meta.get("frozen", False))
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, ShapeMismatchError):
            raise
        raise IoFailureError(f"Failed to read weight bundle {path}: {exc}", details={"path": str(path)}) from exc

    architecture = index.get("architecture")
    return WeightBundle(
        arrays=arrays,
        frozen=frozen,
        architecture=ArchitectureConfig.model_validate(architecture) if architecture else None,
    )


def torchvision_key_map(backbone: str) -> Dict[str, str]:
    """
    Map ``features.N.{weight,bias}`` keys of a torchvision VGG state dict to
    ``blockB_convK.{weight,bias}``.

    Each convolution occupies two positions (conv, ReLU) and each block ends
    with one pooling position.
    """
    if backbone not in VGG_BLOCKS:
        raise UnknownBackboneError(f"Unknown backbone {backbone!r}", details={"backbone": backbone})
    mapping: Dict[str, str] = {}
    position = 0
    for block, widths in enumerate(VGG_BLOCKS[backbone], start=1):
        for conv in range(1, len(widths) + 1):
            for suffix in ("weight", "bias"):
                mapping[f"features.{position}.{suffix}"] = f"block{block}_conv{conv}.{suffix}"
            position += 2
        position += 1
    return mapping


def load_pretrained_backbone(source: Union[str, Path, Mapping[str, np.ndarray]],
                             backbone: str = "vgg19") -> Dict[str, np.ndarray]:
    """
    Pretrained backbone weights keyed by graph parameter name.

    ``source`` is a bundle directory, a saved torch state dict (``.pth``) or an
    in-memory mapping; torchvision style keys are renamed and keys the graph
    does not know are dropped.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.is_file():
            try:
                source = torch.load(path, map_location="cpu", weights_only=True)
            except (OSError, RuntimeError) as exc:
                raise IoFailureError(f"Cannot read state dict {path}: {exc}", details={"path": str(path)}) from exc
        else:
            source = load_bundle(path).arrays
    arrays = {name: np.asarray(value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value)
              for name, value in source.items()}

    renames = torchvision_key_map(backbone)
    weights: Dict[str, np.ndarray] = {}
    for name, array in arrays.items():
        target = renames.get(name, name)
        if target.startswith("block"):
            weights[target] = array
    logger.info("Pretrained backbone weights loaded", backbone=backbone, n_tensors=len(weights))
    return weights


def load_model(path: Union[str, Path], config: Optional[ArchitectureConfig] = None) -> Tuple[ArchitectureGraph, ModelParameters]:
    """
    Rebuild (graph, parameters) from a bundle.

    Raises:
        ShapeMismatchError: If the bundle does not fit the graph
    """
    bundle = load_bundle(path)
    config = config or bundle.architecture
    if config is None:
        raise ShapeMismatchError(f"Bundle {path} carries no architecture; pass one explicitly", details={"path": str(path)})
    graph = build_graph(config)

    expected = graph.parameter_shapes()
    if set(expected) != set(bundle.arrays):
        missing = sorted(set(expected) - set(bundle.arrays))
        extra = sorted(set(bundle.arrays) - set(expected))
        raise ShapeMismatchError(
            f"Bundle {path} does not fit the {config.kind} graph",
            details={"missing": missing[:10], "unexpected": extra[:10]},
        )
    tensors: Dict[str, torch.Tensor] = {}
    for name, shape in expected.items():
        array = bundle.arrays[name]
        if tuple(array.shape) != tuple(shape):
            raise ShapeMismatchError(f"Bundle tensor {name} has shape {array.shape}, graph needs {shape}", details={"name": name})
        tensors[name] = torch.from_numpy(np.array(array))
    frozen = {name: graph.layer(name.rsplit(".", 1)[0]).frozen for name in expected}
    return graph, ModelParameters(tensors, frozen)

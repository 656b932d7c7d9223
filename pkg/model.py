"""
Executable grading networks.

A GraphNetwork interprets an ArchitectureGraph as a torch module; the weights
themselves live outside the module in ModelParameters (an ordered mapping of
named tensors plus a frozen flag per tensor) and are bound per call with
``torch.func.functional_call``. That keeps parameters plain values which the
training engine can replace functionally and the pseudo-labeler can prove
untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from architecture import (
    ArchitectureConfig,
    ArchitectureGraph,
    LayerKind,
    build_graph,
)
from constants import BACKBONE_INPUT_CHANNELS, BSCAN_SHAPE, DEFAULT_EVAL_BATCH_SIZE
from dataset import BScan, Dataset
from error_responses import EmptyInputError, NonFiniteLogitError, ShapeMismatchError
from structured_logger import get_logger

logger = get_logger(__name__)

_MODULE_PREFIX = "layers."


class GraphNetwork(nn.Module):
    """Runs the layers of an ArchitectureGraph in order."""

    def __init__(self, graph: ArchitectureGraph):
        super().__init__()
        self.graph = graph
        self.layers = nn.ModuleDict()
        for layer in graph.layers:
            if layer.kind == LayerKind.CONV:
                self.layers[layer.name] = nn.Conv2d(
                    layer.in_channels, layer.out_channels, layer.kernel,
                    stride=layer.stride, padding=layer.padding,
                )
            elif layer.kind == LayerKind.DENSE:
                self.layers[layer.name] = nn.Linear(layer.in_channels, layer.out_channels)

        # Index of the last layer consuming each output, so activations can be released early
        self._last_use: Dict[str, int] = {}
        for index, layer in enumerate(graph.layers):
            for source in layer.inputs:
                self._last_use[source] = index

    def forward(self, x: torch.Tensor, capture: Iterable[str] = ()) -> Dict[str, torch.Tensor]:
        keep = set(capture) | {self.graph.output_layer}
        outputs: Dict[str, torch.Tensor] = {}

        for index, layer in enumerate(self.graph.layers):
            sources = [outputs[name] for name in layer.inputs]
            if layer.kind == LayerKind.INPUT:
                out = x
            elif layer.kind == LayerKind.CONV:
                out = self.layers[layer.name](sources[0])
            elif layer.kind == LayerKind.MAXPOOL:
                out = F.max_pool2d(sources[0], kernel_size=layer.kernel, stride=layer.stride)
            elif layer.kind == LayerKind.CONCAT:
                out = torch.cat(sources, dim=1)
            elif layer.kind == LayerKind.MULTIPLY:
                out = sources[0] * sources[1]
            elif layer.kind == LayerKind.GAP:
                out = sources[0].mean(dim=(2, 3))
            else:
                out = self.layers[layer.name](sources[0])

            if layer.activation == "relu":
                out = F.relu(out)
            elif layer.activation == "sigmoid":
                out = torch.sigmoid(out)
            outputs[layer.name] = out

            for name in layer.inputs:
                if self._last_use.get(name) == index and name not in keep:
                    del outputs[name]

        return {name: value for name, value in outputs.items() if name in keep}


@lru_cache(maxsize=8)
def network_for(graph: ArchitectureGraph) -> GraphNetwork:
    """Shared module skeleton per graph; its own weights are never used."""
    return GraphNetwork(graph).eval()


@dataclass(eq=False)
class ModelParameters:
    """
    Named weight tensors in graph order.

    ``frozen`` marks the tensors excluded from optimization (the first
    backbone blocks). Tensors are treated as immutable values: updates go
    through ``replace``.
    """
    tensors: Dict[str, torch.Tensor]
    frozen: Dict[str, bool]

    def __post_init__(self) -> None:
        if set(self.tensors) != set(self.frozen):
            raise ShapeMismatchError("Parameter and frozen-flag names differ")

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    @property
    def trainable_names(self) -> List[str]:
        return [name for name, frozen in self.frozen.items() if not frozen]

    @property
    def frozen_names(self) -> List[str]:
        return [name for name, frozen in self.frozen.items() if frozen]

    @property
    def encoder(self) -> Dict[str, torch.Tensor]:
        """Parameters of f (everything except the classifier)."""
        return {name: t for name, t in self.tensors.items() if not name.startswith("classifier.")}

    @property
    def classifier(self) -> Dict[str, torch.Tensor]:
        """Parameters of g: the dense output layer."""
        return {name: t for name, t in self.tensors.items() if name.startswith("classifier.")}

    def trainable(self) -> Dict[str, torch.Tensor]:
        return {name: self.tensors[name] for name in self.trainable_names}

    @property
    def classifier_weights(self) -> np.ndarray:
        """Classifier weights as an (embedding, classes) matrix."""
        return self.tensors["classifier.weight"].detach().double().numpy().T.copy()

    @property
    def classifier_bias(self) -> np.ndarray:
        return self.tensors["classifier.bias"].detach().double().numpy().copy()

    def replace(self, updates: Mapping[str, torch.Tensor]) -> "ModelParameters":
        unknown = set(updates) - set(self.tensors)
        if unknown:
            raise ShapeMismatchError(f"Unknown parameters {sorted(unknown)}", details={"names": sorted(unknown)})
        tensors = dict(self.tensors)
        for name, value in updates.items():
            if tuple(value.shape) != tuple(tensors[name].shape):
                raise ShapeMismatchError(
                    f"Parameter {name} has shape {tuple(tensors[name].shape)}, update has {tuple(value.shape)}",
                    details={"name": name},
                )
            tensors[name] = value.detach()
        return ModelParameters(tensors, dict(self.frozen))

    def clone(self) -> "ModelParameters":
        return ModelParameters({n: t.detach().clone() for n, t in self.tensors.items()}, dict(self.frozen))

    def to(self, dtype: torch.dtype) -> "ModelParameters":
        return ModelParameters({n: t.detach().to(dtype) for n, t in self.tensors.items()}, dict(self.frozen))

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy() for name, t in self.tensors.items()}

    def bitwise_equal(self, other: "ModelParameters", names: Optional[Iterable[str]] = None) -> bool:
        """True when the selected tensors match byte for byte."""
        selected = list(names) if names is not None else list(self.tensors)
        if names is None and list(other.tensors) != selected:
            return False
        for name in selected:
            a, b = self.tensors[name], other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.detach().cpu().numpy().tobytes() != b.detach().cpu().numpy().tobytes():
                return False
        return True


@dataclass(frozen=True)
class ForwardTrace:
    """Intermediate values of one forward pass, in float64."""
    feature_volume: np.ndarray
    attention_mask: Optional[np.ndarray]
    embedding: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray


def softmax(s: np.ndarray) -> np.ndarray:
    """
    Numerically stable softmax over the last axis.

    Raises:
        NonFiniteLogitError: If any logit is NaN or infinite
    """
    logits = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogitError("Logits contain NaN or infinity", details={"logits": logits.tolist()})
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# ============================================================================
# CONSTRUCTION
# ============================================================================

def init_parameters(graph: ArchitectureGraph, seed: int,
                    pretrained_weights: Optional[Mapping[str, np.ndarray]] = None) -> ModelParameters:
    """
    Seeded initialization in graph order, optionally overlaid with pretrained backbone weights.

    Convolutions use a uniform bound of sqrt(6 / fan_in), the dense layer
    sqrt(1 / fan_in); biases start at zero.

    Raises:
        ShapeMismatchError: If pretrained weights miss a backbone tensor or disagree in shape
    """
    generator = torch.Generator().manual_seed(int(seed))
    tensors: Dict[str, torch.Tensor] = {}
    frozen: Dict[str, bool] = {}

    for layer in graph.layers:
        for name, shape in layer.parameter_shapes().items():
            if name.endswith(".bias"):
                value = torch.zeros(shape, dtype=torch.float32)
            else:
                fan_in = math.prod(shape[1:])
                gain = 6.0 if layer.kind == LayerKind.CONV else 1.0
                bound = math.sqrt(gain / fan_in)
                value = (torch.rand(shape, generator=generator, dtype=torch.float32) * 2.0 - 1.0) * bound
            tensors[name] = value
            frozen[name] = layer.frozen

    if pretrained_weights is not None:
        backbone = [name for name in tensors if name.startswith("block")]
        missing = [name for name in backbone if name not in pretrained_weights]
        if missing:
            raise ShapeMismatchError(
                f"Pretrained weights lack {len(missing)} backbone tensors",
                details={"missing": missing[:10]},
            )
        for name, array in pretrained_weights.items():
            if name not in tensors:
                continue
            if tuple(np.shape(array)) != tuple(tensors[name].shape):
                raise ShapeMismatchError(
                    f"Pretrained {name} has shape {tuple(np.shape(array))}, expected {tuple(tensors[name].shape)}",
                    details={"name": name},
                )
            tensors[name] = torch.as_tensor(np.asarray(array, dtype=np.float32)).clone()

    return ModelParameters(tensors, frozen)


def build_model(config: ArchitectureConfig, pretrained_weights: Optional[Mapping[str, np.ndarray]] = None,
                seed: int = 0) -> Tuple[ArchitectureGraph, ModelParameters]:
    graph = build_graph(config)
    return graph, init_parameters(graph, seed, pretrained_weights)


def build_ragnet_v2(backbone: str = "vgg19", pretrained_weights: Optional[Mapping[str, np.ndarray]] = None,
                    seed: int = 0, config: Optional[ArchitectureConfig] = None) -> Tuple[ArchitectureGraph, ModelParameters]:
    """
    Build the residual-attention network and its initial parameters.

    ``config`` supplies scale settings (input size, width divisor); its kind
    and backbone are overridden by this call.

    Raises:
        UnknownBackboneError: Backbone outside vgg16/vgg19
        ShapeMismatchError: Incompatible pretrained weights
    """
    base = config or ArchitectureConfig()
    return build_model(base.model_copy(update={"kind": "ragnet_v2", "backbone": backbone}), pretrained_weights, seed)


def build_vgg_baseline(backbone: str = "vgg19", pretrained_weights: Optional[Mapping[str, np.ndarray]] = None,
                       seed: int = 0, config: Optional[ArchitectureConfig] = None) -> Tuple[ArchitectureGraph, ModelParameters]:
    """Plain VGG backbone + pooling + three-way classifier, same freezing policy."""
    base = config or ArchitectureConfig()
    return build_model(base.model_copy(update={"kind": "vgg", "backbone": backbone}), pretrained_weights, seed)


# ============================================================================
# EVALUATION
# ============================================================================

def _pixel_stack(batch: Union[Dataset, Sequence[BScan], np.ndarray]) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        pixels = batch if batch.ndim == 3 else batch[None]
    elif isinstance(batch, Dataset):
        pixels = batch.pixel_array()
    else:
        pixels = np.stack([scan.pixels for scan in batch]) if len(batch) else np.zeros((0, *BSCAN_SHAPE))
    if tuple(pixels.shape[1:]) != BSCAN_SHAPE:
        raise ShapeMismatchError(
            f"Expected B-scans of shape {BSCAN_SHAPE}, got {tuple(pixels.shape[1:])}",
            details={"shape": list(pixels.shape)},
        )
    if len(pixels) == 0:
        raise EmptyInputError("Cannot run the network on an empty batch")
    return pixels


def prepare_inputs(pixels: np.ndarray, graph: ArchitectureGraph, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(n, 248, 384) pixels -> (n, 3, H, W) network input at the graph's resolution."""
    tensor = torch.as_tensor(np.ascontiguousarray(pixels)).to(dtype)[:, None]
    height, width = graph.config.input_height, graph.config.input_width
    if tuple(tensor.shape[2:]) != (height, width):
        tensor = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    return tensor.expand(-1, BACKBONE_INPUT_CHANNELS, -1, -1).contiguous()


def run_network(params: ModelParameters, graph: ArchitectureGraph, inputs: torch.Tensor,
                capture: Iterable[str] = ()) -> Dict[str, torch.Tensor]:
    """Differentiable forward pass binding ``params`` to the graph's module."""
    bound = {_MODULE_PREFIX + name: tensor for name, tensor in params.tensors.items()}
    return functional_call(network_for(graph), bound, (inputs,), {"capture": tuple(capture)})


def forward(params: ModelParameters, graph: ArchitectureGraph, batch: Union[Dataset, Sequence[BScan], np.ndarray],
            batch_size: int = DEFAULT_EVAL_BATCH_SIZE) -> List[ForwardTrace]:
    """
    Evaluate the network, exposing the feature volume, attention mask,
    embedding, logits and probabilities of each scan in input order.

    Raises:
        ShapeMismatchError: If a scan is not 248x384
        EmptyInputError: If the batch holds no scans
    """
    pixels = _pixel_stack(batch)
    capture = [graph.feature_layer, "gap"]
    if graph.attention_layer:
        capture.append(graph.attention_layer)

    traces: List[ForwardTrace] = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            inputs = prepare_inputs(pixels[start:start + batch_size], graph, params.dtype)
            outputs = run_network(params, graph, inputs, capture)
            features = outputs[graph.feature_layer].permute(0, 2, 3, 1).double().numpy()
            masks = (outputs[graph.attention_layer].permute(0, 2, 3, 1).double().numpy()
                     if graph.attention_layer else None)
            embeddings = outputs["gap"].double().numpy()
            logits = outputs[graph.output_layer].double().numpy()
            probabilities = softmax(logits)
            for i in range(len(inputs)):
                traces.append(ForwardTrace(
                    feature_volume=features[i],
                    attention_mask=None if masks is None else masks[i],
                    embedding=embeddings[i],
                    logits=logits[i],
                    probabilities=probabilities[i],
                ))
    return traces


def predict_proba(params: ModelParameters, graph: ArchitectureGraph, batch: Union[Dataset, Sequence[BScan], np.ndarray],
                  batch_size: int = DEFAULT_EVAL_BATCH_SIZE) -> np.ndarray:
    """
    Class probabilities, shape (n, n_classes), float64.

    Raises:
        ShapeMismatchError: If a scan is not 248x384
        EmptyInputError: If the batch holds no scans
    """
    pixels = _pixel_stack(batch)
    chunks: List[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            inputs = prepare_inputs(pixels[start:start + batch_size], graph, params.dtype)
            chunks.append(run_network(params, graph, inputs)[graph.output_layer].double().numpy())
    return softmax(np.concatenate(chunks))

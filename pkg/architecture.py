"""
Layer-graph description of the grading networks.

An ArchitectureGraph is an ordered list of LayerSpec records with every output
shape stored, so the wiring can be audited (and shapes re-derived) without
instantiating any tensors. Two graph kinds exist:

- ``ragnet_v2``: VGG blocks 1-5, a vertical 3x1 residual branch tapped at
  block 3, a concatenation merge, a 1x1 attention autoencoder whose sigmoid
  mask multiplies an identity shortcut, a second concatenation, a 1x1
  embedding convolution, global average pooling and a dense classifier.
- ``vgg``: the plain VGG blocks followed by pooling and the classifier.

Shapes are stored as (H, W, C) for spatial layers and (C,) after pooling.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from constants import (
    ATTENTION_REDUCTION,
    BACKBONE_INPUT_CHANNELS,
    BSCAN_HEIGHT,
    BSCAN_WIDTH,
    EMBEDDING_CHANNELS,
    FROZEN_BLOCKS,
    N_CLASSES,
    RESIDUAL_KERNEL,
    SUPPORTED_BACKBONES,
    VGG_BLOCKS,
)
from error_responses import ShapeMismatchError, UnknownBackboneError

Shape = Tuple[int, ...]


class LayerKind(str, Enum):
    INPUT = "input"
    CONV = "conv"
    MAXPOOL = "maxpool"
    CONCAT = "concat"
    MULTIPLY = "multiply"
    GAP = "gap"
    DENSE = "dense"


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph."""
    name: str
    kind: LayerKind
    inputs: Tuple[str, ...] = ()
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    in_channels: int = 0
    out_channels: int = 0
    activation: Optional[str] = None
    frozen: bool = False
    output_shape: Shape = ()

    @property
    def has_parameters(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.DENSE)

    def parameter_shapes(self) -> Dict[str, Shape]:
        """Weight/bias shapes in torch layout (out, in, kh, kw) and (out, in)."""
        if self.kind == LayerKind.CONV:
            return {
                f"{self.name}.weight": (self.out_channels, self.in_channels, *self.kernel),
                f"{self.name}.bias": (self.out_channels,),
            }
        if self.kind == LayerKind.DENSE:
            return {
                f"{self.name}.weight": (self.out_channels, self.in_channels),
                f"{self.name}.bias": (self.out_channels,),
            }
        return {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "activation": self.activation,
            "frozen": self.frozen,
            "output_shape": list(self.output_shape),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        return cls(
            name=data["name"],
            kind=LayerKind(data["kind"]),
            inputs=tuple(data.get("inputs", ())),
            kernel=tuple(data.get("kernel", (1, 1))),
            stride=tuple(data.get("stride", (1, 1))),
            padding=tuple(data.get("padding", (0, 0))),
            in_channels=int(data.get("in_channels", 0)),
            out_channels=int(data.get("out_channels", 0)),
            activation=data.get("activation"),
            frozen=bool(data.get("frozen", False)),
            output_shape=tuple(data.get("output_shape", ())),
        )


class ArchitectureConfig(BaseModel):
    """
    Network family and scale.

    ``width_divisor`` shrinks every VGG convolution width (minimum 1 channel)
    for reduced-scale runs; the embedding width is set independently.
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["ragnet_v2", "vgg"] = "ragnet_v2"
    backbone: str = "vgg19"
    input_height: int = Field(default=BSCAN_HEIGHT, gt=0)
    input_width: int = Field(default=BSCAN_WIDTH, gt=0)
    width_divisor: int = Field(default=1, ge=1)
    embedding_channels: int = Field(default=EMBEDDING_CHANNELS, ge=1)
    n_classes: int = Field(default=N_CLASSES, ge=2)
    frozen_blocks: int = Field(default=FROZEN_BLOCKS, ge=0, le=5)
    attention_reduction: int = Field(default=ATTENTION_REDUCTION, ge=1)

    def block_widths(self) -> Tuple[Tuple[int, ...], ...]:
        if self.backbone not in VGG_BLOCKS:
            raise UnknownBackboneError(
                f"Unknown backbone {self.backbone!r}; supported: {', '.join(SUPPORTED_BACKBONES)}",
                details={"backbone": self.backbone},
            )
        return tuple(
            tuple(max(1, width // self.width_divisor) for width in block)
            for block in VGG_BLOCKS[self.backbone]
        )


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """Output length of a convolution or pooling window along one axis (floor mode)."""
    return (size + 2 * padding - kernel) // stride + 1


def propagate_shapes(layers: Sequence[LayerSpec], input_height: int, input_width: int) -> List[Shape]:
    """
    Recompute every layer's output shape from its inputs and hyperparameters.

    Raises:
        ShapeMismatchError: On unknown inputs, channel disagreements, spatial
            mismatches at merges or a spatial size collapsing to zero
    """
    shapes: Dict[str, Shape] = {}
    ordered: List[Shape] = []

    for layer in layers:
        missing = [name for name in layer.inputs if name not in shapes]
        if missing:
            raise ShapeMismatchError(f"Layer {layer.name} reads undefined inputs {missing}", details={"layer": layer.name})
        sources = [shapes[name] for name in layer.inputs]

        if layer.kind == LayerKind.INPUT:
            shape: Shape = (input_height, input_width, layer.out_channels)
        elif layer.kind in (LayerKind.CONV, LayerKind.MAXPOOL):
            height, width, channels = sources[0]
            if channels != layer.in_channels:
                raise ShapeMismatchError(
                    f"Layer {layer.name} expects {layer.in_channels} channels, receives {channels}",
                    details={"layer": layer.name},
                )
            out_h = conv_output_size(height, layer.kernel[0], layer.stride[0], layer.padding[0])
            out_w = conv_output_size(width, layer.kernel[1], layer.stride[1], layer.padding[1])
            if out_h < 1 or out_w < 1:
                raise ShapeMismatchError(
                    f"Layer {layer.name} collapses {height}x{width} to {out_h}x{out_w}",
                    details={"layer": layer.name},
                )
            shape = (out_h, out_w, layer.out_channels)
        elif layer.kind == LayerKind.CONCAT:
            spatial = {source[:2] for source in sources}
            if len(spatial) != 1:
                raise ShapeMismatchError(f"Layer {layer.name} concatenates mismatched sizes {sorted(spatial)}", details={"layer": layer.name})
            shape = (*sources[0][:2], sum(source[2] for source in sources))
        elif layer.kind == LayerKind.MULTIPLY:
            if len(set(sources)) != 1:
                raise ShapeMismatchError(f"Layer {layer.name} multiplies mismatched shapes {sources}", details={"layer": layer.name})
            shape = sources[0]
        elif layer.kind == LayerKind.GAP:
            shape = (sources[0][2],)
        elif layer.kind == LayerKind.DENSE:
            if sources[0] != (layer.in_channels,):
                raise ShapeMismatchError(
                    f"Layer {layer.name} expects {layer.in_channels} features, receives {sources[0]}",
                    details={"layer": layer.name},
                )
            shape = (layer.out_channels,)
        else:  # pragma: no cover
            raise ShapeMismatchError(f"Unknown layer kind {layer.kind}", details={"layer": layer.name})

        shapes[layer.name] = shape
        ordered.append(shape)
    return ordered


@dataclass(frozen=True)
class ArchitectureGraph:
    """An ordered, shape-annotated layer graph plus the config that built it."""
    config: ArchitectureConfig
    layers: Tuple[LayerSpec, ...]
    feature_layer: str
    attention_layer: Optional[str] = None
    _index: Dict[str, int] = field(default_factory=dict, compare=False, hash=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {layer.name: i for i, layer in enumerate(self.layers)})

    @property
    def backbone(self) -> str:
        return self.config.backbone

    @property
    def output_layer(self) -> str:
        return self.layers[-1].name

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self._index[name]]

    @property
    def input_shape(self) -> Shape:
        return self.layers[0].output_shape

    @property
    def feature_shape(self) -> Shape:
        """(H, W, C) of the pre-pooling volume used for class activation maps."""
        return self.layer(self.feature_layer).output_shape

    @property
    def embedding_dim(self) -> int:
        return self.feature_shape[2]

    def parameter_shapes(self) -> Dict[str, Shape]:
        shapes: Dict[str, Shape] = {}
        for layer in self.layers:
            shapes.update(layer.parameter_shapes())
        return shapes

    def frozen_parameter_names(self) -> List[str]:
        return [name for layer in self.layers if layer.frozen for name in layer.parameter_shapes()]

    def validate(self) -> None:
        """Re-derive every shape and compare with the stored annotation."""
        recomputed = propagate_shapes(self.layers, self.config.input_height, self.config.input_width)
        for layer, shape in zip(self.layers, recomputed):
            if tuple(layer.output_shape) != tuple(shape):
                raise ShapeMismatchError(
                    f"Layer {layer.name} stores {layer.output_shape}, recomputed {shape}",
                    details={"layer": layer.name},
                )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "feature_layer": self.feature_layer,
            "attention_layer": self.attention_layer,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchitectureGraph":
        graph = cls(
            config=ArchitectureConfig.model_validate(data["config"]),
            layers=tuple(LayerSpec.from_dict(layer) for layer in data["layers"]),
            feature_layer=data["feature_layer"],
            attention_layer=data.get("attention_layer"),
        )
        graph.validate()
        return graph


class _GraphBuilder:
    """Accumulates layers while tracking the channel count of each output."""

    def __init__(self) -> None:
        self.layers: List[LayerSpec] = []
        self.channels: Dict[str, int] = {}

    def add(self, spec: LayerSpec) -> str:
        self.layers.append(spec)
        self.channels[spec.name] = spec.out_channels
        return spec.name

    def conv(self, name: str, source: str, out_channels: int, kernel=(1, 1), padding=(0, 0),
             activation: Optional[str] = "relu", frozen: bool = False) -> str:
        return self.add(LayerSpec(
            name=name, kind=LayerKind.CONV, inputs=(source,), kernel=tuple(kernel), padding=tuple(padding),
            in_channels=self.channels[source], out_channels=out_channels, activation=activation, frozen=frozen,
        ))

    def maxpool(self, name: str, source: str) -> str:
        channels = self.channels[source]
        return self.add(LayerSpec(
            name=name, kind=LayerKind.MAXPOOL, inputs=(source,), kernel=(2, 2), stride=(2, 2),
            in_channels=channels, out_channels=channels,
        ))

    def concat(self, name: str, sources: Sequence[str]) -> str:
        return self.add(LayerSpec(
            name=name, kind=LayerKind.CONCAT, inputs=tuple(sources),
            out_channels=sum(self.channels[s] for s in sources),
        ))

    def multiply(self, name: str, sources: Sequence[str]) -> str:
        return self.add(LayerSpec(
            name=name, kind=LayerKind.MULTIPLY, inputs=tuple(sources), out_channels=self.channels[sources[0]],
        ))


def _build_backbone(config: ArchitectureConfig, builder: _GraphBuilder) -> Dict[int, str]:
    """Add the VGG convolution blocks; returns the pooled output name per block."""
    builder.add(LayerSpec(name="input", kind=LayerKind.INPUT, out_channels=BACKBONE_INPUT_CHANNELS))
    previous = "input"
    pools: Dict[int, str] = {}
    for block, widths in enumerate(config.block_widths(), start=1):
        frozen = block <= config.frozen_blocks
        for index, width in enumerate(widths, start=1):
            previous = builder.conv(f"block{block}_conv{index}", previous, width, kernel=(3, 3), padding=(1, 1), frozen=frozen)
        previous = pools[block] = builder.maxpool(f"block{block}_pool", previous)
    return pools


def _finish(config: ArchitectureConfig, builder: _GraphBuilder, feature: str, attention: Optional[str]) -> ArchitectureGraph:
    builder.add(LayerSpec(name="gap", kind=LayerKind.GAP, inputs=(feature,), out_channels=builder.channels[feature]))
    builder.add(LayerSpec(
        name="classifier", kind=LayerKind.DENSE, inputs=("gap",),
        in_channels=builder.channels[feature], out_channels=config.n_classes,
    ))
    shapes = propagate_shapes(builder.layers, config.input_height, config.input_width)
    layers = tuple(replace(layer, output_shape=shape) for layer, shape in zip(builder.layers, shapes))
    return ArchitectureGraph(config=config, layers=layers, feature_layer=feature, attention_layer=attention)


def build_ragnet_graph(config: ArchitectureConfig) -> ArchitectureGraph:
    """Wire the residual-attention network on top of the configured VGG backbone."""
    builder = _GraphBuilder()
    pools = _build_backbone(config, builder)
    c3 = builder.channels[pools[3]]

    # Vertical residual branch: block-3 output down to the block-5 resolution
    residual = builder.conv("residual_conv1", pools[3], c3, kernel=RESIDUAL_KERNEL, padding=(1, 0))
    residual = builder.maxpool("residual_pool1", residual)
    residual = builder.conv("residual_conv2", residual, c3, kernel=RESIDUAL_KERNEL, padding=(1, 0))
    residual = builder.maxpool("residual_pool2", residual)

    merged = builder.concat("merge_concat", [pools[5], residual])
    merged = builder.conv("merge_reduce", merged, c3)

    bottleneck = max(1, c3 // config.attention_reduction)
    encoded = builder.conv("attention_encode", merged, bottleneck)
    mask = builder.conv("attention_decode", encoded, c3, activation="sigmoid")
    attended = builder.multiply("attention_apply", [merged, mask])
    joined = builder.concat("attention_concat", [merged, attended])

    embedding = builder.conv("embedding_conv", joined, config.embedding_channels)
    return _finish(config, builder, embedding, mask)


def build_vgg_graph(config: ArchitectureConfig) -> ArchitectureGraph:
    """The plain backbone followed by pooling and the classifier."""
    builder = _GraphBuilder()
    pools = _build_backbone(config, builder)
    return _finish(config, builder, pools[5], None)


def build_graph(config: ArchitectureConfig) -> ArchitectureGraph:
    if config.kind == "ragnet_v2":
        return build_ragnet_graph(config)
    return build_vgg_graph(config)

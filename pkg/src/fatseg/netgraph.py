"""Declarative layer graphs for the slice segmenter and the 3D view fuser.

A NetworkSpec is an ordered list of layer descriptors forming a DAG; channel
flow is derived from the graph (element-wise maximum preserves channel count,
multi-input layers otherwise concatenate along channels), which makes
parameter counting a pure arithmetic exercise. Execution is delegated to a
torch interpreter of the same graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import volume as vol
from .errors import DimensionError, MissingArtifactError

BLOCK_CHANNELS = 64
DOWNSAMPLE_LEVELS = 4
DEFAULT_CANVAS = (224, 256)


class FusionMode(Enum):
    MAXOUT = "maxout"
    CONCAT = "concat"


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph.

    inputs name earlier layers (or "input"). Layers with several inputs fuse
    them: a maxout node takes the element-wise maximum, everything else
    concatenates along the channel axis. unpool_from_indices takes
    [features, pool_layer] and inverts that pooling step.
    """

    id: str
    kind: str
    inputs: tuple[str, ...]
    kernel: tuple[int, ...] | None = None
    out_channels: int | None = None


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    fusion: FusionMode
    num_classes: int
    in_channels: int
    spatial_ndim: int
    input_canvas: tuple[int, ...] | None = None
    name: str = "net"

    def output_id(self) -> str:
        return self.layers[-1].id


_VALID_KINDS = {
    "conv2d",
    "conv3d",
    "batch_norm",
    "relu",
    "maxout",
    "maxpool_with_indices",
    "unpool_from_indices",
    "softmax",
}


def channel_flow(spec: NetworkSpec) -> dict[str, tuple[int, int]]:
    """Map layer id -> (fused input channels, output channels).

    Raises DimensionError when the declared graph is inconsistent (unknown
    inputs, maxout operands with unequal channel counts, unknown kinds).
    """
    out_ch: dict[str, int] = {"input": spec.in_channels}
    flow: dict[str, tuple[int, int]] = {}
    for layer in spec.layers:
        if layer.kind not in _VALID_KINDS:
            raise DimensionError(f"{layer.id}: unknown layer kind {layer.kind!r}")
        for src in layer.inputs:
            if src not in out_ch:
                raise DimensionError(f"{layer.id}: input {src!r} not defined before use")
        fan = [out_ch[src] for src in layer.inputs]
        if layer.kind == "maxout":
            if len(fan) < 2:
                raise DimensionError(f"{layer.id}: maxout needs at least 2 inputs")
            if len(set(fan)) != 1:
                raise DimensionError(f"{layer.id}: maxout operands differ in channels: {fan}")
            in_ch = fan[0]
            produced = in_ch
        elif layer.kind == "unpool_from_indices":
            if len(layer.inputs) != 2:
                raise DimensionError(f"{layer.id}: unpool takes [features, pool_layer]")
            in_ch = fan[0]
            produced = in_ch
        else:
            in_ch = sum(fan)
            if layer.kind in ("conv2d", "conv3d"):
                if layer.out_channels is None or layer.kernel is None:
                    raise DimensionError(f"{layer.id}: conv needs kernel and out_channels")
                produced = layer.out_channels
            else:
                produced = in_ch
        flow[layer.id] = (in_ch, produced)
        out_ch[layer.id] = produced
    return flow


def validate_spec(spec: NetworkSpec) -> None:
    channel_flow(spec)


def count_parameters(spec: NetworkSpec) -> int:
    """Exact trainable parameter count from the declared graph.

    conv: (prod(kernel) * in_channels + 1) * out_channels; batch norm
    contributes scale and shift (2 per channel); running statistics are
    not trainable and excluded.
    """
    flow = channel_flow(spec)
    total = 0
    for layer in spec.layers:
        in_ch, out_ch = flow[layer.id]
        if layer.kind in ("conv2d", "conv3d"):
            total += (int(np.prod(layer.kernel)) * in_ch + 1) * out_ch
        elif layer.kind == "batch_norm":
            total += 2 * in_ch
    return total


def maxout(inputs: list[np.ndarray]) -> np.ndarray:
    """Element-wise maximum across two or more equal-shape feature maps."""
    if len(inputs) < 2:
        raise DimensionError("maxout needs at least 2 inputs")
    shapes = {a.shape for a in inputs}
    if len(shapes) != 1:
        raise DimensionError(f"maxout shape mismatch: {sorted(shapes)}")
    out = np.asarray(inputs[0])
    for arr in inputs[1:]:
        out = np.maximum(out, arr)
    return out


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _unit(
    layers: list[LayerSpec], prefix: str, srcs: list[str], kernel: tuple[int, int]
) -> str:
    """Append batch-norm -> relu -> conv (64 filters); returns the conv id."""
    layers.append(LayerSpec(f"{prefix}_bn", "batch_norm", tuple(srcs)))
    layers.append(LayerSpec(f"{prefix}_relu", "relu", (f"{prefix}_bn",)))
    layers.append(
        LayerSpec(f"{prefix}_conv", "conv2d", (f"{prefix}_relu",), kernel, BLOCK_CHANNELS)
    )
    return f"{prefix}_conv"


def dense_block(
    layers: list[LayerSpec],
    prefix: str,
    srcs: list[str],
    in_channels: int,
    mode: FusionMode,
) -> str:
    """Three-conv dense block (5x5, 5x5, 1x1; 64 filters each).

    Each conv's input fuses the block input with all previous conv outputs:
    element-wise maximum in MAXOUT mode, channel concatenation in CONCAT
    mode. In MAXOUT mode a block input that is not already 64 channels is
    first projected by a 1x1 conv so all fusion operands align.
    """
    if mode is FusionMode.MAXOUT:
        if len(srcs) != 1:
            raise DimensionError("maxout dense block expects a single source")
        x0 = srcs[0]
        if in_channels != BLOCK_CHANNELS:
            layers.append(
                LayerSpec(f"{prefix}_proj", "conv2d", (x0,), (1, 1), BLOCK_CHANNELS)
            )
            x0 = f"{prefix}_proj"
        u1 = _unit(layers, f"{prefix}_c1", [x0], (5, 5))
        layers.append(LayerSpec(f"{prefix}_m1", "maxout", (u1, x0)))
        u2 = _unit(layers, f"{prefix}_c2", [f"{prefix}_m1"], (5, 5))
        layers.append(LayerSpec(f"{prefix}_m2", "maxout", (u2, u1, x0)))
        return _unit(layers, f"{prefix}_c3", [f"{prefix}_m2"], (1, 1))
    u1 = _unit(layers, f"{prefix}_c1", list(srcs), (5, 5))
    u2 = _unit(layers, f"{prefix}_c2", [u1, *srcs], (5, 5))
    return _unit(layers, f"{prefix}_c3", [u2, u1, *srcs], (1, 1))


def unpool_block(
    layers: list[LayerSpec],
    prefix: str,
    features: str,
    pool_id: str,
    skip: str,
    mode: FusionMode,
) -> list[str]:
    """Unpool to double spatial size, convolve to 64 channels, fuse with skip.

    Returns the fused sources feeding the following decoder block: a single
    maxout node in MAXOUT mode, the [conv, skip] pair (128 channels once
    concatenated) in CONCAT mode.
    """
    layers.append(
        LayerSpec(f"{prefix}_unpool", "unpool_from_indices", (features, pool_id))
    )
    up = _unit(layers, f"{prefix}_up", [f"{prefix}_unpool"], (5, 5))
    if mode is FusionMode.MAXOUT:
        layers.append(LayerSpec(f"{prefix}_fuse", "maxout", (up, skip)))
        return [f"{prefix}_fuse"]
    return [up, skip]


def segmentation_net(
    num_classes: int,
    mode: FusionMode,
    in_channels: int = 1,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
) -> NetworkSpec:
    """Encoder-decoder slice segmenter: 4 dense blocks down, bottleneck,
    4 unpool+dense blocks up, 1x1 classifier, softmax.

    Down-sampling is 2x2 max-pooling with stored indices; the decoder
    re-places features at those indices. Long skips connect encoder block
    outputs to the matching decoder fusion.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    layers: list[LayerSpec] = []
    prev = "input"
    ch = in_channels
    skips: list[str] = []
    for i in range(1, DOWNSAMPLE_LEVELS + 1):
        out = dense_block(layers, f"enc{i}", [prev], ch, mode)
        skips.append(out)
        layers.append(LayerSpec(f"pool{i}", "maxpool_with_indices", (out,), (2, 2)))
        prev = f"pool{i}"
        ch = BLOCK_CHANNELS
    layers.append(
        LayerSpec("bottleneck_conv", "conv2d", (prev,), (5, 5), BLOCK_CHANNELS)
    )
    layers.append(LayerSpec("bottleneck_bn", "batch_norm", ("bottleneck_conv",)))
    prev = "bottleneck_bn"
    for i in range(DOWNSAMPLE_LEVELS, 0, -1):
        srcs = unpool_block(layers, f"dec{i}", prev, f"pool{i}", skips[i - 1], mode)
        in_ch = BLOCK_CHANNELS * len(srcs)
        prev = dense_block(layers, f"dec{i}", srcs, in_ch, mode)
    layers.append(LayerSpec("classifier", "conv2d", (prev,), (1, 1), num_classes))
    layers.append(LayerSpec("probs", "softmax", ("classifier",)))
    spec = NetworkSpec(
        layers=layers,
        fusion=mode,
        num_classes=num_classes,
        in_channels=in_channels,
        spatial_ndim=2,
        input_canvas=tuple(canvas),
        name=f"segnet_{mode.value}_{num_classes}c",
    )
    validate_spec(spec)
    return spec


def aggregation_net(num_classes: int = 5) -> NetworkSpec:
    """3D fusion net: stacked per-view class probabilities (3 * num_classes
    channels) -> 3x3x3 conv with 30 filters -> batch norm -> 1x1x1 conv to
    num_classes -> softmax."""
    layers = [
        LayerSpec("agg_conv1", "conv3d", ("input",), (3, 3, 3), 30),
        LayerSpec("agg_bn", "batch_norm", ("agg_conv1",)),
        LayerSpec("agg_conv2", "conv3d", ("agg_bn",), (1, 1, 1), num_classes),
        LayerSpec("probs", "softmax", ("agg_conv2",)),
    ]
    spec = NetworkSpec(
        layers=layers,
        fusion=FusionMode.MAXOUT,
        num_classes=num_classes,
        in_channels=3 * num_classes,
        spatial_ndim=3,
        input_canvas=None,
        name=f"viewagg_{num_classes}c",
    )
    validate_spec(spec)
    return spec


def build_from_config(cfg: dict) -> NetworkSpec:
    """Rebuild a spec from the manifest config written by save_weights."""
    kind = cfg.get("kind")
    if kind == "segmentation":
        return segmentation_net(
            num_classes=cfg["num_classes"],
            mode=FusionMode(cfg["fusion"]),
            in_channels=cfg.get("in_channels", 1),
            canvas=tuple(cfg["canvas"]),
        )
    if kind == "aggregation":
        return aggregation_net(num_classes=cfg["num_classes"])
    raise MissingArtifactError(f"unknown network config kind {kind!r}")


def spec_config(spec: NetworkSpec) -> dict:
    if spec.spatial_ndim == 3:
        return {"kind": "aggregation", "num_classes": spec.num_classes}
    return {
        "kind": "segmentation",
        "num_classes": spec.num_classes,
        "fusion": spec.fusion.value,
        "in_channels": spec.in_channels,
        "canvas": list(spec.input_canvas),
    }


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass
class WeightStore:
    """layer id -> parameter name -> float32 array.

    Convs hold weight/bias; batch-norm holds weight (scale), bias (shift)
    and running_mean/running_var.
    """

    arrays: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def equal(self, other: "WeightStore") -> bool:
        if set(self.arrays) != set(other.arrays):
            return False
        for lid, params in self.arrays.items():
            if set(params) != set(other.arrays[lid]):
                return False
            for name, arr in params.items():
                if not np.array_equal(arr, other.arrays[lid][name]):
                    return False
        return True


def init_weights(spec: NetworkSpec, seed: int) -> WeightStore:
    """He-normal conv kernels, zero biases, identity batch norm; seeded."""
    rng = np.random.default_rng(seed)
    flow = channel_flow(spec)
    store = WeightStore()
    for layer in spec.layers:
        in_ch, out_ch = flow[layer.id]
        if layer.kind in ("conv2d", "conv3d"):
            fan_in = in_ch * int(np.prod(layer.kernel))
            std = float(np.sqrt(2.0 / fan_in))
            store.arrays[layer.id] = {
                "weight": rng.normal(0.0, std, (out_ch, in_ch, *layer.kernel)).astype(
                    np.float32
                ),
                "bias": np.zeros(out_ch, dtype=np.float32),
            }
        elif layer.kind == "batch_norm":
            store.arrays[layer.id] = {
                "weight": np.ones(in_ch, dtype=np.float32),
                "bias": np.zeros(in_ch, dtype=np.float32),
                "running_mean": np.zeros(in_ch, dtype=np.float32),
                "running_var": np.ones(in_ch, dtype=np.float32),
            }
    return store


def save_weights(store: WeightStore, out_dir: str | Path, net_config: dict) -> None:
    """Serialize: one array container per parameter plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"net": net_config, "arrays": {}}
    for lid in sorted(store.arrays):
        manifest["arrays"][lid] = {}
        for name in sorted(store.arrays[lid]):
            fname = f"{lid}.{name}.fsa"
            vol.write_array(store.arrays[lid][name], out_dir / fname)
            manifest["arrays"][lid][name] = fname
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )


def load_weights(in_dir: str | Path) -> tuple[WeightStore, dict]:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"no weight manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    store = WeightStore()
    for lid, params in manifest["arrays"].items():
        store.arrays[lid] = {
            name: vol.read_array(in_dir / fname) for name, fname in params.items()
        }
    return store, manifest["net"]


# ---------------------------------------------------------------------------
# Torch execution
# ---------------------------------------------------------------------------


class TorchNet(torch.nn.Module):
    """Interprets a NetworkSpec over torch tensors.

    Parameters and batch-norm buffers are registered from a WeightStore so
    the same graph serves inference and gradient-based training.
    """

    def __init__(self, spec: NetworkSpec, store: WeightStore):
        super().__init__()
        self.spec = spec
        self.flow = channel_flow(spec)
        self._params = torch.nn.ParameterDict()
        for layer in spec.layers:
            if layer.kind in ("conv2d", "conv3d"):
                arrs = store.arrays[layer.id]
                self._params[f"{layer.id}/weight"] = torch.nn.Parameter(
                    torch.from_numpy(arrs["weight"].copy())
                )
                self._params[f"{layer.id}/bias"] = torch.nn.Parameter(
                    torch.from_numpy(arrs["bias"].copy())
                )
            elif layer.kind == "batch_norm":
                arrs = store.arrays[layer.id]
                self._params[f"{layer.id}/weight"] = torch.nn.Parameter(
                    torch.from_numpy(arrs["weight"].copy())
                )
                self._params[f"{layer.id}/bias"] = torch.nn.Parameter(
                    torch.from_numpy(arrs["bias"].copy())
                )
                self.register_buffer(
                    f"rm_{layer.id}", torch.from_numpy(arrs["running_mean"].copy())
                )
                self.register_buffer(
                    f"rv_{layer.id}", torch.from_numpy(arrs["running_var"].copy())
                )

    def decayable_parameters(self) -> list[torch.nn.Parameter]:
        """Conv parameters only; batch-norm scale/shift are excluded from
        weight decay."""
        out = []
        for layer in self.spec.layers:
            if layer.kind in ("conv2d", "conv3d"):
                out.append(self._params[f"{layer.id}/weight"])
                out.append(self._params[f"{layer.id}/bias"])
        return out

    def plain_parameters(self) -> list[torch.nn.Parameter]:
        out = []
        for layer in self.spec.layers:
            if layer.kind == "batch_norm":
                out.append(self._params[f"{layer.id}/weight"])
                out.append(self._params[f"{layer.id}/bias"])
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cache: dict[str, torch.Tensor] = {"input": x}
        pool_state: dict[str, tuple[torch.Tensor, list[int]]] = {}
        for layer in self.spec.layers:
            kind = layer.kind
            if kind == "maxout":
                t = cache[layer.inputs[0]]
                for src in layer.inputs[1:]:
                    t = torch.maximum(t, cache[src])
                cache[layer.id] = t
                continue
            if kind == "unpool_from_indices":
                feats = cache[layer.inputs[0]]
                indices, size = pool_state[layer.inputs[1]]
                cache[layer.id] = F.max_unpool2d(
                    feats, indices, kernel_size=2, output_size=size
                )
                continue
            t = cache[layer.inputs[0]]
            if len(layer.inputs) > 1:
                t = torch.cat([cache[src] for src in layer.inputs], dim=1)
            if kind == "conv2d":
                pad = tuple(k // 2 for k in layer.kernel)
                t = F.conv2d(
                    t,
                    self._params[f"{layer.id}/weight"],
                    self._params[f"{layer.id}/bias"],
                    padding=pad,
                )
            elif kind == "conv3d":
                pad = tuple(k // 2 for k in layer.kernel)
                t = F.conv3d(
                    t,
                    self._params[f"{layer.id}/weight"],
                    self._params[f"{layer.id}/bias"],
                    padding=pad,
                )
            elif kind == "batch_norm":
                t = F.batch_norm(
                    t,
                    getattr(self, f"rm_{layer.id}"),
                    getattr(self, f"rv_{layer.id}"),
                    self._params[f"{layer.id}/weight"],
                    self._params[f"{layer.id}/bias"],
                    training=self.training,
                    momentum=0.1,
                    eps=1e-5,
                )
            elif kind == "relu":
                t = F.relu(t)
            elif kind == "maxpool_with_indices":
                size = list(t.shape)
                t, indices = F.max_pool2d(t, kernel_size=2, return_indices=True)
                pool_state[layer.id] = (indices, size)
            elif kind == "softmax":
                t = F.softmax(t, dim=1)
            cache[layer.id] = t
        return cache[self.spec.output_id()]

    def export_weights(self) -> WeightStore:
        store = WeightStore()
        for layer in self.spec.layers:
            if layer.kind in ("conv2d", "conv3d"):
                store.arrays[layer.id] = {
                    "weight": self._params[f"{layer.id}/weight"].detach().numpy().copy(),
                    "bias": self._params[f"{layer.id}/bias"].detach().numpy().copy(),
                }
            elif layer.kind == "batch_norm":
                store.arrays[layer.id] = {
                    "weight": self._params[f"{layer.id}/weight"].detach().numpy().copy(),
                    "bias": self._params[f"{layer.id}/bias"].detach().numpy().copy(),
                    "running_mean": getattr(self, f"rm_{layer.id}").numpy().copy(),
                    "running_var": getattr(self, f"rv_{layer.id}").numpy().copy(),
                }
        return store


def _normalize_input(spec: NetworkSpec, x: np.ndarray) -> tuple[torch.Tensor, int]:
    """Shape the input as (N, C, *spatial); returns the number of axes added."""
    want = spec.spatial_ndim
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == want:  # bare spatial block, single channel
        if spec.in_channels != 1:
            raise DimensionError(
                f"bare {want}D input but net expects {spec.in_channels} channels"
            )
        arr = arr[None, None]
        added = 2
    elif arr.ndim == want + 1:  # (C, *spatial)
        arr = arr[None]
        added = 1
    elif arr.ndim == want + 2:  # (N, C, *spatial)
        added = 0
    else:
        raise DimensionError(f"cannot interpret input of shape {arr.shape}")
    if arr.shape[1] != spec.in_channels:
        raise DimensionError(
            f"input has {arr.shape[1]} channels, net expects {spec.in_channels}"
        )
    return torch.from_numpy(np.ascontiguousarray(arr)), added


def forward(
    spec: NetworkSpec,
    weights: WeightStore,
    input: np.ndarray,
    strict_canvas: bool = True,
) -> np.ndarray:
    """Deterministic inference over the layer graph.

    Batch norm uses running statistics. With strict_canvas the trailing
    spatial dims must equal the spec canvas; otherwise any size compatible
    with the pooling depth is accepted (the net is fully convolutional).
    """
    tensor, added = _normalize_input(spec, input)
    spatial = tuple(tensor.shape[2:])
    if strict_canvas and spec.input_canvas is not None and spatial != spec.input_canvas:
        raise DimensionError(
            f"input spatial dims {spatial} do not match canvas {spec.input_canvas}"
        )
    if any(layer.kind == "maxpool_with_indices" for layer in spec.layers):
        factor = 2**DOWNSAMPLE_LEVELS
        if any(s % factor for s in spatial):
            raise DimensionError(
                f"spatial dims {spatial} must be divisible by {factor}"
            )
    net = TorchNet(spec, weights)
    net.eval()
    with torch.inference_mode():
        out = net(tensor).numpy().copy()
    if added >= 1:  # drop the batch axis we introduced; the class axis stays
        out = out[0]
    return out

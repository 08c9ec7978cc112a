"""Network topologies, parameter initialization and the model bundle file format."""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from label_map import PATHOLOGY_LABELS, TRIAGE_CLASSES
from preprocess import PreprocessConfig
from tensor_ops import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAveragePool,
    Graph,
    Layer,
    LayerParams,
    MBConvBlock,
    ReLU,
    Sigmoid,
    Softmax,
    Swish,
    ZeroPadding2D,
    init_batchnorm_params,
    init_conv_params,
    init_dense_params,
)
from utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"CXR2"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")

TRIAGE_HEAD = "triage_head"
MULTIPATH_HEAD = "multipath_head"
HEAD_OUTPUTS = {TRIAGE_HEAD: 2, MULTIPATH_HEAD: 8}
EXTRACTOR_PREFIX = "extractor."


class BundleError(Exception):
    """Base class for model bundle errors."""


class BundleCorruptError(BundleError):
    """File is truncated or not a bundle."""


class BundleVersionError(BundleError):
    """Bundle was written with an unsupported format version."""


class BundleShapeError(BundleError):
    """Stored parameters do not fit the stored network spec."""


class IncompatibleBundleError(BundleError):
    """Extractor topologies differ between source and target."""


@dataclass
class StemConfig:
    filters: int = 16
    kernel: int = 3
    stride: int = 2


@dataclass
class MBConvConfig:
    in_channels: int
    out_channels: int
    expansion_ratio: int = 4
    kernel: int = 3
    stride: int = 1
    repeats: int = 1

    def __post_init__(self):
        if self.expansion_ratio < 1:
            raise ValueError(f"expansion_ratio must be >= 1, got {self.expansion_ratio}")
        if self.kernel not in (1, 3, 5):
            raise ValueError(f"kernel must be 1, 3 or 5, got {self.kernel}")
        if self.stride < 1 or self.repeats < 1:
            raise ValueError("stride and repeats must be >= 1")


@dataclass
class HeadConfig:
    kind: str
    dense_units: List[int]
    dropout: float
    transfer_filters: int = 0

    def __post_init__(self):
        if self.kind not in HEAD_OUTPUTS:
            raise ValueError(f"Unknown head kind: {self.kind}")


@dataclass
class NetworkSpec:
    """Declarative description of one network."""

    stem: StemConfig
    blocks: List[MBConvConfig]
    head: HeadConfig
    class_names: List[str]
    input_shape: Tuple[int, int, int] = (3, 224, 224)
    width_scale: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        expected = HEAD_OUTPUTS[self.head.kind]
        if self.head.dense_units[-1] != expected:
            raise ValueError(f"{self.head.kind} must end in {expected} units")
        if len(self.class_names) != expected:
            raise ValueError(
                f"{self.head.kind} has {expected} outputs but {len(self.class_names)} class names"
            )

    @property
    def output_units(self) -> int:
        return HEAD_OUTPUTS[self.head.kind]

    @property
    def extractor_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.stem.filters

    @property
    def cam_layer(self) -> str:
        """Layer whose activations feed Grad-CAM."""
        if self.head.kind == MULTIPATH_HEAD:
            return "head.transfer_act"
        return block_names(self.blocks)[-1] if self.blocks else "extractor.stem_act"

    @property
    def logit_layer(self) -> str:
        return "head.output"

    def extractor_dict(self) -> Dict[str, Any]:
        return {
            "stem": asdict(self.stem),
            "blocks": [asdict(b) for b in self.blocks],
            "input_shape": list(self.input_shape),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self.extractor_dict(),
            "head": asdict(self.head),
            "class_names": list(self.class_names),
            "width_scale": self.width_scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        return cls(
            stem=StemConfig(**data["stem"]),
            blocks=[MBConvConfig(**b) for b in data["blocks"]],
            head=HeadConfig(**data["head"]),
            class_names=list(data["class_names"]),
            input_shape=tuple(data["input_shape"]),
            width_scale=float(data.get("width_scale", 1.0)),
        )


def block_names(blocks: List[MBConvConfig]) -> List[str]:
    names = []
    for stage, cfg in enumerate(blocks, start=1):
        for rep in range(1, cfg.repeats + 1):
            names.append(f"{EXTRACTOR_PREFIX}stage{stage}_block{rep}")
    return names


def _scaled(channels: int, width_scale: float) -> int:
    return max(1, int(round(channels * width_scale)))


def default_extractor(width_scale: float) -> Tuple[StemConfig, List[MBConvConfig]]:
    """Stem conv plus four single-repeat MBConv stages."""
    if width_scale <= 0:
        raise ValueError(f"width_scale must be > 0, got {width_scale}")
    stem = StemConfig(filters=_scaled(16, width_scale))
    widths = [_scaled(c, width_scale) for c in (24, 40, 80, 80)]
    strides = (2, 2, 2, 1)
    blocks = []
    in_ch = stem.filters
    for out_ch, stride in zip(widths, strides):
        blocks.append(MBConvConfig(in_ch, out_ch, expansion_ratio=4, kernel=3, stride=stride))
        in_ch = out_ch
    return stem, blocks


def _spatial_after_extractor(spec: NetworkSpec) -> Tuple[int, int]:
    _, h, w = spec.input_shape

    def shrink(size: int, kernel: int, stride: int) -> int:
        pad = (kernel - 1) // 2
        return (size + 2 * pad - kernel) // stride + 1

    h, w = shrink(h, spec.stem.kernel, spec.stem.stride), shrink(w, spec.stem.kernel, spec.stem.stride)
    for cfg in spec.blocks:
        for rep in range(cfg.repeats):
            stride = cfg.stride if rep == 0 else 1
            h, w = shrink(h, cfg.kernel, stride), shrink(w, cfg.kernel, stride)
    if h < 1 or w < 1:
        raise ValueError(f"Input shape {spec.input_shape} too small for the extractor")
    return h, w


def _build_extractor(spec: NetworkSpec, rng: np.random.Generator) -> List[Layer]:
    in_ch = spec.input_shape[0]
    stem = spec.stem
    layers: List[Layer] = [
        Conv2D(
            f"{EXTRACTOR_PREFIX}stem_conv",
            init_conv_params(rng, stem.filters, in_ch, stem.kernel, bias=False),
            stride=stem.stride,
            padding=(stem.kernel - 1) // 2,
        ),
        BatchNorm(f"{EXTRACTOR_PREFIX}stem_bn", init_batchnorm_params(stem.filters)),
        Swish(f"{EXTRACTOR_PREFIX}stem_act"),
    ]
    names = iter(block_names(spec.blocks))
    for cfg in spec.blocks:
        for rep in range(cfg.repeats):
            layers.append(
                MBConvBlock(
                    next(names),
                    cfg.in_channels if rep == 0 else cfg.out_channels,
                    cfg.out_channels,
                    cfg.expansion_ratio,
                    cfg.kernel,
                    cfg.stride if rep == 0 else 1,
                    rng,
                )
            )
    return layers


def _build_triage_head(spec: NetworkSpec, rng: np.random.Generator) -> List[Layer]:
    h, w = _spatial_after_extractor(spec)
    fan_in = spec.extractor_channels * h * w
    layers: List[Layer] = [
        Flatten("head.flatten"),
        Dropout("head.dropout", spec.head.dropout),
    ]
    hidden = spec.head.dense_units[:-1]
    for index, units in enumerate(hidden, start=1):
        layers.append(Dense(f"head.dense{index}", init_dense_params(rng, fan_in, units)))
        layers.append(ReLU(f"head.dense{index}_act"))
        fan_in = units
    layers.append(Dense("head.output", init_dense_params(rng, fan_in, spec.output_units)))
    layers.append(Softmax("head.activation"))
    return layers


def _build_multipath_head(spec: NetworkSpec, rng: np.random.Generator) -> List[Layer]:
    filters = spec.head.transfer_filters
    layers: List[Layer] = [
        ZeroPadding2D("head.transfer_pad", 1),
        Conv2D(
            "head.transfer_conv",
            init_conv_params(rng, filters, spec.extractor_channels, 3, bias=True),
        ),
        ReLU("head.transfer_act"),
        GlobalAveragePool("head.gap"),
        Dropout("head.dropout", spec.head.dropout),
    ]
    fan_in = filters
    for index, units in enumerate(spec.head.dense_units[:-1], start=1):
        layers.append(Dense(f"head.dense{index}", init_dense_params(rng, fan_in, units)))
        layers.append(ReLU(f"head.dense{index}_act"))
        fan_in = units
    layers.append(Dense("head.output", init_dense_params(rng, fan_in, spec.output_units)))
    layers.append(Sigmoid("head.activation"))
    return layers


def build_graph(spec: NetworkSpec, seed: int = 0) -> Graph:
    """Instantiate ``spec`` with He-uniform weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = _build_extractor(spec, rng)
    if spec.head.kind == TRIAGE_HEAD:
        layers += _build_triage_head(spec, rng)
    else:
        layers += _build_multipath_head(spec, rng)
    graph = Graph(layers)
    graph.snap_to_storage()
    return graph


def triage_spec(width_scale: float = 1.0, input_size: int = 224, head_scale: float = 1.0) -> NetworkSpec:
    stem, blocks = default_extractor(width_scale)
    return NetworkSpec(
        stem=stem,
        blocks=blocks,
        head=HeadConfig(
            kind=TRIAGE_HEAD,
            dense_units=[_scaled(256, head_scale), _scaled(128, head_scale), 2],
            dropout=0.3,
        ),
        class_names=list(TRIAGE_CLASSES),
        input_shape=(3, input_size, input_size),
        width_scale=width_scale,
    )


def multipath_spec(width_scale: float = 1.0, input_size: int = 224, head_scale: float = 1.0) -> NetworkSpec:
    stem, blocks = default_extractor(width_scale)
    return NetworkSpec(
        stem=stem,
        blocks=blocks,
        head=HeadConfig(
            kind=MULTIPATH_HEAD,
            dense_units=[_scaled(1024, head_scale), 8],
            dropout=0.2,
            transfer_filters=_scaled(512, head_scale),
        ),
        class_names=list(PATHOLOGY_LABELS),
        input_shape=(3, input_size, input_size),
        width_scale=width_scale,
    )


@dataclass
class ModelBundle:
    """A network spec with its parameters and preprocessing settings."""

    spec: NetworkSpec
    graph: Graph
    preprocessing: PreprocessConfig = field(default_factory=PreprocessConfig)
    threshold: float = 0.5
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")

    @property
    def params(self) -> Dict[str, LayerParams]:
        return self.graph.named_params()

    @property
    def class_names(self) -> List[str]:
        return self.spec.class_names

    def predict(self, x: np.ndarray, dtype: Any = np.float64) -> np.ndarray:
        """Inference-mode forward pass on an (N, 3, H, W) batch."""
        return self.graph.forward(x, train=False, dtype=dtype)

    def n_params(self, trainable_only: bool = False) -> int:
        total = 0
        for params in self.params.values():
            if trainable_only and not params.trainable:
                continue
            total += sum(a.size for a in params.optimizable().values())
        return total


def build_triage_net(
    width_scale: float = 1.0, seed: int = 0, input_size: int = 224, head_scale: float = 1.0
) -> ModelBundle:
    """Extractor, flatten, dropout 0.3, dense 256/128/2 and softmax."""
    spec = triage_spec(width_scale, input_size, head_scale)
    graph = build_graph(spec, seed)
    logger.info(f"Built triage network (width {width_scale}, input {input_size})")
    return ModelBundle(spec, graph, PreprocessConfig(target_size=(input_size, input_size)))


def build_multipath_net(
    width_scale: float = 1.0, seed: int = 0, input_size: int = 224, head_scale: float = 1.0
) -> ModelBundle:
    """Extractor, padded 3x3 transfer conv, GAP, dropout 0.2, dense 1024/8 and sigmoid."""
    spec = multipath_spec(width_scale, input_size, head_scale)
    graph = build_graph(spec, seed)
    logger.info(f"Built pathology network (width {width_scale}, input {input_size})")
    return ModelBundle(spec, graph, PreprocessConfig(target_size=(input_size, input_size)))


def _extractor_layers(graph: Graph) -> List[Layer]:
    return [layer for layer in graph.layers if layer.name.startswith(EXTRACTOR_PREFIX)]


def transplant_extractor(source: ModelBundle, target: NetworkSpec, seed: int = 0) -> ModelBundle:
    """Copy the source extractor into a freshly initialized ``target`` network.

    The copied extractor is frozen; the head keeps its fresh initialization.
    """
    graph = build_graph(target, seed)
    src_layers = _extractor_layers(source.graph)
    dst_layers = _extractor_layers(graph)
    for src, dst in zip(src_layers, dst_layers):
        if src.name != dst.name or src.config() != dst.config():
            raise IncompatibleBundleError(f"Extractor topologies differ at layer '{dst.name}'")
    if len(src_layers) != len(dst_layers):
        longer = src_layers if len(src_layers) > len(dst_layers) else dst_layers
        raise IncompatibleBundleError(
            f"Extractor topologies differ at layer '{longer[min(len(src_layers), len(dst_layers))].name}'"
        )
    if source.spec.input_shape != target.input_shape:
        raise IncompatibleBundleError(
            f"Extractor topologies differ at layer '{EXTRACTOR_PREFIX}stem_conv' "
            f"(input shape {source.spec.input_shape} vs {target.input_shape})"
        )

    src_params = source.params
    for name, params in graph.named_params().items():
        if not name.startswith(EXTRACTOR_PREFIX):
            continue
        donor = src_params[name]
        for key, value in donor.arrays().items():
            params.set_array(key, value.copy())
    frozen = graph.set_trainable(EXTRACTOR_PREFIX, False)
    logger.info(f"Transplanted extractor ({frozen} parameter sets frozen)")
    return ModelBundle(target, graph, source.preprocessing, threshold=0.5)


# ---------------------------------------------------------------------------
# Bundle file format
# ---------------------------------------------------------------------------


def _param_table(graph: Graph) -> List[Dict[str, Any]]:
    table = []
    for name, params in graph.named_params().items():
        table.append(
            {
                "name": name,
                "kind": params.kind,
                "trainable": params.trainable,
                "arrays": [
                    {"key": key, "shape": list(value.shape)}
                    for key, value in params.arrays().items()
                ],
            }
        )
    return table


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    """Serialize: magic, version, header length, JSON header, float32 blobs."""
    header = {
        "spec": bundle.spec.to_dict(),
        "preprocessing": bundle.preprocessing.to_dict(),
        "threshold": bundle.threshold,
        "params": _param_table(bundle.graph),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)), header_bytes]
    for params in bundle.params.values():
        for value in params.arrays().values():
            chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def bundle_from_bytes(data: bytes) -> Tuple[ModelBundle, int]:
    """Parse a bundle from the start of ``data``.

    Returns:
        Tuple of (bundle, number of bytes consumed)
    """
    if len(data) < _PREFIX.size:
        raise BundleCorruptError("File too short for a bundle header")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise BundleCorruptError(f"Bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise BundleVersionError(
            f"Unsupported bundle format version {version} (expected {FORMAT_VERSION})"
        )
    offset = _PREFIX.size
    if offset + header_len > len(data):
        raise BundleCorruptError("Truncated bundle header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        preprocessing = PreprocessConfig.from_dict(header["preprocessing"])
        threshold = float(header["threshold"])
        table = header["params"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BundleCorruptError(f"Unreadable bundle header: {e}") from e
    offset += header_len

    graph = build_graph(spec, seed=0)
    params = graph.named_params()
    declared = [entry["name"] for entry in table]
    if declared != list(params):
        missing = sorted(set(params) - set(declared))
        extra = sorted(set(declared) - set(params))
        raise BundleShapeError(
            f"Parameter table does not match spec (missing {missing[:3]}, unexpected {extra[:3]})"
        )

    for entry in table:
        target = params[entry["name"]]
        target.trainable = bool(entry["trainable"])
        current = target.arrays()
        if [a["key"] for a in entry["arrays"]] != list(current):
            raise BundleShapeError(f"Array set mismatch for '{entry['name']}'")
        for array in entry["arrays"]:
            shape = tuple(array["shape"])
            if shape != current[array["key"]].shape:
                raise BundleShapeError(
                    f"'{entry['name']}.{array['key']}': stored shape {shape}, "
                    f"spec requires {current[array['key']].shape}"
                )
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(data):
                raise BundleCorruptError(f"Truncated parameter blob '{entry['name']}.{array['key']}'")
            blob = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
            target.set_array(array["key"], blob.astype(np.float64).reshape(shape))
            offset += nbytes

    try:
        bundle = ModelBundle(spec, graph, preprocessing, threshold, version)
    except ValueError as e:
        raise BundleCorruptError(str(e)) from e
    return bundle, offset


def save_bundle(bundle: ModelBundle, path: Union[str, Path]) -> None:
    atomic_write_bytes(path, bundle_to_bytes(bundle))
    logger.info(f"Saved model bundle to {path}")


def load_bundle(path: Union[str, Path], expected_head: Optional[str] = None) -> ModelBundle:
    """Load a bundle file; trailing bytes are treated as corruption."""
    data = Path(path).read_bytes()
    bundle, consumed = bundle_from_bytes(data)
    if consumed != len(data):
        raise BundleCorruptError(f"{len(data) - consumed} unexpected trailing byte(s) in {path}")
    if expected_head and bundle.spec.head.kind != expected_head:
        raise IncompatibleBundleError(
            f"{path} holds a {bundle.spec.head.kind}, expected {expected_head}"
        )
    logger.debug(f"Loaded {bundle.spec.head.kind} bundle from {path}")
    return bundle

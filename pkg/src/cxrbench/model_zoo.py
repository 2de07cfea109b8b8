"""Backbone registry, classification head and per-backbone preprocessing.

Backbones are torchvision feature extractors where torchvision ships the
architecture; the remaining registry rows are metadata only until a builder
is attached with :func:`register_builder`.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import DataError, InitializationError, RegistryLookupError, ValidationError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
CAFFE_BGR_MEAN = np.array([103.939, 116.779, 123.68], dtype=np.float32)

NORMALIZATIONS = ("unit", "imagenet", "tf", "caffe", "raw")


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_resolution: int
    last_conv_shape: tuple[int, int, int]  # (w, y, z): spatial, spatial, channels
    pretrained_source: str = "imagenet"
    reference_trainable_params: int | None = None
    normalization: str = "imagenet"

    def __post_init__(self):
        if self.input_resolution <= 0 or any(v <= 0 for v in self.last_conv_shape):
            raise ValidationError(f"non-positive dimensions in {self}")
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(f"unknown normalization {self.normalization!r}")

    @property
    def channels(self) -> int:
        return self.last_conv_shape[2]


@dataclass(frozen=True)
class HeadSpec:
    dense_units: int = 256
    dropout_rate: float = 0.20
    output_classes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dense_units <= 0 or self.output_classes < 2:
            raise ValidationError(f"invalid head {self}")


def _row(name, res, shape, params, norm="imagenet"):
    return BackboneSpec(name, res, shape, "imagenet", params, norm)


# (name, input resolution, last conv output, trainable params incl. head)
_TABLE = [
    _row("DenseNet121", 224, (7, 7, 1024), 7_216_770),
    _row("DenseNet169", 224, (7, 7, 1664), 12_911_234),
    _row("DenseNet201", 224, (7, 7, 1920), 18_585_218),
    _row("EfficientNetB0", 224, (7, 7, 1280), 4_335_998),
    _row("EfficientNetB1", 240, (8, 8, 1280), 6_841_634),
    _row("EfficientNetB2", 260, (9, 9, 1408), 8_062_212),
    _row("EfficientNetB3", 300, (10, 10, 1536), 11_090_218),
    _row("InceptionResNetV2", 299, (8, 8, 1536), 54_670_178, "tf"),
    _row("InceptionV3", 299, (8, 8, 2048), 22_293_410, "tf"),
    _row("MobileNet", 224, (7, 7, 1024), 3_469_890, "tf"),
    _row("MobileNetV2", 224, (7, 7, 1280), 2_552_322),
    _row("NASNetMobile", 224, (7, 7, 1056), 4_504_084, "tf"),
    _row("ResNet101", 224, (7, 7, 2048), 43_077_890),
    _row("ResNet101V2", 224, (7, 7, 2048), 43_053_954, "tf"),
    _row("ResNet152", 224, (7, 7, 2048), 58_744_578),
    _row("ResNet152V2", 224, (7, 7, 2048), 58_712_962, "tf"),
    _row("ResNet50", 224, (7, 7, 2048), 24_059_650),
    _row("ResNet50V2", 224, (7, 7, 2048), 24_044_418, "tf"),
    _row("VGG16", 224, (7, 7, 512), 14_846_530),
    _row("VGG19", 224, (7, 7, 512), 20_156_226),
    _row("Xception", 299, (10, 10, 2048), 21_332_010, "tf"),
]

STUB = BackboneSpec("stub", 32, (8, 8, 32), "none", None, "unit")

BENCHMARK_BACKBONES: tuple[str, ...] = tuple(s.name for s in _TABLE)
_REGISTRY: dict[str, BackboneSpec] = {s.name: s for s in _TABLE}
_REGISTRY[STUB.name] = STUB


def registry_names() -> list[str]:
    return list(_REGISTRY)


def registry_lookup(name: str) -> BackboneSpec:
    """Return the registered spec for ``name``.

    Variants of the stub with another input size are addressed as
    ``stub@<size>`` (e.g. ``stub@64``).
    """
    if name.startswith("stub@"):
        try:
            return stub_spec(int(name.split("@", 1)[1]))
        except ValueError:
            pass
    try:
        return _REGISTRY[name]
    except KeyError:
        raise RegistryLookupError(
            f"unknown backbone {name!r}; valid names: {', '.join(registry_names())}"
        ) from None


def stub_spec(input_size: int) -> BackboneSpec:
    if input_size < 4 or input_size % 4:
        raise ValidationError(f"stub input size must be a positive multiple of 4, got {input_size}")
    s = input_size // 4
    return dataclasses.replace(STUB, name="stub" if input_size == 32 else f"stub@{input_size}",
                               input_resolution=input_size, last_conv_shape=(s, s, 32))


def registry_tsv() -> str:
    lines = ["name\tresolution\tlast_conv\treference_params"]
    for s in _REGISTRY.values():
        w, y, z = s.last_conv_shape
        params = "" if s.reference_trainable_params is None else str(s.reference_trainable_params)
        lines.append(f"{s.name}\t{s.input_resolution}x{s.input_resolution}\t{w}x{y}x{z}\t{params}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------


class StubTrunk(nn.Module):
    """Two conv/pool stages, 3 -> 32 channels at a quarter of the input size."""

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )

    def forward(self, x):
        return self.features(x)


def _tv():
    import torchvision.models as tvm

    return tvm


def _load(factory: Callable, pretrained: bool, **kwargs) -> nn.Module:
    weights = "DEFAULT" if pretrained else None
    try:
        return factory(weights=weights, **kwargs)
    except Exception as e:  # download or cache failures surface from deep inside torch.hub
        if not pretrained:
            raise
        raise InitializationError(f"could not obtain pretrained weights for {factory.__name__}: {e}") from e


def _densenet(fn):
    def build(pretrained):
        m = _load(getattr(_tv(), fn), pretrained)
        return nn.Sequential(m.features, nn.ReLU(inplace=True))

    return build


def _features(fn):
    def build(pretrained):
        return _load(getattr(_tv(), fn), pretrained).features

    return build


def _resnet(fn):
    def build(pretrained):
        m = _load(getattr(_tv(), fn), pretrained)
        return nn.Sequential(m.conv1, m.bn1, m.relu, m.maxpool, m.layer1, m.layer2, m.layer3, m.layer4)

    return build


_INCEPTION_STAGES = (
    "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1",
    "Conv2d_4a_3x3", "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a",
    "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
)


def _inception_v3(pretrained):
    tvm = _tv()
    if pretrained:
        m = _load(tvm.inception_v3, True)
    else:
        m = tvm.inception_v3(weights=None, aux_logits=False, init_weights=True)
    return nn.Sequential(*[getattr(m, n) for n in _INCEPTION_STAGES])


BackboneBuilder = Callable[[bool], nn.Module]

_BUILDERS: dict[str, BackboneBuilder] = {
    "DenseNet121": _densenet("densenet121"),
    "DenseNet169": _densenet("densenet169"),
    "DenseNet201": _densenet("densenet201"),
    "EfficientNetB0": _features("efficientnet_b0"),
    "EfficientNetB1": _features("efficientnet_b1"),
    "EfficientNetB2": _features("efficientnet_b2"),
    "EfficientNetB3": _features("efficientnet_b3"),
    "InceptionV3": _inception_v3,
    "MobileNetV2": _features("mobilenet_v2"),
    "ResNet50": _resnet("resnet50"),
    "ResNet101": _resnet("resnet101"),
    "ResNet152": _resnet("resnet152"),
    "VGG16": _features("vgg16"),
    "VGG19": _features("vgg19"),
}


def register_builder(name: str, builder: BackboneBuilder) -> None:
    """Attach a feature-extractor factory to a registered backbone name.

    ``builder(pretrained)`` must return a module mapping ``(B, 3, x, x)`` to
    ``(B, z, w, y)``.
    """
    registry_lookup(name)
    _BUILDERS[name] = builder


def has_implementation(name: str) -> bool:
    return name in _BUILDERS or registry_lookup(name).pretrained_source == "none"


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


def build_head(channels: int, head: HeadSpec = HeadSpec()) -> nn.Sequential:
    return nn.Sequential(
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(channels, head.dense_units),
        nn.ReLU(inplace=True),
        nn.Dropout(head.dropout_rate),
        nn.Linear(head.dense_units, head.output_classes),
    )


def head_param_count(z: int, head: HeadSpec = HeadSpec()) -> int:
    if z <= 0:
        raise ValidationError(f"channel count must be positive, got {z}")
    u, k = head.dense_units, head.output_classes
    return z * u + u + u * k + k


class TransferClassifier(nn.Module):
    """Backbone followed by GAP -> dense(256, ReLU) -> dropout -> 2 logits.

    ``forward`` returns pre-softmax outputs; the loss applies the softmax.
    """

    def __init__(self, spec: BackboneSpec, backbone: nn.Module, head: HeadSpec = HeadSpec()):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.head = build_head(spec.channels, head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "backbone": [p for p in self.backbone.parameters() if p.requires_grad],
            "head": [p for p in self.head.parameters() if p.requires_grad],
        }

    def trainable_params(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_classifier(spec: BackboneSpec, head: HeadSpec = HeadSpec(), init: str = "pretrained") -> TransferClassifier:
    if init not in ("pretrained", "random"):
        raise ValidationError(f"init must be 'pretrained' or 'random', got {init!r}")
    pretrained = init == "pretrained"
    if spec.pretrained_source == "none":
        if pretrained:
            raise InitializationError(f"backbone {spec.name!r} has no pretrained weights; use init='random'")
        backbone = StubTrunk()
    else:
        builder = _BUILDERS.get(spec.name)
        if builder is None:
            raise InitializationError(
                f"no implementation available for {spec.name!r}; attach one with register_builder()"
            )
        backbone = builder(pretrained)

    model = TransferClassifier(spec, backbone, head)
    if spec.reference_trainable_params is not None and model.trainable_params() != spec.reference_trainable_params:
        warnings.warn(
            f"{spec.name}: {model.trainable_params():,} trainable parameters, "
            f"reference lists {spec.reference_trainable_params:,}",
            stacklevel=2,
        )
    return model


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _normalize(x: np.ndarray, how: str) -> np.ndarray:
    """Map 0..255 RGB values to the model's input range."""
    if how == "unit":
        return x / 255.0
    if how == "imagenet":
        return (x / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
    if how == "tf":
        return x / 127.5 - 1.0
    if how == "caffe":
        return x[..., ::-1] - CAFFE_BGR_MEAN
    return x


def _resize(channel: np.ndarray, size: int) -> np.ndarray:
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float32)


def preprocess(image, spec: BackboneSpec) -> np.ndarray:
    """Resize to ``(x, x)`` bilinearly, replicate grayscale, and normalise.

    ``image`` is a path, a PIL image, or an array of shape ``(h, w)`` or
    ``(h, w, c)``. Integer rasters are treated as 0..255 pixel values and
    normalised with the backbone's convention; floating-point arrays are
    taken as already normalised and only resized. Returns float32
    ``(x, x, 3)``.
    """
    if isinstance(image, (str, bytes)) or hasattr(image, "__fspath__"):
        try:
            with Image.open(image) as im:
                im.load()
                image = im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
        except (OSError, ValueError) as e:
            raise DataError(f"cannot decode image {image}: {e}") from e
    if isinstance(image, Image.Image):
        if image.mode not in ("L", "RGB"):
            image = image.convert("RGB")
        image = np.asarray(image)

    arr = np.asarray(image)
    if arr.size == 0:
        raise DataError("empty image")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise DataError(f"unsupported image shape {arr.shape}")
    arr = arr[..., :3]

    already_normalized = np.issubdtype(arr.dtype, np.floating)
    x = spec.input_resolution
    out = arr.astype(np.float32)
    if out.shape[:2] != (x, x):
        out = np.stack([_resize(out[..., c], x) for c in range(3)], axis=-1)
    if not already_normalized:
        out = _normalize(out, spec.normalization).astype(np.float32)
    return np.ascontiguousarray(out)


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    """``(B, x, x, 3)`` or ``(x, x, 3)`` arrays to channels-first tensors."""
    t = torch.from_numpy(np.ascontiguousarray(batch))
    return t.permute(0, 3, 1, 2) if t.ndim == 4 else t.permute(2, 0, 1)

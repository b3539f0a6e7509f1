"""Coupled convolutional encoders for photos and sketch-attribute stacks.

Both encoders share one architecture family: conv stages (each conv ->
per-channel affine -> relu -> optional pool), ending in global average
pooling and an optional linear projection. The photo encoder reads 3-channel
images; the sketch encoder reads a grayscale sketch stacked with one constant
binary plane per indicator attribute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from attrcenter import autodiff as ad
from attrcenter.autodiff import DiffTensor, ShapeError
from attrcenter.lattice import AttributeCombination, AttributeSchema


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 1  # pooling window after the stage; 1 means none


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture description; the last stage's channel count feeds the
    global average pool, so it must equal ``embedding_dim``."""

    input_channels: int
    input_height: int
    input_width: int
    stages: tuple
    embedding_dim: int
    final_projection: bool = True
    pool_kind: str = "avg"
    normalize_input: bool = True   # per-sample whitening of the raw input
    norm_kind: str = "batch"       # "batch": batch-norm with running stats; "affine": static scale+shift
    attribute_channels: int = 0    # trailing input channels whose first-conv weights start at zero
    preset: Optional[str] = None

    def __post_init__(self):
        if self.input_channels < 1 or self.input_height < 1 or self.input_width < 1:
            raise ValueError("input dimensions must be positive")
        if not self.stages:
            raise ValueError("encoder needs at least one conv stage")
        if self.pool_kind not in ("avg", "max"):
            raise ValueError(f"unknown pool kind {self.pool_kind!r}")
        if self.norm_kind not in ("batch", "affine"):
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.stages[-1].out_channels != self.embedding_dim:
            raise ValueError(
                f"last stage must emit embedding_dim={self.embedding_dim} channels "
                f"(got {self.stages[-1].out_channels}); global average pooling defines the embedding")
        if not 0 <= self.attribute_channels < self.input_channels:
            raise ValueError(
                f"attribute_channels {self.attribute_channels} must be < input channels {self.input_channels}")

    @property
    def input_shape(self) -> tuple:
        return (self.input_channels, self.input_height, self.input_width)


def desk_config(input_channels: int, embedding_dim: int = 16,
                input_height: int = 32, input_width: int = 32,
                channels: tuple = (8, 16)) -> EncoderConfig:
    """Small conv stack sized so finite-difference checks stay cheap.

    ``channels`` sets the width of all stages but the last, which always
    emits ``embedding_dim`` maps into the global average pool.
    """
    stages = tuple(ConvStage(c, 3, 1, 2) for c in channels[:-1])
    stages += (ConvStage(embedding_dim, 3, 1, 2),)
    return EncoderConfig(
        input_channels=input_channels,
        input_height=input_height,
        input_width=input_width,
        stages=stages,
        embedding_dim=embedding_dim,
        final_projection=True,
        pool_kind="avg",
    )


def paper_preset() -> tuple:
    """(photo, sketch) configs: VGG16 trunk with the tail swapped for
    256/256/64 convs and the final max pool replaced by global average
    pooling, on 250x200 inputs. Construction-scale only."""
    stages = (
        ConvStage(64), ConvStage(64, pool=2),
        ConvStage(128), ConvStage(128, pool=2),
        ConvStage(256), ConvStage(256), ConvStage(256, pool=2),
        ConvStage(512), ConvStage(512), ConvStage(512, pool=2),
        ConvStage(256), ConvStage(256), ConvStage(64),
    )
    common = dict(input_height=250, input_width=200, stages=stages,
                  embedding_dim=64, final_projection=False, pool_kind="max")
    photo = EncoderConfig(input_channels=3, preset="photo", **common)
    sketch = EncoderConfig(input_channels=13, preset="sketch-attribute", **common)
    return photo, sketch


@dataclass
class SketchAttributeInput:
    """Grayscale sketch plane plus one constant binary plane per attribute."""

    sketch: np.ndarray
    planes: np.ndarray

    def __post_init__(self):
        if self.sketch.ndim != 2:
            raise ShapeError(f"sketch plane must be 2-d, got shape {self.sketch.shape}")
        if self.planes.ndim != 3 or self.planes.shape[1:] != self.sketch.shape:
            raise ShapeError(
                f"attribute planes {self.planes.shape} do not match sketch {self.sketch.shape}")
        flat = self.planes.reshape(self.planes.shape[0], -1)
        if flat.size and not (flat == flat[:, :1]).all():
            raise ShapeError("attribute planes must be constant-valued")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.sketch[None], self.planes], axis=0)


def assemble_sketch_input(sketch: np.ndarray, combo: AttributeCombination,
                          config: Optional[EncoderConfig] = None,
                          use_attributes: bool = True) -> SketchAttributeInput:
    """Stack a sketch with the combination's binary indicator planes.

    ``use_attributes=False`` zeroes the planes (attribute-unaware baseline).
    """
    sketch = np.asarray(sketch, dtype=np.float64)
    if sketch.ndim != 2:
        raise ShapeError(f"sketch must be 2-d, got shape {sketch.shape}")
    bits = combo.indicator_vector()
    if not use_attributes:
        bits = np.zeros_like(bits)
    h, w = sketch.shape
    planes = np.repeat(bits[:, None, None], h, axis=1)
    planes = np.repeat(planes, w, axis=2)
    out = SketchAttributeInput(sketch=sketch, planes=planes)
    if config is not None:
        if (h, w) != (config.input_height, config.input_width):
            raise ShapeError(
                f"sketch size ({h},{w}) does not match config "
                f"({config.input_height},{config.input_width})")
        if 1 + bits.size != config.input_channels:
            raise ShapeError(
                f"1 sketch + {bits.size} attribute planes != config channels {config.input_channels}")
    return out


class Encoder:
    """One convolutional embedding network with named, checkpointable parameters."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict = {}
        self.buffers: dict = {}
        in_c = config.input_channels
        for i, st in enumerate(config.stages):
            fan_in = in_c * st.kernel * st.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(st.out_channels, in_c, st.kernel, st.kernel))
            if i == 0 and config.attribute_channels:
                # attribute-neutral start: fusion weights grow from zero under
                # the attribute-loss gradient instead of drowning the strokes
                w[:, in_c - config.attribute_channels:, :, :] = 0.0
            self._add(f"conv{i}.weight", w)
            self._add(f"conv{i}.bias", np.zeros(st.out_channels))
            self._add(f"affine{i}.scale", np.ones(st.out_channels))
            self._add(f"affine{i}.shift", np.zeros(st.out_channels))
            if config.norm_kind == "batch":
                self.buffers[f"bn{i}.mean"] = np.zeros(st.out_channels, dtype=self.dtype)
                self.buffers[f"bn{i}.var"] = np.ones(st.out_channels, dtype=self.dtype)
            in_c = st.out_channels
        if config.final_projection:
            d = config.embedding_dim
            self._add("proj.weight", rng.normal(0.0, np.sqrt(1.0 / d), size=(d, d)))
            self._add("proj.bias", np.zeros(d))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = DiffTensor(value.astype(self.dtype), requires_grad=True)

    def parameters(self) -> list:
        return list(self.params.items())

    def load_param(self, name: str, value: np.ndarray) -> None:
        cur = self.params[name]
        if cur.shape != value.shape:
            raise ShapeError(f"parameter {name}: shape {value.shape} does not match {cur.shape}")
        cur.data[...] = value.astype(self.dtype)

    def encode(self, x: Union[DiffTensor, np.ndarray], train: bool = False) -> DiffTensor:
        """Map a (N, C, H, W) batch to (N, d) embeddings.

        ``train=True`` normalizes with batch statistics (and updates the
        running buffers); inference uses the stored running statistics.
        """
        if not isinstance(x, DiffTensor):
            x = DiffTensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4:
            raise ShapeError(f"encode: expected (N,C,H,W) input, got shape {x.shape}")
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError(
                f"encode: input shape {x.shape[1:]} does not match config {self.config.input_shape}")
        h = self._whiten(x) if self.config.normalize_input else x
        for i, st in enumerate(self.config.stages):
            h = ad.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"],
                          stride=st.stride, padding=st.kernel // 2)
            h = self._normalize_stage(h, i, train)
            h = ad.relu(h)
            if st.pool > 1:
                h = ad.max_pool2d(h, st.pool) if self.config.pool_kind == "max" else ad.avg_pool2d(h, st.pool)
        emb = ad.global_avg_pool(h)
        if self.config.final_projection:
            emb = ad.add(ad.matmul(emb, ad.transpose(self.params["proj.weight"])), self.params["proj.bias"])
        return emb

    _BN_MOMENTUM = 0.1

    def _normalize_stage(self, h: DiffTensor, i: int, train: bool) -> DiffTensor:
        scale = self.params[f"affine{i}.scale"]
        shift = self.params[f"affine{i}.shift"]
        if self.config.norm_kind == "affine":
            return ad.channel_affine(h, scale, shift)
        if train:
            mean = h.data.mean(axis=(0, 2, 3), dtype=np.float64)
            var = h.data.var(axis=(0, 2, 3), dtype=np.float64)
            m = self._BN_MOMENTUM
            self.buffers[f"bn{i}.mean"] = ((1 - m) * self.buffers[f"bn{i}.mean"]
                                           + m * mean).astype(self.dtype)
            self.buffers[f"bn{i}.var"] = ((1 - m) * self.buffers[f"bn{i}.var"]
                                          + m * var).astype(self.dtype)
            return ad.batch_norm(h, scale, shift)
        return ad.batch_norm(h, scale, shift,
                             running_mean=self.buffers[f"bn{i}.mean"],
                             running_var=self.buffers[f"bn{i}.var"])

    @staticmethod
    def _whiten(x: DiffTensor) -> DiffTensor:
        """Scalar mean/std standardization per sample, over all channels.

        Keeps attribute planes constant-valued while giving every sample a
        zero-mean unit-scale input; differentiable end to end.
        """
        n = x.shape[0]
        count = float(np.prod(x.shape[1:]))
        mu = ad.reshape(ad.tensor_sum(x, axis=(1, 2, 3)), (n, 1, 1, 1)) * (1.0 / count)
        centered = ad.sub(x, mu)
        var = ad.reshape(ad.tensor_sum(ad.mul(centered, centered), axis=(1, 2, 3)),
                         (n, 1, 1, 1)) * (1.0 / count)
        return ad.div(centered, ad.sqrt(ad.add(var, 1e-5)))

    def encode_single(self, image: np.ndarray) -> np.ndarray:
        """Convenience: (C, H, W) -> (d,) with no gradient tracking."""
        out = self.encode(np.asarray(image)[None])
        return out.data[0]


def encode(encoder: Encoder, x) -> DiffTensor:
    return encoder.encode(x)

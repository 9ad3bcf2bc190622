"""Spectrogram front end and compact convolutional encoders.

Both encoders map an NHWC batch to an ``N x grid x grid x channels`` feature
map.  The visual encoder reaches the grid with stride-2 3x3 convolutions and
one final valid convolution; the audio encoder downsamples the spectrogram and
is bilinearly resized onto the visual grid.  Every layer is conv -> relu, so
all features are nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import stft

from . import autodiff as ad
from .autodiff import Tensor

SPEC_EPS = 1e-10


def make_spectrogram(waveform, sample_rate: float, window: int, hop: int) -> np.ndarray:
    """Log-power STFT of a mono waveform, shape ``(1, n_bins, n_frames, 1)``.

    Rows are frequency bins (``window // 2 + 1`` of them), columns are frames.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D sequence")
    if not (window >= hop > 0):
        raise ValueError(f"need window >= hop > 0, got window={window}, hop={hop}")
    if x.size < window:
        raise ValueError(f"waveform of {x.size} samples is shorter than one window ({window})")
    _, _, z = stft(x, fs=sample_rate, window="hann", nperseg=window, noverlap=window - hop,
                   boundary=None, padded=False, detrend=False, scaling="spectrum")
    power = z.real**2 + z.imag**2
    return np.log(power + SPEC_EPS)[None, :, :, None]


def read_pcm16(path) -> np.ndarray:
    """Headerless signed 16-bit little-endian mono PCM -> floats in [-1, 1)."""
    raw = np.fromfile(Path(path), dtype="<i2")
    return raw.astype(np.float64) / 32768.0


def write_pcm16(path, waveform) -> None:
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 32767 / 32768)
    np.round(x * 32768.0).astype("<i2").tofile(Path(path))


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    stride: int
    pad: int


@dataclass
class ConvEncoder:
    """Stack of conv -> relu layers with an optional final bilinear resize."""

    in_shape: tuple[int, int, int]
    layers: list[ConvLayer]
    resize_to: tuple[int, int] | None = None
    name: str = "encoder"

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"{self.name}.{i}.kernel"] = layer.kernel
            params[f"{self.name}.{i}.bias"] = layer.bias
        return params

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.in_shape):
            raise ad.ShapeError(f"{self.name}: expected input N x {self.in_shape}, got {x.shape}")
        for layer in self.layers:
            x = ad.relu(ad.conv2d(x, layer.kernel, layer.bias, stride=layer.stride, pad=layer.pad))
        if self.resize_to is not None and tuple(x.shape[1:3]) != self.resize_to:
            x = ad.bilinear_resize(x, *self.resize_to)
        return x


def _he_layer(rng: np.random.Generator, k: int, cin: int, cout: int, stride: int, pad: int) -> ConvLayer:
    std = math.sqrt(2.0 / (k * k * cin))
    kernel = Tensor(rng.normal(0.0, std, size=(k, k, cin, cout)), requires_grad=True)
    bias = Tensor(np.zeros(cout), requires_grad=True)
    return ConvLayer(kernel, bias, stride, pad)


def _width(widths, i: int) -> int:
    return widths[min(i, len(widths) - 1)]


def build_visual_encoder(image_size: int, grid: int, widths, channels: int,
                         rng: np.random.Generator, in_channels: int = 3) -> ConvEncoder:
    if image_size < grid:
        raise ValueError(f"image size {image_size} is smaller than the feature grid {grid}")
    layers, size, cin = [], image_size, in_channels
    while (size + 1) // 2 >= grid:
        cout = _width(widths, len(layers))
        layers.append(_he_layer(rng, 3, cin, cout, stride=2, pad=1))
        size, cin = (size + 1) // 2, cout
    layers.append(_he_layer(rng, size - grid + 1, cin, channels, stride=1, pad=0))
    return ConvEncoder((image_size, image_size, in_channels), layers, name="visual")


def build_audio_encoder(spec_shape: tuple[int, int], grid: int, widths, channels: int,
                        rng: np.random.Generator, min_size: int = 4) -> ConvEncoder:
    layers, (h, w), cin = [], spec_shape, 1
    while (min(h, w) + 1) // 2 >= min_size:
        cout = _width(widths, len(layers))
        layers.append(_he_layer(rng, 3, cin, cout, stride=2, pad=1))
        h, w, cin = (h + 1) // 2, (w + 1) // 2, cout
    layers.append(_he_layer(rng, 1, cin, channels, stride=1, pad=0))
    return ConvEncoder((spec_shape[0], spec_shape[1], 1), layers, resize_to=(grid, grid), name="audio")


def encode_visual(images, weights: ConvEncoder) -> Tensor:
    return weights(images)


def encode_audio(spec, weights: ConvEncoder) -> Tensor:
    spec = ad.as_tensor(spec)
    if spec.ndim != 4 or spec.shape[3] != 1:
        raise ad.ShapeError(f"audio encoder expects a single-channel N x H x W x 1 batch, got {spec.shape}")
    return weights(spec)


def gap_normalized(features) -> Tensor:
    """Spatial mean per sample, L2-normalized (zero rows stay zero)."""
    return ad.l2_normalize(ad.mean(features, axis=(1, 2)), axis=-1)

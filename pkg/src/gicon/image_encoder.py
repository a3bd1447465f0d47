"""Image tower: zero-pad to a square, convolutional stem, masked Transformer over cells.

Images are float arrays of shape [H, W, 3] with values in [0, 1].  They are
resized so the longest side equals ``longest_side`` (aspect ratio kept), placed
at the top-left of a zero square, and reduced by a strided stem to a grid of
d-dimensional cells.  Cells whose receptive-field origin lies in the padding
are masked out of attention.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, run_encoder
from .errors import ConfigError, DataError, DimensionError, FormatError
from .layers import Linear, he_uniform, normal_param, zeros_param

STEM_PLANS = {4: (2, 2, 1), 8: (2, 2, 2), 16: (2, 2, 4), 32: (2, 4, 4)}


@dataclass(frozen=True)
class ImageConfig:
    longest_side: int = 64
    stem_stride: int = 8
    stem_channels: tuple = (16, 32, 32)
    # False adds positional encodings to the input tokens instead of Q/K
    pos_qk_only: bool = True

    def __post_init__(self):
        if self.stem_stride not in STEM_PLANS:
            raise ConfigError(f"stem_stride must be one of {sorted(STEM_PLANS)}, got {self.stem_stride}")
        if self.longest_side % self.stem_stride:
            raise ConfigError(f"image side {self.longest_side} is not a multiple of stem stride {self.stem_stride}")
        if len(self.stem_channels) != 3:
            raise ConfigError("stem_channels needs one width per stem block (3)")

    @property
    def grid(self) -> int:
        return self.longest_side // self.stem_stride


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"image must have shape [H, W, 3], got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise DataError("image has zero size")
    return img


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling; returns a copy when sizes match."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    top = img[y0][:, x0] * (1 - wx)[None, :, None] + img[y0][:, x1] * wx[None, :, None]
    bottom = img[y1][:, x0] * (1 - wx)[None, :, None] + img[y1][:, x1] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bottom * wy[:, None, None]


def resized_extent(h: int, w: int, side: int) -> tuple[int, int]:
    scale = side / max(h, w)
    return max(1, min(side, round(h * scale))), max(1, min(side, round(w * scale)))


def resize_and_pad(img: np.ndarray, side: int, stride: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Scale so the longest side is ``side``, pad with zeros to [side, side, 3].

    Returns the padded image and the boolean cell mask of shape
    [side/stride, side/stride]; a cell is valid when its top-left pixel falls
    inside the resized image.
    """
    img = check_image(img)
    if side % stride:
        raise ConfigError(f"image side {side} is not a multiple of stride {stride}")
    new_h, new_w = resized_extent(img.shape[0], img.shape[1], side)
    padded = np.zeros((side, side, 3))
    padded[:new_h, :new_w] = resize_bilinear(img, new_h, new_w)
    return padded, cell_mask(new_h, new_w, side, stride)


def cell_mask(h: int, w: int, side: int, stride: int) -> np.ndarray:
    origins = np.arange(side // stride) * stride
    return (origins < h)[:, None] & (origins < w)[None, :]


@dataclass
class PaddedBatch:
    padded: np.ndarray  # [B, L, L, 3], zero outside each image's extent
    valid_mask: np.ndarray  # [B, L', L'] cell mask
    extents: np.ndarray  # [B, 2] resized (height, width)

    def __len__(self) -> int:
        return self.padded.shape[0]

    def pixel_mask(self) -> np.ndarray:
        side = self.padded.shape[1]
        rows = np.arange(side)
        return (rows[None, :, None] < self.extents[:, 0, None, None]) & (
            rows[None, None, :] < self.extents[:, 1, None, None]
        )

    def subset(self, index) -> "PaddedBatch":
        return PaddedBatch(self.padded[index], self.valid_mask[index], self.extents[index])


def pad_batch(images: Sequence[np.ndarray], cfg: ImageConfig) -> PaddedBatch:
    padded, masks, extents = [], [], []
    for img in images:
        img = check_image(img)
        p, m = resize_and_pad(img, cfg.longest_side, cfg.stem_stride)
        padded.append(p)
        masks.append(m)
        extents.append(resized_extent(img.shape[0], img.shape[1], cfg.longest_side))
    if not padded:
        raise DataError("cannot pad an empty image list")
    return PaddedBatch(np.stack(padded), np.stack(masks), np.array(extents, dtype=np.int64))


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG/JPEG (scaled to [0, 1]) or a raw ``.npy`` float tensor of shape [H, W, 3]."""
    path = os.fspath(path)
    if path.endswith(".npy"):
        return check_image(np.load(path))
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        return check_image(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    path = os.fspath(path)
    img = check_image(img)
    if path.endswith(".npy"):
        np.save(path, img)
        return
    from PIL import Image as PILImage

    PILImage.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# parameters and forward pass
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    weight: Tensor  # [k, k, c_in, c_out]
    bias: Tensor
    stride: int


@dataclass
class ImageParams:
    convs: list
    project: Linear  # 1x1 convolution to the model dimension
    image_token: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ImageConfig, d: int) -> "ImageParams":
        convs = []
        c_in = 3
        for s, c_out in zip(STEM_PLANS[cfg.stem_stride], cfg.stem_channels):
            k = 2 * s - 1
            fan_in = k * k * c_in
            convs.append(ConvParams(he_uniform(rng, (k, k, c_in, c_out), fan_in), zeros_param((c_out,)), s))
            c_in = c_out
        return cls(convs, Linear.init(rng, c_in, d), normal_param(rng, (d,), d))


def stem(padded: Tensor, params: ImageParams) -> Tensor:
    """[B, L, L, 3] pixels to [B, L/stride, L/stride, d] features."""
    x = ad.as_tensor(padded)
    for conv in params.convs:
        x = ad.relu(ad.conv2d(x, conv.weight, conv.bias, stride=conv.stride, padding=conv.stride - 1))
    return params.project(x)


def positional_encoding_2d(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal encodings, [h*w, d]: first half from the row, second from the column."""
    if d % 4:
        raise ConfigError(f"2-D positional encoding needs d divisible by 4, got {d}")
    half = d // 2
    freqs = temperature ** (-np.arange(0, half, 2) / half)

    def one_axis(n):
        angles = np.arange(n)[:, None] * freqs[None, :]
        enc = np.empty((n, half))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        return enc

    rows, cols = one_axis(h), one_axis(w)
    return np.concatenate(
        [np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))],
        axis=1,
    )


def encode_features(
    features: Tensor,
    valid_mask: np.ndarray,
    params: ImageParams,
    enc_params: EncoderParams,
    enc_cfg: EncoderConfig,
    pos_qk_only: bool = True,
) -> Tensor:
    """Prepend the image token to the flattened cell grid and run the encoder; returns [B, d]."""
    b, h, w, d = features.shape
    if d != enc_cfg.model_dim or valid_mask.shape != (b, h, w):
        raise DimensionError(f"features {features.shape} / mask {valid_mask.shape} inconsistent with d={enc_cfg.model_dim}")
    token = params.image_token.reshape(1, 1, d) + np.zeros((b, 1, d))
    tokens = ad.concat([token, features.reshape(b, h * w, d)], axis=1)
    pos = np.concatenate([np.zeros((1, d)), positional_encoding_2d(h, w, d)])
    pos = ad.Tensor(np.broadcast_to(pos, (b, 1 + h * w, d)))
    mask = np.concatenate([np.ones((b, 1), dtype=bool), valid_mask.reshape(b, h * w)], axis=1)
    if pos_qk_only:
        out = run_encoder(tokens, pos, mask, enc_params, enc_cfg)
    else:
        out = run_encoder(tokens + pos, None, mask, enc_params, enc_cfg)
    return out[:, 0]


def encode_image_batch(
    batch: PaddedBatch,
    params: ImageParams,
    enc_params: EncoderParams,
    enc_cfg: EncoderConfig,
    pos_qk_only: bool = True,
) -> Tensor:
    # re-zero the padding so stray values in a hand-built batch cannot leak through the stem
    pixels = batch.padded * batch.pixel_mask()[..., None]
    features = stem(ad.Tensor(pixels), params)
    return encode_features(features, batch.valid_mask, params, enc_params, enc_cfg, pos_qk_only)


def encode_image(
    img: np.ndarray,
    params: ImageParams,
    enc_params: EncoderParams,
    enc_cfg: EncoderConfig,
    img_cfg: ImageConfig,
) -> Tensor:
    """Representation of one image: the final-layer state of the image token, [d]."""
    return encode_image_batch(pad_batch([img], img_cfg), params, enc_params, enc_cfg, img_cfg.pos_qk_only)[0]

"""
Image files: portable float maps for linear buffers, 8-bit PNG for display.

PFM stores rows bottom-to-top; arrays here are always top row first.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError, InvalidParameterError
from .geometry import DTYPE

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _as_array(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return np.asarray(image)


def write_pfm(path: PathLike, image) -> None:
    """
    Write an (H, W) or (H, W, 3) float image as little-endian PFM.

    Raises:
        InvalidParameterError: For any other shape.
    """
    data = _as_array(image).astype("<f4")
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        tag = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = "PF"
    else:
        raise InvalidParameterError(f"PFM needs an (H, W) or (H, W, 3) image, got {data.shape}")
    height, width = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{width} {height}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def _header_line(fh) -> str:
    line = fh.readline()
    if not line:
        raise InvalidInputError("unexpected end of PFM header")
    return line.decode("ascii").strip()


def read_pfm(path: PathLike) -> np.ndarray:
    """
    Read a PFM file into a float32 array, top row first.

    Raises:
        InvalidInputError: If the file is missing, truncated or not a PFM.
    """
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"PFM file not found: {path}")
    with open(path, "rb") as fh:
        try:
            tag = _header_line(fh)
            dims = _header_line(fh).split()
            scale = float(_header_line(fh))
            width, height = int(dims[0]), int(dims[1])
        except (ValueError, IndexError, UnicodeDecodeError) as e:
            raise InvalidInputError(f"malformed PFM header in {path}: {e}")
        if tag == "PF":
            channels = 3
        elif tag == "Pf":
            channels = 1
        else:
            raise InvalidInputError(f"{path} is not a PFM file (tag {tag!r})")
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size < count:
        raise InvalidInputError(f"PFM file {path} is truncated")
    data = data[:count].astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).copy()


def read_pfm_tensor(path: PathLike) -> torch.Tensor:
    return torch.from_numpy(read_pfm(path)).to(DTYPE)


def to_uint8(image) -> np.ndarray:
    """Quantize a [0, 1] image to 8 bits with rounding."""
    data = np.clip(_as_array(image).astype(np.float64), 0.0, 1.0)
    return np.round(data * 255.0).astype(np.uint8)


def write_png(path: PathLike, image) -> None:
    """Write an (H, W) or (H, W, 3) display image in [0, 1] as 8-bit PNG."""
    data = to_uint8(image)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    """
    Read a PNG as float64 in [0, 1]; grayscale stays (H, W), color is RGB.

    Raises:
        InvalidInputError: If the file is missing or unreadable.
    """
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"PNG file not found: {path}")
    try:
        with Image.open(path) as img:
            mode = "L" if img.mode in ("L", "1", "I", "I;16") else "RGB"
            data = np.asarray(img.convert(mode), dtype=np.float64)
    except OSError as e:
        raise InvalidInputError(f"could not read image {path}: {e}")
    return data / 255.0


def read_image(path: PathLike) -> torch.Tensor:
    """PFM or PNG by extension, as a float64 tensor."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm_tensor(path)
    return torch.from_numpy(read_png(path)).to(DTYPE)


def save_visibility(path: PathLike, visibility) -> None:
    """Grayscale dump of a visibility or shadow buffer."""
    data = _as_array(visibility).astype(np.float64)
    finite = np.isfinite(data)
    if finite.any() and (data[finite].max() > 1.0 or data[finite].min() < 0.0):
        lo, hi = data[finite].min(), data[finite].max()
        data = (data - lo) / max(hi - lo, 1e-12)
    write_png(path, np.where(finite, data, 1.0))

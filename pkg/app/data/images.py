import io
from pathlib import Path

import numpy as np
from PIL import Image

from app.core.lstn import read_tensor
from app.errors import DataError


def pil_to_chw(image: Image.Image, size: int) -> np.ndarray:
    if image.mode != "RGB":
        image = image.convert("RGB")
    image = image.resize((size, size))
    array = np.asarray(image, dtype=np.float32) / 255.0
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def decode_image_bytes(data: bytes, size: int) -> np.ndarray:
    """Decode PNG/JPEG bytes into a [3, size, size] float32 tensor in [0, 1]."""
    try:
        return pil_to_chw(Image.open(io.BytesIO(data)), size)
    except Exception as e:
        raise DataError(f"Error decoding image: {e}") from e


def load_image(path, size: int | None = None) -> np.ndarray:
    """Load an LSTN tensor or a regular image file as CHW float32."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image file not found: {path}")
    if path.suffix.lower() == ".lstn":
        return read_tensor(path).astype(np.float32)
    if size is None:
        raise DataError(f"Image size is required to load {path}")
    return decode_image_bytes(path.read_bytes(), size)

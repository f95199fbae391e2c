"""Images, PGM file IO, noise synthesis, PSNR and training-set preparation.

An image is a 2-D ``float64`` numpy array of shape ``(height, width)``
holding intensities on the [0, 255] scale.  Only the file writers clamp
and round; everything else works with unclipped real values.
"""

import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Xoshiro256, derive_seed


class ImageError(ValueError):
    """Invalid image contents or incompatible image shapes."""


class PgmError(ValueError):
    """Base class for PGM parse failures."""


class UnsupportedFormat(PgmError):
    pass


class MalformedHeader(PgmError):
    pass


class UnsupportedMaxval(PgmError):
    pass


class TruncatedData(PgmError):
    pass


class InfinitePsnr(ValueError):
    """Raised when PSNR is requested for two identical images."""


def as_image(data):
    """Validate and convert ``data`` to an image array (copy-free if possible)."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ImageError(f"image must be 2-D, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError("image must have at least one pixel")
    if not np.all(np.isfinite(img)):
        raise ImageError("image contains non-finite values")
    return img


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise ImageError(f"dimension mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# PGM IO


def _read_token(buf, pos):
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header")
    return buf[start:pos], pos


def load_pgm(path):
    """Read an 8-bit binary (P5) PGM file into a float image."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 2:
        raise MalformedHeader(f"{path}: file too short")
    magic = buf[:2]
    if magic != b"P5":
        if magic[:1] == b"P" and magic[1:2].isdigit():
            raise UnsupportedFormat(f"{path}: only binary P5 PGM is supported, got {magic.decode()}")
        raise MalformedHeader(f"{path}: not a PGM file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise MalformedHeader(f"{path}: bad header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeader(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"{path}: maxval {maxval} (only 255 supported)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedHeader(f"{path}: missing whitespace after header")
    pos += 1
    npix = width * height
    pixels = buf[pos:pos + npix]
    if len(pixels) < npix:
        raise TruncatedData(f"{path}: expected {npix} bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).astype(np.float64)


def to_bytes(image):
    """Clamp to [0, 255] and round to the nearest integer (ties to even)."""
    return np.clip(np.rint(as_image(image)), 0, 255).astype(np.uint8)


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a temp file + rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pgm(image, path):
    img = to_bytes(image)
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


# ---------------------------------------------------------------------------
# metrics and noise


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak 255: ``20 log10(255 / RMSE)``."""
    a = as_image(a)
    b = as_image(b)
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        raise InfinitePsnr("images are identical")
    return 20.0 * math.log10(255.0 / math.sqrt(mse))


def add_gaussian_noise(image, sigma, seed):
    """Add i.i.d. N(0, sigma^2) noise from the frozen generator; no clipping."""
    image = as_image(image)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = Xoshiro256(seed).normal(image.size).reshape(image.shape)
    return image + sigma * z


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class TrainingSample:
    clean: np.ndarray
    noisy: np.ndarray
    id: int

    def __post_init__(self):
        check_same_shape(self.clean, self.noisy)


def make_dataset(images, crop, count_per_image, sigma, seed):
    """Random ``crop`` x ``crop`` training pairs with fixed noise realisations.

    Crop positions for image ``k`` come from a generator seeded with
    ``derive_seed(seed, 0, k)``; the noise of sample ``s`` uses
    ``derive_seed(seed, 1, s)``.
    """
    if crop < 1 or count_per_image < 1:
        raise ValueError("crop and count_per_image must be positive")
    samples = []
    for k, img in enumerate(images):
        img = as_image(img)
        h, w = img.shape
        if h < crop or w < crop:
            raise ImageError(f"image {k} is {w}x{h}, smaller than crop {crop}")
        pos_rng = Xoshiro256(derive_seed(seed, 0, k))
        for _ in range(count_per_image):
            r = pos_rng.integer(h - crop + 1)
            c = pos_rng.integer(w - crop + 1)
            clean = img[r:r + crop, c:c + crop].copy()
            sid = len(samples)
            noisy = add_gaussian_noise(clean, sigma, derive_seed(seed, 1, sid))
            samples.append(TrainingSample(clean=clean, noisy=noisy, id=sid))
    return samples


def write_manifest(pairs, path):
    """Manifest: one ``clean_path noisy_path`` pair per line."""
    lines = "".join(f"{c} {n}\n" for c, n in pairs)
    atomic_write(path, lines)


def read_manifest(path):
    """Parse a manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'clean_path noisy_path'")
        pairs.append(tuple(p if os.path.isabs(p) else str(path.parent / p) for p in parts))
    return pairs


def load_image(path):
    """Load a ``.pgm`` file or a lossless float ``.npy`` array."""
    if str(path).endswith(".npy"):
        return as_image(np.load(path, allow_pickle=False))
    return load_pgm(path)


def save_npy(image, path):
    """Lossless float storage, used for unclipped noisy images."""
    buf = io.BytesIO()
    np.save(buf, as_image(image), allow_pickle=False)
    atomic_write(path, buf.getvalue())


def load_samples(manifest):
    samples = []
    for k, (c, n) in enumerate(read_manifest(manifest)):
        samples.append(TrainingSample(clean=load_image(c), noisy=load_image(n), id=k))
    return samples

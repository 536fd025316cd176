"""Binary file formats, image ingestion and synthetic phantoms."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BINARY, REAL, SensingMatrix, check_image, make_rng
from .regularizers import PENALTIES, FilterBank

PATTERN_MAGIC = b"SPIP"
PATTERN_VERSION = 1
RAW_MAGIC = b"SPIR"
FILTER_MAGIC = b"SPIF"
FILTER_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pattern files


def pattern_to_bytes(A: SensingMatrix) -> bytes:
    M, N = A.entries.shape
    if A.is_binary:
        bits = (A.entries.ravel() > 0).astype(np.uint8)
        payload = np.packbits(bits, bitorder="little").tobytes()
        kind = 0
    else:
        payload = A.entries.astype("<f8").tobytes()
        kind = 1
    return PATTERN_MAGIC + struct.pack("<HIIB", PATTERN_VERSION, M, N, kind) + payload


def pattern_from_bytes(data: bytes) -> SensingMatrix:
    if data[:4] != PATTERN_MAGIC:
        raise FormatError("not a pattern file (bad magic)")
    head = struct.calcsize("<HIIB")
    if len(data) < 4 + head:
        raise FormatError("truncated pattern header")
    version, M, N, kind = struct.unpack_from("<HIIB", data, 4)
    if version != PATTERN_VERSION:
        raise FormatError(f"unsupported pattern file version {version}")
    if M < 1 or N < 1:
        raise FormatError("pattern file declares an empty matrix")
    body = data[4 + head:]
    if kind == 0:
        nbytes = -(-M * N // 8)
        if len(body) != nbytes:
            raise FormatError(f"expected {nbytes} payload bytes, found {len(body)}")
        bits = np.unpackbits(np.frombuffer(body, np.uint8), bitorder="little")
        if np.any(bits[M * N:]):
            raise FormatError("non-zero pad bits in binary payload")
        return SensingMatrix(np.where(bits[:M * N] == 1, 1.0, -1.0).reshape(M, N), BINARY)
    if kind == 1:
        if len(body) != 8 * M * N:
            raise FormatError(f"expected {8 * M * N} payload bytes, found {len(body)}")
        return SensingMatrix(np.frombuffer(body, "<f8").reshape(M, N), REAL)
    raise FormatError(f"unknown matrix kind code {kind}")


def write_pattern(path, A: SensingMatrix) -> None:
    Path(path).write_bytes(pattern_to_bytes(A))


def read_pattern(path) -> SensingMatrix:
    return pattern_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images


def raw_to_bytes(img) -> bytes:
    img = np.asarray(img)
    H, W = img.shape
    return RAW_MAGIC + struct.pack("<II", H, W) + img.astype("<f4").tobytes()


def raw_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != RAW_MAGIC:
        raise FormatError("not a raw image file (bad magic)")
    if len(data) < 12:
        raise FormatError("truncated raw image header")
    H, W = struct.unpack_from("<II", data, 4)
    if H == 0 or W == 0:
        raise FormatError("raw image has a zero dimension")
    body = data[12:]
    if len(body) != 4 * H * W:
        raise FormatError(f"expected {4 * H * W} payload bytes, found {len(body)}")
    return np.frombuffer(body, "<f4").reshape(H, W).astype(np.float64)


def write_raw(path, img) -> None:
    Path(path).write_bytes(raw_to_bytes(img))


def read_raw(path) -> np.ndarray:
    return raw_from_bytes(Path(path).read_bytes())


def _pgm_tokens(data, count):
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(data) and data[i] in b" \t\r\n":
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] not in b"\r\n":
                i += 1
            continue
        start = i
        while i < len(data) and data[i] not in b" \t\r\n#":
            i += 1
        if start == i:
            raise FormatError("truncated PGM header")
        tokens.append(int(data[start:i]))
    return tokens, i + 1  # a single whitespace byte precedes the raster


def read_pgm(path) -> np.ndarray:
    """Decode a binary (P5) PGM into ``[0, 1]`` floats."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    (W, H, maxval), start = _pgm_tokens(data, 3)
    if W == 0 or H == 0:
        raise FormatError(f"{path}: zero image dimension")
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = W * H
    if len(data) - start < count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated raster")
    raster = np.frombuffer(data, dtype, count=count, offset=start)
    return raster.reshape(H, W).astype(np.float64) / maxval


def write_pgm(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    raster = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (W, H) + raster.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic[:2] == b"P5":
        return read_pgm(path)
    if magic == RAW_MAGIC:
        return read_raw(path)
    raise FormatError(f"{path}: unrecognised image format")


def center_crop_resize(img, size) -> np.ndarray:
    """Center-crop to the target aspect ratio, then resize bilinearly."""
    H, W = img.shape
    th, tw = size
    if H * tw > W * th:
        ch, cw = max(1, round(W * th / tw)), W
    else:
        ch, cw = H, max(1, round(H * tw / th))
    top, left = (H - ch) // 2, (W - cw) // 2
    crop = img[top:top + ch, left:left + cw]
    if crop.shape == (th, tw):
        return crop.copy()
    # pixel-centre aligned sampling grid
    rows = (np.arange(th) + 0.5) * ch / th - 0.5
    cols = (np.arange(tw) + 0.5) * cw / tw - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(crop, [rr, cc], order=1, mode="nearest")


IMAGE_SUFFIXES = (".pgm", ".spir")


def load_corpus(path, target_size=None) -> list[np.ndarray]:
    """Load one image file or every ``.pgm``/``.spir`` file of a directory (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no images found in {path}")
    elif path.exists():
        files = [path]
    else:
        raise FileNotFoundError(f"{path} does not exist")
    images = []
    for f in files:
        img = read_image(f)
        if target_size is not None:
            img = center_crop_resize(img, tuple(target_size))
        images.append(check_image(img))
    return images


def save_corpus(images, out_dir, fmt="spir", prefix="img") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out / f"{prefix}_{i:05d}.{fmt}"
        (write_raw if fmt == "spir" else write_pgm)(p, img)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# synthetic phantoms


def generate_phantoms(count: int, size=(32, 32), seed: int = 0) -> list[np.ndarray]:
    """Cell-like phantoms: soft ellipses with Gaussian profiles on a dark background."""
    if count < 1:
        raise ValueError("count must be >= 1")
    H, W = size
    rr, cc = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    out = []
    for i in range(count):
        rng = make_rng(seed, 2, i)
        img = np.full((H, W), 0.05)
        for _ in range(rng.integers(3, 13)):
            cy, cx = rng.uniform(0.1, 0.9) * H, rng.uniform(0.1, 0.9) * W
            ry, rx = rng.uniform(0.07, 0.22, size=2) * np.array([H, W])
            th = rng.uniform(0, np.pi)
            peak = rng.uniform(0.4, 1.0)
            dy, dx = rr - cy, cc - cx
            u = (dx * np.cos(th) + dy * np.sin(th)) / rx
            v = (-dx * np.sin(th) + dy * np.cos(th)) / ry
            rho = np.sqrt(u * u + v * v)
            edge = 1.0 / (1.0 + np.exp(-(1.0 - rho) / 0.08))
            cell = peak * np.exp(-0.7 * rho * rho) * edge
            img = np.maximum(img, 0.05 + cell)
        texture = ndimage.gaussian_filter(rng.standard_normal((H, W)), 1.0)
        img = img + 0.03 * texture * (img > 0.1)
        out.append(np.clip(img, 0.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# filter banks


def filterbank_to_bytes(fb: FilterBank) -> bytes:
    F, kh, kw = fb.kernels.shape
    head = FILTER_MAGIC + struct.pack("<HIIIB", FILTER_VERSION, F, kh, kw, PENALTIES.index(fb.penalty))
    return head + fb.kernels.astype("<f8").tobytes()


def filterbank_from_bytes(data: bytes) -> FilterBank:
    if data[:4] != FILTER_MAGIC:
        raise FormatError("not a filter-bank file (bad magic)")
    if len(data) < 4 + struct.calcsize("<HIIIB"):
        raise FormatError("truncated filter-bank header")
    version, F, kh, kw, pen = struct.unpack_from("<HIIIB", data, 4)
    if version != FILTER_VERSION:
        raise FormatError(f"unsupported filter-bank version {version}")
    body = data[4 + struct.calcsize("<HIIIB"):]
    if len(body) != 8 * F * kh * kw:
        raise FormatError("filter-bank payload size mismatch")
    if pen >= len(PENALTIES):
        raise FormatError(f"unknown penalty code {pen}")
    return FilterBank(np.frombuffer(body, "<f8").reshape(F, kh, kw).copy(), PENALTIES[pen])


def write_filterbank(path, fb: FilterBank) -> None:
    Path(path).write_bytes(filterbank_to_bytes(fb))


def read_filterbank(path) -> FilterBank:
    return filterbank_from_bytes(Path(path).read_bytes())

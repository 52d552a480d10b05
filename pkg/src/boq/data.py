"""Dataset manifests, the binary tensor container, image IO, and the
synthetic place generator.

Tensor container layout (all integers little-endian):

    magic   4 bytes  b"BOQT"
    version u16      currently 1
    dtype   u16      0 = float32, 1 = float64 (one dtype per file)
    count   u16      number of entries
    entry   repeated:
        name_len u16, name bytes (utf-8),
        ndim u16, dims u32 * ndim,
        payload: prod(dims) * itemsize bytes, little-endian

An empty table is exactly the 10-byte header. Write -> read round trips are
bit-exact.

Manifest CSV header: ``id,path,place_id,gt_kind,gt_a,gt_b,role`` where
gt_kind is one of latlon | xy | frame (gt_b stays empty for frame rows) and
role is one of query | reference | train. Paths resolve relative to the
manifest file.

Images are 8-bit binary portable pixmaps (P6); attention grids are written
as 8-bit binary portable graymaps (P5).
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .errors import ConfigError, FormatError, ManifestError

TENSOR_MAGIC = b"BOQT"
TENSOR_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {"f32": 0, "f64": 1}

GT_KINDS = ("latlon", "xy", "frame")
ROLES = ("query", "reference", "train")

MANIFEST_HEADER = ["id", "path", "place_id", "gt_kind", "gt_a", "gt_b", "role"]


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Tensor container
# ---------------------------------------------------------------------------


def write_tensor_file(
    path: Union[str, Path],
    tensors: Mapping[str, np.ndarray],
    dtype: str = "f64",
) -> None:
    """Serialize a named-tensor table. Entry order follows the mapping."""
    if dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype '{dtype}' (use f32 or f64)")
    code = _CODE_FOR[dtype]
    np_dtype = _DTYPE_CODES[code]
    items = list(tensors.items())
    if len(items) > 0xFFFF:
        raise FormatError(f"too many entries ({len(items)}) for the container")
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<HHH", TENSOR_VERSION, code, len(items)))
    for name, arr in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"entry name too long: {name!r}")
        arr = np.ascontiguousarray(arr, dtype=np_dtype)
        if arr.ndim > 0xFFFF:
            raise FormatError(f"entry '{name}' has too many dimensions")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<H", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    atomic_write_bytes(path, buf.getvalue())


def read_tensor_file(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], str]:
    """Load a named-tensor table; returns (entries, "f32"|"f64").

    Entry order is preserved. Corruption is reported with the byte offset
    at which parsing failed.
    """
    raw = Path(path).read_bytes()

    def need(offset: int, n: int, what: str) -> bytes:
        if offset + n > len(raw):
            raise FormatError(
                f"{path}: truncated {what} at offset {offset} "
                f"(need {n} bytes, have {len(raw) - offset})"
            )
        return raw[offset : offset + n]

    if need(0, 4, "magic") != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0 (expected {TENSOR_MAGIC!r})")
    version, code, count = struct.unpack("<HHH", need(4, 6, "header"))
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported container version {version} at offset 4")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 6")
    np_dtype = _DTYPE_CODES[code]
    offset = 10
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", need(offset, 2, "name length"))
        offset += 2
        name = need(offset, name_len, "name").decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<H", need(offset, 2, "ndim"))
        offset += 2
        dims = []
        for _ in range(ndim):
            (dim,) = struct.unpack("<I", need(offset, 4, "dimension"))
            dims.append(dim)
            offset += 4
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = size * np_dtype.itemsize
        payload = need(offset, nbytes, f"payload of '{name}'")
        offset += nbytes
        if name in out:
            raise FormatError(f"{path}: duplicate entry name '{name}'")
        out[name] = np.frombuffer(payload, dtype=np_dtype).reshape(dims).copy()
    if offset != len(raw):
        raise FormatError(
            f"{path}: {len(raw) - offset} trailing bytes after offset {offset}"
        )
    return out, ("f32" if code == 0 else "f64")


# ---------------------------------------------------------------------------
# Portable pixmaps / graymaps
# ---------------------------------------------------------------------------


def _encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"expected [3, H, W] image data, got shape {image.shape}")
    _, h, w = image.shape
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quantized.transpose(1, 2, 0).tobytes()


def save_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as an 8-bit binary pixmap."""
    atomic_write_bytes(path, _encode_ppm(image))


def save_pgm(path: Union[str, Path], gray: np.ndarray) -> None:
    """Write a [H, W] float array as an 8-bit binary graymap.

    Values are scaled so the array maximum maps to 255 (attention grids sum
    to 1, so raw values would quantize to black).
    """
    if gray.ndim != 2:
        raise FormatError(f"expected [H, W] gray data, got shape {gray.shape}")
    h, w = gray.shape
    peak = float(gray.max())
    scaled = gray / peak if peak > 0 else gray
    quantized = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + quantized.tobytes())


def _read_pnm_tokens(raw: bytes, path, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace/comment-delimited ASCII integers after the
    magic; returns (values, offset just past the single whitespace byte
    that terminates the header)."""
    tokens: list[int] = []
    i = 2  # past magic
    while len(tokens) < count:
        if i >= len(raw):
            raise FormatError(f"{path}: truncated header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        elif c.isdigit():
            j = i
            while j < len(raw) and raw[j : j + 1].isdigit():
                j += 1
            tokens.append(int(raw[i:j]))
            i = j
        else:
            raise FormatError(f"{path}: unexpected byte {c!r} in header at offset {i}")
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    return tokens, i + 1


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Load an 8-bit binary pixmap as a [3, H, W] float array in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise FormatError(f"{path}: not a binary pixmap (P6)")
    (w, h, maxval), offset = _read_pnm_tokens(raw, path, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit pixmaps supported, maxval={maxval}")
    expected = w * h * 3
    data = raw[offset : offset + expected]
    if len(data) != expected:
        raise FormatError(
            f"{path}: pixel payload has {len(data)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    path: Path
    place_id: str
    gt: tuple  # (lat, lon) | (x, y) for metric kinds, (frame,) for frame kind
    role: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    gt_kind: str
    source: Optional[Path] = None

    def by_role(self, role: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.role == role]

    def places(self, role: Optional[str] = None) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            if role is None or r.role == role:
                out.setdefault(r.place_id, []).append(r)
        return out

    def positions(self, records: Iterable[ManifestRecord]) -> dict[str, tuple]:
        return {r.id: r.gt for r in records}


def load_manifest(path: Union[str, Path], check_paths: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ManifestError(
            f"{path}: first line must be '{','.join(MANIFEST_HEADER)}'"
        )
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    kind: Optional[str] = None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(
                f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}"
            )
        rec_id, rel_path, place_id, gt_kind, gt_a, gt_b, role = (f.strip() for f in row)
        if not rec_id:
            raise ManifestError(f"{path}:{lineno}: empty id")
        if rec_id in seen:
            raise ManifestError(
                f"{path}: duplicate id '{rec_id}' on lines {seen[rec_id]} and {lineno}"
            )
        seen[rec_id] = lineno
        if gt_kind not in GT_KINDS:
            raise ManifestError(f"{path}:{lineno}: unknown gt_kind '{gt_kind}'")
        if kind is None:
            kind = gt_kind
        elif gt_kind != kind:
            raise ManifestError(
                f"{path}:{lineno}: mixed ground-truth kinds ('{kind}' vs '{gt_kind}')"
            )
        if role not in ROLES:
            raise ManifestError(f"{path}:{lineno}: unknown role '{role}'")
        try:
            if gt_kind == "frame":
                if gt_b:
                    raise ValueError("gt_b must be empty for frame rows")
                gt = (int(gt_a),)
            else:
                gt = (float(gt_a), float(gt_b))
        except ValueError as e:
            raise ManifestError(f"{path}:{lineno}: bad ground truth: {e}") from e
        resolved = (path.parent / rel_path).resolve()
        if check_paths and not resolved.is_file():
            raise ManifestError(f"{path}:{lineno}: payload not found: {rel_path}")
        records.append(ManifestRecord(rec_id, resolved, place_id, gt, role))
    if kind is None:
        raise ManifestError(f"{path}: manifest has no records")
    return DatasetManifest(records=records, gt_kind=kind, source=path)


def write_manifest(
    path: Union[str, Path],
    records: list[ManifestRecord],
    gt_kind: str,
) -> None:
    """Write records as a manifest CSV with paths relative to the file."""
    path = Path(path)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in records:
        rel = os.path.relpath(r.path, path.parent)
        if gt_kind == "frame":
            gt_a, gt_b = str(int(r.gt[0])), ""
        else:
            gt_a, gt_b = (f"{v:.6f}" for v in r.gt)
        writer.writerow([r.id, rel, r.place_id, gt_kind, gt_a, gt_b, r.role])
    atomic_write_text(path, out.getvalue())


class PlaceDataset:
    """A manifest plus cached payload loading.

    Image payloads (.ppm) load to [3, H, W] floats; feature payloads
    (.boqt tensor files with a single 'features' entry) load to [N, d0].
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def load(self, record: ManifestRecord) -> np.ndarray:
        arr = self._cache.get(record.id)
        if arr is None:
            if record.path.suffix == ".boqt":
                entries, _ = read_tensor_file(record.path)
                if "features" not in entries:
                    raise FormatError(f"{record.path}: missing 'features' entry")
                arr = entries["features"].astype(np.float64)
            else:
                arr = load_image(record.path)
            self._cache[record.id] = arr
        return arr


# ---------------------------------------------------------------------------
# Synthetic place generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticPlaceConfig:
    """Knobs for the procedural place generator.

    Every place gets a seeded geometric texture; views are jittered crops
    of it with brightness changes and pixel noise. Place positions sit on a
    planar grid spaced farther apart than twice the match threshold, while
    views of one place stay inside it, so distance matching is exercised
    end to end. The frame variant spaces places apart in frame index
    instead.
    """

    num_places: int = 20
    views_per_place: int = 10
    query_views: int = 2
    ref_views: int = 2
    image_size: int = 64
    crop_shift_px: int = 6
    brightness_range: tuple[float, float] = (0.6, 1.4)
    noise_sigma: float = 0.06
    place_spacing_m: float = 100.0
    view_jitter_m: float = 10.0
    gt_kind: str = "xy"  # "xy" or "frame"
    frame_threshold: int = 10
    match_threshold_m: float = 25.0
    seed: int = 0

    @property
    def train_views(self) -> int:
        return self.views_per_place - self.query_views - self.ref_views

    def validate(self) -> None:
        if self.num_places < 1:
            raise ConfigError("num_places must be positive")
        if self.train_views < 1:
            raise ConfigError(
                f"views_per_place={self.views_per_place} leaves no training views "
                f"after {self.query_views} query + {self.ref_views} reference"
            )
        if self.gt_kind not in ("xy", "frame"):
            raise ConfigError(f"synthetic gt_kind must be xy or frame, got '{self.gt_kind}'")
        if self.gt_kind == "xy":
            if self.place_spacing_m <= 2.0 * self.match_threshold_m:
                raise ConfigError(
                    "place_spacing_m must exceed twice the match threshold "
                    f"({self.place_spacing_m} <= 2 * {self.match_threshold_m})"
                )
            if 2.0 * self.view_jitter_m >= self.match_threshold_m:
                raise ConfigError(
                    "view_jitter_m too large: same-place views must stay within "
                    "the match threshold of each other"
                )
        if self.image_size < 8:
            raise ConfigError("image_size too small")
        if self.crop_shift_px < 0 or self.noise_sigma < 0:
            raise ConfigError("jitter settings must be non-negative")


def _draw_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """A seeded colored texture: gradient background + rectangles + disks."""
    img = np.zeros((3, size, size))
    c0, c1 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    ramp = np.linspace(0.0, 1.0, size)
    if rng.integers(2):
        grad = ramp[None, :]
    else:
        grad = ramp[:, None]
    img += c0[:, None, None] * (1 - grad) + c1[:, None, None] * grad

    for _ in range(int(rng.integers(3, 6))):
        color = rng.uniform(0.0, 1.0, 3)
        rh = int(rng.integers(size // 6, size // 2))
        rw = int(rng.integers(size // 6, size // 2))
        top = int(rng.integers(0, size - rh))
        left = int(rng.integers(0, size - rw))
        img[:, top : top + rh, left : left + rw] = color[:, None, None]

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 4))):
        color = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.integers(0, size, 2)
        radius = int(rng.integers(size // 8, size // 3))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        img[:, mask] = color[:, None]
    return np.clip(img, 0.0, 1.0)


def _jitter_view(
    base: np.ndarray, rng: np.random.Generator, cfg: SyntheticPlaceConfig
) -> np.ndarray:
    m, s = cfg.crop_shift_px, cfg.image_size
    dy = int(rng.integers(0, 2 * m + 1)) if m else 0
    dx = int(rng.integers(0, 2 * m + 1)) if m else 0
    view = base[:, dy : dy + s, dx : dx + s]
    lo, hi = cfg.brightness_range
    view = view * rng.uniform(lo, hi)
    if cfg.noise_sigma > 0:
        view = view + rng.normal(0.0, cfg.noise_sigma, size=view.shape)
    return np.clip(view, 0.0, 1.0)


def generate_synthetic(
    cfg: SyntheticPlaceConfig, out_dir: Union[str, Path]
) -> DatasetManifest:
    """Write a synthetic dataset (pixmaps + manifest.csv) under ``out_dir``.

    Pure function of the seed: identical configs produce byte-identical
    files. Returns the loaded-back manifest.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    grid_cols = int(np.ceil(np.sqrt(cfg.num_places)))
    frame_spacing = max(100, 4 * cfg.frame_threshold)

    records: list[ManifestRecord] = []
    images: dict[str, np.ndarray] = {}
    for p in range(cfg.num_places):
        place_id = f"place{p:03d}"
        base = _draw_pattern(rng, cfg.image_size + 2 * cfg.crop_shift_px)
        cy = (p // grid_cols) * cfg.place_spacing_m
        cx = (p % grid_cols) * cfg.place_spacing_m
        for v in range(cfg.views_per_place):
            rec_id = f"p{p:03d}_v{v:02d}"
            images[rec_id] = _jitter_view(base, rng, cfg)
            if v < cfg.train_views:
                role = "train"
            elif v < cfg.train_views + cfg.ref_views:
                role = "reference"
            else:
                role = "query"
            if cfg.gt_kind == "xy":
                angle = rng.uniform(0.0, 2.0 * np.pi)
                radius = cfg.view_jitter_m * np.sqrt(rng.uniform())
                gt = (cx + radius * np.cos(angle), cy + radius * np.sin(angle))
            else:
                span = max(1, cfg.views_per_place - 1)
                offset = round(v * cfg.frame_threshold / span)
                gt = (p * frame_spacing + offset,)
            records.append(
                ManifestRecord(rec_id, out_dir / f"{rec_id}.ppm", place_id, gt, role)
            )

    for rec_id, img in images.items():
        save_ppm(out_dir / f"{rec_id}.ppm", img)
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_path, records, cfg.gt_kind)
    return load_manifest(manifest_path)

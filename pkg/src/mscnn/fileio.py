"""On-disk formats: binary PGM images, JSON annotations, DMAP density grids, datasets."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .density import DensityMap, HeadAnnotations, KernelParams
from .rng import stream
from .trainer import Sample

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pgm_header(data: bytes) -> tuple[int, int, int, int]:
    """Parse ``P5 width height maxval``; returns the values and the payload offset."""
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM: expected magic 'P5' at byte 0")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        m = _PGM_TOKEN.match(data, pos)
        if m is None or not m.group(1).isdigit():
            raise ValueError(f"malformed PGM header: bad {name} at byte {pos}")
        values.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise ValueError(f"malformed PGM header: missing whitespace after maxval at byte {pos}")
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise ValueError(f"unsupported PGM geometry {width}x{height} maxval {maxval} (8-bit only)")
    return width, height, maxval, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return the raw ``H x W`` uint8 raster and its maxval."""
    data = Path(path).read_bytes()
    width, height, maxval, offset = _pgm_header(data)
    need = width * height
    if len(data) - offset < need:
        raise ValueError(
            f"truncated PGM payload: expected {need} bytes from offset {offset}, file ends at byte {len(data)}"
        )
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset).reshape(height, width)
    return raster.copy(), maxval


def pgm_size(path) -> tuple[int, int]:
    """``(width, height)`` read from the header only."""
    with open(path, "rb") as fh:
        head = fh.read(4096)
    width, height, _, _ = _pgm_header(head)
    return width, height


def write_pgm(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise ValueError(f"PGM raster must be a 2-D uint8 array, got {raster.dtype} {raster.shape}")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster).tobytes())


def load_image_grayscale(path) -> np.ndarray:
    """Decode a PGM into a ``1 x H x W`` float32 tensor scaled to [0, 1]."""
    raster, maxval = read_pgm(path)
    return (raster.astype(np.float32) / np.float32(maxval))[None]


def write_dmap(path, dmap) -> None:
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    grid = np.squeeze(grid) if grid.ndim == 3 else grid
    if grid.ndim != 2:
        raise ValueError(f"density grid must be 2-D, got shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"DMAP 1\n{w} {h}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_dmap(path) -> DensityMap:
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 2)
    if len(lines) < 3 or lines[0] != b"DMAP 1":
        raise ValueError(f"{path}: missing 'DMAP 1' header")
    try:
        w, h = (int(v) for v in lines[1].split())
    except ValueError:
        raise ValueError(f"{path}: malformed size line {lines[1]!r}") from None
    payload = lines[2]
    if len(payload) != 4 * w * h:
        raise ValueError(f"{path}: expected {4 * w * h} payload bytes, found {len(payload)}")
    return DensityMap(np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32))


def load_annotation(path) -> tuple[Path, HeadAnnotations]:
    """Read ``{"image": ..., "points": [[x, y], ...]}``; the image path is relative to the JSON."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or "image" not in doc or "points" not in doc:
        raise ValueError(f"{path}: annotation needs 'image' and 'points' keys")
    image_path = path.parent / doc["image"]
    width, height = pgm_size(image_path)
    points = doc["points"]
    for i, p in enumerate(points):
        if len(p) != 2 or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in p):
            raise ValueError(f"{path}: point {i} is not a finite [x, y] pair")
    try:
        ann = HeadAnnotations(np.array(points, dtype=np.float64).reshape(-1, 2), (width, height))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return image_path, ann


def save_annotation(path, image_name: str, points) -> None:
    doc = {"image": image_name, "points": [[float(x), float(y)] for x, y in points]}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_dataset(directory, kernel: KernelParams = KernelParams()) -> list[Sample]:
    """Every ``*.json`` annotation in ``directory`` (sorted by name) with its image."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    samples = []
    for ann_path in sorted(directory.glob("*.json")):
        image_path, ann = load_annotation(ann_path)
        samples.append(Sample(load_image_grayscale(image_path), ann, ann_path.stem, kernel))
    if not samples:
        raise ValueError(f"no *.json annotations found in {directory}")
    return samples


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: tuple[int, int] = (64, 64)
    head_count: tuple[int, int] = (3, 10)
    dot_radius: float = 1.5
    dot_intensity: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.head_count
        if not 0 <= lo <= hi:
            raise ValueError(f"head_count range must satisfy 0 <= lo <= hi, got {self.head_count}")
        if min(self.image_size) < 1 or self.dot_radius < 0 or not 0 <= self.dot_intensity <= 1:
            raise ValueError("invalid synthetic scene geometry")
        if not 0 <= self.noise <= 1:
            raise ValueError(f"noise must lie in [0, 1], got {self.noise}")


def generate_synthetic_dataset(config: SyntheticSceneConfig, count: int) -> list[tuple[np.ndarray, list]]:
    """Render ``count`` scenes of bright discs on uniform noise.

    Returns ``(raster, points)`` pairs; rasters are ``H x W`` uint8 and points
    are ``[x, y]`` head centres lying in the image.
    """
    rng = stream(config.seed, "synth")
    width, height = config.image_size
    yy, xx = np.mgrid[0:height, 0:width]
    scenes = []
    for _ in range(count):
        m = int(rng.integers(config.head_count[0], config.head_count[1] + 1))
        pts = rng.uniform(0, 1, size=(m, 2)) * np.array([width, height])
        pts = np.minimum(np.round(pts, 2), np.array([width, height]) - 0.01)
        img = rng.uniform(0, config.noise, size=(height, width)) if config.noise else np.zeros((height, width))
        for x, y in pts:
            disc = (xx - x) ** 2 + (yy - y) ** 2 <= config.dot_radius ** 2
            img[disc] = np.maximum(img[disc], config.dot_intensity)
        raster = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        scenes.append((raster, pts.tolist()))
    return scenes


def write_synthetic_dataset(directory, config: SyntheticSceneConfig, count: int) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (raster, points) in enumerate(generate_synthetic_dataset(config, count)):
        name = f"scene_{i:04d}"
        write_pgm(directory / f"{name}.pgm", raster)
        save_annotation(directory / f"{name}.json", f"{name}.pgm", points)
        written.append(directory / f"{name}.json")
    return written

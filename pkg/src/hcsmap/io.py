"""On-disk formats: GRD1 grids, FPD1 footprint datasets, image and CSV exports.

GRD1 layout::

    b"GRD1\\n" + <compact JSON header> + b"\\n"
    + float32 little-endian payload, band-major (bands, height, width)
    + nodata mask, row-major, bit-packed little-endian bit order

FPD1 layout::

    b"FPD1\\n" + <compact JSON index> + b"\\n" + float32 little-endian patch payload

The FPD1 index holds the tile list, a config echo, the patch shape and one
record ``[tile_id, col, row, height, source, offset]`` per sample; ``offset`` is
the record's element offset into the payload, or -1 for samples stored without
a patch.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .grid import GeoTransform, Grid

GRD_MAGIC = b"GRD1\n"
FPD_MAGIC = b"FPD1\n"


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write(path, data: bytes | str):
    """Write via a temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.strip().decode()} file")
    end = data.index(b"\n", len(magic))
    return json.loads(data[len(magic):end]), end + 1


def grid_to_bytes(grid: Grid) -> bytes:
    t = grid.transform
    header = {
        "format": "GRD1",
        "width": grid.width,
        "height": grid.height,
        "bands": grid.bands,
        "pixel_size": t.pixel_size,
        "origin_x": t.origin_x,
        "origin_y": t.origin_y,
        "band_names": list(grid.band_names),
        "nodata": "mask",
        "dtype": "<f4",
    }
    payload = grid.values.astype("<f4").tobytes()
    mask = np.packbits(grid.mask.ravel(), bitorder="little").tobytes()
    return GRD_MAGIC + dumps_json(header).encode() + b"\n" + payload + mask


def grid_from_bytes(data: bytes) -> Grid:
    h, pos = _split_header(data, GRD_MAGIC)
    b, rows, cols = h["bands"], h["height"], h["width"]
    n = b * rows * cols
    values = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(b, rows, cols)
    bits = np.frombuffer(data, dtype=np.uint8, offset=pos + 4 * n)
    mask = np.unpackbits(bits, count=rows * cols, bitorder="little").astype(bool).reshape(rows, cols)
    t = GeoTransform(h["origin_x"], h["origin_y"], h["pixel_size"])
    return Grid(values.astype(np.float32), t, mask, tuple(h["band_names"]))


def write_grid(path, grid: Grid):
    return atomic_write(path, grid_to_bytes(grid))


def read_grid(path) -> Grid:
    return grid_from_bytes(Path(path).read_bytes())


def _scale_u8(a, mask):
    valid = ~mask
    out = np.zeros(a.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = float(a[valid].min()), float(a[valid].max())
        span = hi - lo if hi > lo else 1.0
        out[valid] = np.clip(np.round((a[valid] - lo) / span * 254) + 1, 1, 255).astype(np.uint8)
    return out


def write_pgm(path, grid: Grid, band=0):
    """Single band, min-max scaled to 1..255; nodata is written as 0."""
    img = _scale_u8(grid.values[band].astype(np.float64), grid.mask)
    head = f"P5\n{grid.width} {grid.height}\n255\n".encode()
    return atomic_write(path, head + img.tobytes())


def write_ppm(path, codes: np.ndarray, palette):
    """RGB export of an integer code raster through ``palette[code] -> (r, g, b)``."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    for code, rgb in palette.items():
        lut[int(code)] = rgb
    rgb = lut[np.asarray(codes, dtype=np.intp)]
    h, w = rgb.shape[:2]
    return atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    return atomic_write(path, csv_text(header, rows))


def write_samples_csv(path, grid: Grid, points):
    """Values of every band at the given (col, row) pixels, with map coordinates."""
    rows = []
    for col, row in points:
        x, y = grid.transform.center(col, row)
        vals = [float(v) for v in grid.values[:, row, col]]
        rows.append([col, row, x, y, int(grid.mask[row, col]), *vals])
    return write_csv(path, ["col", "row", "x", "y", "nodata", *grid.band_names], rows)


def write_json(path, obj):
    return atomic_write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def fpd_to_bytes(records, patches=None, tiles=(), config=None) -> bytes:
    """Serialize footprint records (and optional patches) as FPD1.

    ``records`` is a sequence of ``(tile_id, col, row, height, source)``;
    ``patches`` is ``None`` or an ``(n, size, size, bands)`` array aligned with them.
    """
    shape = [] if patches is None else list(np.shape(patches)[1:])
    per = int(np.prod(shape)) if shape else 0
    index = []
    for i, (tile_id, col, row, height, source) in enumerate(records):
        index.append([int(tile_id), int(col), int(row), float(height), str(source),
                      i * per if patches is not None else -1])
    header = {"format": "FPD1", "tiles": list(tiles), "config": config or {},
              "patch_shape": shape, "records": index}
    payload = b"" if patches is None else np.asarray(patches, dtype="<f4").tobytes()
    return FPD_MAGIC + dumps_json(header).encode() + b"\n" + payload


def fpd_from_bytes(data: bytes):
    """Return ``(header, records, patches)``; patches is None when none are stored."""
    h, pos = _split_header(data, FPD_MAGIC)
    records = [tuple(r[:5]) for r in h["records"]]
    patches = None
    if h["patch_shape"]:
        shape = tuple(h["patch_shape"])
        n = len(records)
        patches = np.frombuffer(data, dtype="<f4", count=n * int(np.prod(shape)), offset=pos)
        patches = patches.reshape((n, *shape)).astype(np.float32)
    return h, records, patches

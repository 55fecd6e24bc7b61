"""Binary PGM/PPM reading and writing, and the line-oriented graph format."""

from pathlib import Path

import numpy as np

from numeric.errors import InvalidArgumentError

from .graph import Image, RegionGraph


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidArgumentError("truncated PNM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_pnm(path) -> Image:
    """Read a binary P5 (gray) or P6 (color) file with maxval <= 255."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _header_tokens(raw, 4)
    if magic not in (b"P5", b"P6"):
        raise InvalidArgumentError(f"{path}: only binary PGM/PPM are supported, got {magic!r}")
    width, height, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval <= 255:
        raise InvalidArgumentError(f"{path}: maxval {maxval} unsupported")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    if len(raw) - offset < expected:
        raise InvalidArgumentError(f"{path}: body holds {len(raw) - offset} bytes, header promises {expected}")
    body = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset)
    return Image(width=width, height=height, channels=channels,
                 data=body.astype(np.float64) / maxval)


def write_pnm(path, image: Image):
    magic = b"P5" if image.channels == 1 else b"P6"
    pixels = np.clip(np.round(image.data * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(magic + f"\n{image.width} {image.height}\n255\n".encode() + pixels.tobytes())


def write_pgm(path, grid: np.ndarray, labels: bool = False):
    """Write a 2-D grid as PGM.

    Label maps are written with label = gray level; real-valued grids are
    scaled from their own [min, max] range to 0..255.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise InvalidArgumentError(f"PGM needs a 2-D grid, got {grid.shape}")
    if labels:
        if grid.size and (grid.min() < 0 or grid.max() > 255):
            raise InvalidArgumentError("label values must fit in 0..255")
        gray = grid.astype(np.uint8)
    else:
        lo, hi = float(grid.min(initial=0.0)), float(grid.max(initial=0.0))
        span = hi - lo if hi > lo else 1.0
        gray = np.round((grid - lo) / span * 255).astype(np.uint8)
    h, w = grid.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def write_graph(path, graph: RegionGraph):
    lines = [f"R {r.id} {r.centroid[0]:.6f} {r.centroid[1]:.6f} {r.area}" for r in graph.regions]
    lines += [f"E {a} {b} {d:.6f}" for a, b, d in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> tuple[list[dict], list[tuple]]:
    """Parse the graph text format into region summaries and edges."""
    regions, edges = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "R":
                regions.append({"id": int(parts[1]), "centroid": (float(parts[2]), float(parts[3])),
                                "npix": int(parts[4])})
            elif parts[0] == "E":
                edges.append((int(parts[1]), int(parts[2]), float(parts[3])))
            else:
                raise InvalidArgumentError(f"{path}:{n}: unknown record {parts[0]!r}")
        except (IndexError, ValueError) as e:
            raise InvalidArgumentError(f"{path}:{n}: malformed line {line!r}") from e
    return regions, edges

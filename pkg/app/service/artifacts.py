import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from app.core.exceptions import EmptyInputError, ParseError
from app.entity.latent import FloatArray, LatentGrid
from app.entity.layout import BBox, LayoutMask, LayoutReport
from app.entity.trace import RunTrace

LATENT_DTYPE = np.dtype("<f8")


def write_latent(latent: LatentGrid, path: Path) -> None:
    """Write a latent: a `C H W` header line followed by raw little-endian float64 values."""
    c, h, w = latent.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"{c} {h} {w}\n".encode("ascii"))
        fh.write(latent.data.astype(LATENT_DTYPE).tobytes(order="C"))


def read_latent(path: Path, step_index: int = 0) -> LatentGrid:
    """
    Read a latent written by `write_latent`.

    Raises:
        EmptyInputError: If the file does not exist.
        ParseError: If the header or the payload size is malformed.
    """
    if not path.is_file():
        msg = f"Latent file {path} not found"
        raise EmptyInputError(msg)
    raw = path.read_bytes()
    header, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ParseError("Latent file has no header line", line_no=1)
    try:
        c, h, w = (int(v) for v in header.decode("ascii").split())
    except ValueError as exc:
        raise ParseError("Latent header must be 'C H W'", line_no=1) from exc
    if len(payload) != c * h * w * LATENT_DTYPE.itemsize:
        msg = f"Latent payload has {len(payload)} bytes, expected {c * h * w * LATENT_DTYPE.itemsize}"
        raise ParseError(msg)
    data = np.frombuffer(payload, dtype=LATENT_DTYPE).reshape(c, h, w).astype(np.float64)
    return LatentGrid(data, step_index)


def write_pgm(values: FloatArray, path: Path) -> None:
    """Write a 2-D map as a binary PGM, min-max scaled to [0, 255]."""
    low, high = float(values.min()), float(values.max())
    span = high - low
    scaled = np.zeros_like(values) if span == 0 else (values - low) / span
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def write_mask_pgm(mask: LayoutMask, path: Path) -> None:
    """Write a layout mask as a binary PGM, 255 for set cells and 0 elsewhere."""
    pixels = np.where(mask.grid, 255, 0).astype(np.uint8)
    h, w = pixels.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def format_layout(
layout: LayoutReport) -> str:
    """Render a layout report, one `<name> x0 y0 x1 y1` line per box."""
    return "".join(
        f"{name} {box.x0:.6f} {box.y0:.6f} {box.x1:.6f} {box.y1:.6f}\n" for name, box in layout.boxes.items()
    )


def parse_layout(text: str) -> LayoutReport:
    """
    Parse a layout report. Names may hold spaces; the last four fields are the coordinates.

    Raises:
        ParseError: On a malformed line.
    """
    report = LayoutReport()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 5:  # noqa: PLR2004
            raise ParseError("Expected '<name> x0 y0 x1 y1'", line_no=line_no)
        try:
            box = BBox(*(float(v) for v in fields[-4:]))
        except ValueError as exc:
            raise ParseError(f"Invalid box: {exc}", line_no=line_no) from exc
        report.boxes[" ".join(fields[:-4])] = box
    return report


def read_layout(path: Path) -> LayoutReport:
    """Read a layout report file."""
    if not path.is_file():
        msg = f"Layout file {path} not found"
        raise EmptyInputError(msg)
    return parse_layout(path.read_text(encoding="utf-8"))


def write_trace(trace: RunTrace, path: Path, extra: dict[str, Any] | None = None) -> None:
    """Write a run trace as JSON."""
    payload = trace.as_dict() | (extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def write_manifest(directory: Path) -> Path:
    """List every file under `directory` with its SHA-256 in `manifest.txt`, sorted by path."""
    manifest = directory / "manifest.txt"
    lines = []
    for path in sorted(p for p in directory.rglob("*") if p.is_file() and p != manifest):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(directory).as_posix()}\n")
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest

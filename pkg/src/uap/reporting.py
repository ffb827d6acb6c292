"""Per-generation metrics persistence and artifact export.

PNG output uses a built-in encoder pinned to byte-stable settings: 8-bit RGB,
no interlace, filter type 0 on every scanline, single IDAT chunk compressed
with zlib level 9. SVG output is plain text with fixed-precision coordinates,
so both formats diff cleanly across runs.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensors import ImageBatch, NormalizationSpec, Perturbation, apply_perturbation, denormalize01

CSV_HEADER = (
    "generation,batch_id,best_gamma,best_l2_255,best_mse_255,"
    "mean_confidence_true,epsilon,p_cross,p_mut,wall_ms"
)

_INT_FIELDS = ("generation", "batch_id", "wall_ms")
_FLOAT_FIELDS = (
    "best_gamma",
    "best_l2_255",
    "best_mse_255",
    "mean_confidence_true",
    "epsilon",
    "p_cross",
    "p_mut",
)


@dataclass
class GenerationRecord:
    """One metrics row per completed generation."""

    generation: int
    batch_id: int
    best_gamma: float
    best_l2_255: float
    best_mse_255: float
    mean_confidence_true: float
    epsilon: float
    p_cross: float
    p_mut: float
    wall_ms: int


def _format_row(record: GenerationRecord) -> str:
    return ",".join(
        [
            str(record.generation),
            str(record.batch_id),
            f"{record.best_gamma:.9g}",
            f"{record.best_l2_255:.9g}",
            f"{record.best_mse_255:.9g}",
            f"{record.mean_confidence_true:.9g}",
            f"{record.epsilon:.9g}",
            f"{record.p_cross:.9g}",
            f"{record.p_mut:.9g}",
            str(record.wall_ms),
        ]
    )


def append_record(sink: str | Path, record: GenerationRecord) -> None:
    """Append one CSV row, writing the header first on an empty file.

    The row is flushed before returning so an interrupted run keeps every
    completed generation.
    """
    sink = Path(sink)
    needs_header = not sink.exists() or sink.stat().st_size == 0
    with open(sink, "a", newline="") as fh:
        if needs_header:
            fh.write(CSV_HEADER + "\n")
        fh.write(_format_row(record) + "\n")
        fh.flush()


def read_records(path: str | Path) -> list[GenerationRecord]:
    """Parse a metrics CSV back into records."""
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                GenerationRecord(
                    **{k: int(row[k]) for k in _INT_FIELDS},
                    **{k: float(row[k]) for k in _FLOAT_FIELDS},
                )
            )
    return records


# ---------------------------------------------------------------------------
# PNG encoding
# ---------------------------------------------------------------------------

def encode_png(rgb: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array with the pinned settings above."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got shape {rgb.shape}")
    h, w, _ = rgb.shape

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def _quantize01(x01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x01 * 255.0), 0, 255).astype(np.uint8)


def export_perturbation_image(
    delta: Perturbation, norm: NormalizationSpec, path: str | Path
) -> None:
    """Render the perturbation with mid-gray as zero.

    Pixel value is 128 + clamp(unnormalized delta, -128, 127), so the raw
    noise pattern is recoverable from the image up to quantization.
    """
    d255 = delta.genes * norm.std_chw() * norm.pixel_scale
    pix = 128.0 + np.clip(d255, -128.0, 127.0)
    rgb = np.clip(np.rint(pix), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(encode_png(rgb))


def export_attack_grid(
    batch: ImageBatch,
    delta: Perturbation,
    norm: NormalizationSpec,
    path: str | Path,
    rows: int,
    cols: int,
) -> None:
    """Tile clean images (first column) against attacked ones.

    Row i shows image i; 2-pixel black gutters separate tiles.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    if rows * cols > batch.n:
        raise ValueError(f"grid {rows}x{cols} needs more images than batch has ({batch.n})")
    attacked = apply_perturbation(batch, delta, norm)
    clean8 = _quantize01(denormalize01(batch.data, norm))
    attacked8 = _quantize01(denormalize01(attacked.data, norm))
    _, _, h, w = batch.data.shape
    gutter = 2
    canvas = np.zeros(
        (rows * h + gutter * (rows - 1), cols * w + gutter * (cols - 1), 3),
        dtype=np.uint8,
    )
    for i in range(rows):
        y = i * (h + gutter)
        for j in range(cols):
            x = j * (w + gutter)
            tile = clean8[i] if j == 0 else attacked8[i]
            canvas[y : y + h, x : x + w] = tile.transpose(1, 2, 0)
    Path(path).write_bytes(encode_png(canvas))


# ---------------------------------------------------------------------------
# Convergence chart
# ---------------------------------------------------------------------------

_PANELS = (
    ("Perturbation Norm", "best_l2_255"),
    ("Average MSE", "best_mse_255"),
    ("Misclassification Rate", "best_gamma"),
    ("Average Confidence Score", "mean_confidence_true"),
)

_PANEL_W, _PANEL_H = 390, 280
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 58, 16, 34, 36


def render_convergence_svg(history: list[GenerationRecord], path: str | Path) -> None:
    """Write a self-contained 2x2-panel SVG line chart of the metric tracks."""
    if not history:
        raise ValueError("history must be non-empty")
    gens = [r.generation for r in history]
    gmin, gmax = min(gens), max(gens)
    width, height = 2 * _PANEL_W + 30, 2 * _PANEL_H + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for idx, (title, field) in enumerate(_PANELS):
        ox = 10 + (idx % 2) * (_PANEL_W + 10)
        oy = 10 + (idx // 2) * (_PANEL_H + 10)
        values = [getattr(r, field) for r in history]
        vmin, vmax = min(values), max(values)
        x0, y0 = ox + _MARGIN_L, oy + _MARGIN_T
        plot_w = _PANEL_W - _MARGIN_L - _MARGIN_R
        plot_h = _PANEL_H - _MARGIN_T - _MARGIN_B

        def sx(g: float) -> float:
            if gmax == gmin:
                return x0 + plot_w / 2
            return x0 + (g - gmin) / (gmax - gmin) * plot_w

        def sy(v: float) -> float:
            if vmax == vmin:
                return y0 + plot_h / 2
            return y0 + (vmax - v) / (vmax - vmin) * plot_h

        points = " ".join(f"{sx(r.generation):.2f},{sy(getattr(r, field)):.2f}" for r in history)
        parts += [
            f'<g font-family="sans-serif" font-size="12">',
            f'<text x="{ox + _PANEL_W / 2:.2f}" y="{oy + 20}" text-anchor="middle" '
            f'font-size="14">{title}</text>',
            f'<rect x="{x0}" y="{y0}" width="{plot_w}" height="{plot_h}" '
            f'fill="none" stroke="#888" stroke-width="1"/>',
            f'<text x="{x0 - 6}" y="{y0 + 10}" text-anchor="end">{vmax:.4g}</text>',
            f'<text x="{x0 - 6}" y="{y0 + plot_h}" text-anchor="end">{vmin:.4g}</text>',
            f'<text x="{x0}" y="{y0 + plot_h + 16}" text-anchor="middle">{gmin}</text>',
            f'<text x="{x0 + plot_w}" y="{y0 + plot_h + 16}" text-anchor="middle">{gmax}</text>',
            f'<text x="{x0 + plot_w / 2:.2f}" y="{y0 + plot_h + 30}" '
            f'text-anchor="middle">generation</text>',
            f'<polyline fill="none" stroke="#1f6fb4" stroke-width="1.5" points="{points}"/>',
            "</g>",
        ]
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")

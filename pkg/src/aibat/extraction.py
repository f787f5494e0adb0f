"""Note extraction from rasterized drawing pages.

Pipeline per page: binarize, find the notes region, split columns at wide
white bands, split each column into notes at enlarged blank gaps, detect
and remove flag triangles, then OCR each crop.
"""

from __future__ import annotations

import os
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyOcrResult, EngineUnavailable, NoInkFound
from .geometry import (
    contour_perimeter,
    point_segment_distance,
    simplify_closed_contour,
    trace_outer_contour,
)
from .model import DrawingNote, NoteCrop, NoteType, PageImage

Bbox = tuple[int, int, int, int]  # x, y, w, h


@dataclass(frozen=True)
class BinaryImage:
    """1 bit per pixel; True = ink (black), False = background (white)."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("bits must be 2-D")
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def crop(self, bbox: Bbox) -> "BinaryImage":
        x, y, w, h = bbox
        return BinaryImage(self.bits[y : y + h, x : x + w])

    def to_grayscale(self) -> np.ndarray:
        return np.where(self.bits, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple((float(x), float(y)) for x, y in self.vertices))

    def bbox(self) -> Bbox:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        x0, y0 = int(min(xs)), int(min(ys))
        return (x0, y0, int(max(xs)) - x0 + 1, int(max(ys)) - y0 + 1)


@dataclass(frozen=True)
class ExtractionConfig:
    """Thresholds behind the segmentation and flag-detection rules.

    All values are config-surfaced because the underlying rules are stated
    qualitatively; the defaults are tuned against the synthetic corpus.
    """

    binarize_threshold: Union[str, int] = "auto"
    column_gap_min_frac: float = 0.05
    row_blank_white_frac: float = 0.995
    note_gap_factor: float = 1.8
    rdp_epsilon_frac: float = 0.02
    min_triangle_px: int = 12
    flag_zone_frac: float = 0.15
    morph_kernel: int = 3
    morph_diff_frac: float = 0.005
    region_override: Optional[Bbox] = None

    def __post_init__(self):
        for name in ("column_gap_min_frac", "row_blank_white_frac", "note_gap_factor",
                     "rdp_epsilon_frac", "flag_zone_frac", "morph_diff_frac"):
            v = getattr(self, name)
            if name == "note_gap_factor":
                if v <= 0:
                    raise ValueError("note_gap_factor must be > 0")
            elif not (0.0 < v < 1.0):
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.morph_kernel < 3 or self.morph_kernel % 2 == 0:
            raise ValueError("morph_kernel must be odd and >= 3")
        if self.binarize_threshold != "auto" and not (0 <= int(self.binarize_threshold) <= 255):
            raise ValueError("binarize_threshold must be 'auto' or 0-255")
        if self.region_override is not None:
            object.__setattr__(self, "region_override", tuple(self.region_override))

    def to_json(self) -> dict:
        d = {
            "binarize_threshold": self.binarize_threshold,
            "column_gap_min_frac": self.column_gap_min_frac,
            "row_blank_white_frac": self.row_blank_white_frac,
            "note_gap_factor": self.note_gap_factor,
            "rdp_epsilon_frac": self.rdp_epsilon_frac,
            "min_triangle_px": self.min_triangle_px,
            "flag_zone_frac": self.flag_zone_frac,
            "morph_kernel": self.morph_kernel,
            "morph_diff_frac": self.morph_diff_frac,
        }
        if self.region_override is not None:
            d["region_override"] = list(self.region_override)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExtractionConfig":
        kwargs = dict(d)
        if "region_override" in kwargs and kwargs["region_override"] is not None:
            kwargs["region_override"] = tuple(kwargs["region_override"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Binarization


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold maximizing between-class variance; first argmax on ties."""
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum_mean = np.cumsum(hist * np.arange(256))
    grand = cum_mean[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_mean / w0
        mu1 = (grand - cum_mean) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between = np.nan_to_num(var_between, nan=0.0)
    return int(np.argmax(var_between))


def binarize(page: PageImage, cfg: ExtractionConfig) -> BinaryImage:
    """Ink = pixels at or below the threshold."""
    t = otsu_threshold(page.pixels) if cfg.binarize_threshold == "auto" else int(cfg.binarize_threshold)
    return BinaryImage(page.pixels <= t)


# ---------------------------------------------------------------------------
# Region and segmentation


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (start, end) index pairs."""
    out = []
    start = None
    for i, v in enumerate(flags):
        if v and start is None:
            start = i
        elif not v and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(flags) - 1))
    return out


def _low_median(values: list[int]) -> int:
    return sorted(values)[(len(values) - 1) // 2]


def detect_notes_region(page: BinaryImage, cfg: ExtractionConfig) -> Bbox:
    """Bounding box of the largest connected cluster of text lines.

    Lines group into a cluster while the vertical gap between them stays
    under 3x the median line height; the cluster with the most ink wins.
    The configured region_override short-circuits the rule.
    """
    if cfg.region_override is not None:
        return tuple(cfg.region_override)
    row_ink = page.bits.any(axis=1)
    bands = _runs(row_ink)
    if not bands:
        raise NoInkFound("page holds no ink and no region override was given")
    med_h = _low_median([y1 - y0 + 1 for y0, y1 in bands])
    clusters: list[list[tuple[int, int]]] = [[bands[0]]]
    for prev, cur in zip(bands, bands[1:]):
        gap = cur[0] - prev[1] - 1
        if gap < 3 * med_h:
            clusters[-1].append(cur)
        else:
            clusters.append([cur])
    ink_per_row = page.bits.sum(axis=1)
    best = max(clusters, key=lambda cl: sum(int(ink_per_row[y0 : y1 + 1].sum()) for y0, y1 in cl))
    y0, y1 = best[0][0], best[-1][1]
    col_ink = page.bits[y0 : y1 + 1].any(axis=0)
    xs = np.nonzero(col_ink)[0]
    x0, x1 = int(xs[0]), int(xs[-1])
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def split_columns(region: BinaryImage, cfg: ExtractionConfig) -> list[tuple[int, BinaryImage]]:
    """Split at interior all-white bands at least column_gap_min_frac wide.

    Returns (x_offset, crop) pairs left to right; columns plus gaps tile the
    region width. A region with no qualifying gap is a single column.
    """
    width = region.width
    col_white = ~region.bits.any(axis=0)
    min_gap = cfg.column_gap_min_frac * width
    gaps = [
        (s, e)
        for s, e in _runs(col_white)
        if (e - s + 1) >= min_gap and s > 0 and e < width - 1
    ]
    columns: list[tuple[int, BinaryImage]] = []
    x = 0
    for s, e in gaps:
        columns.append((x, BinaryImage(region.bits[:, x:s])))
        x = e + 1
    columns.append((x, BinaryImage(region.bits[:, x:width])))
    return columns


def note_row_bands(column: BinaryImage, cfg: ExtractionConfig) -> list[tuple[int, int]]:
    """Merge line bands into per-note row extents.

    Rows whose white fraction reaches row_blank_white_frac delimit line
    bands; bands merge into one note while the blank gap between them is
    under note_gap_factor x the median observed line gap.
    """
    if column.width == 0:
        return []
    white_frac = 1.0 - column.bits.sum(axis=1) / column.width
    line_rows = white_frac < cfg.row_blank_white_frac
    bands = _runs(line_rows)
    if len(bands) <= 1:
        return bands
    gaps = [cur[0] - prev[1] - 1 for prev, cur in zip(bands, bands[1:])]
    med_gap = _low_median(gaps)
    notes = [[bands[0]]]
    for gap, band in zip(gaps, bands[1:]):
        if gap < cfg.note_gap_factor * med_gap:
            notes[-1].append(band)
        else:
            notes.append([band])
    return [(group[0][0], group[-1][1]) for group in notes]


def split_notes(
    column: BinaryImage,
    cfg: ExtractionConfig,
    *,
    page_index: int = 0,
    origin: tuple[int, int] = (0, 0),
    column_index: int = 0,
    page_gray: Optional[np.ndarray] = None,
) -> list[NoteCrop]:
    """Cut a column into note crops, top to bottom.

    origin is the column's (x, y) offset in page coordinates so the crops
    carry page-level provenance. Crop pixels come from page_gray when given,
    otherwise from the binary column itself.
    """
    ox, oy = origin
    crops: list[NoteCrop] = []
    for row_order, (y0, y1) in enumerate(note_row_bands(column, cfg)):
        rows = column.bits[y0 : y1 + 1]
        xs = np.nonzero(rows.any(axis=0))[0]
        if len(xs) == 0:
            continue
        x0, x1 = int(xs[0]), int(xs[-1])
        bbox = (ox + x0, oy + y0, x1 - x0 + 1, y1 - y0 + 1)
        if page_gray is not None:
            gx, gy, gw, gh = bbox
            pixels = page_gray[gy : gy + gh, gx : gx + gw].copy()
        else:
            pixels = BinaryImage(rows[:, x0 : x1 + 1]).to_grayscale()
        crops.append(
            NoteCrop(
                page_index=page_index,
                bbox=bbox,
                column_index=column_index,
                row_order=row_order,
                pixels=pixels,
            )
        )
    return crops


# ---------------------------------------------------------------------------
# Flag triangle detection and removal


def flag_zone_width(width: int, frac: float) -> int:
    return max(1, int(round(width * frac)))


def detect_triangle_contour(crop: BinaryImage, cfg: ExtractionConfig) -> Optional[Polygon]:
    """First contour that simplifies to exactly three vertices and passes
    the size and leading-zone gates; None when there is no such contour."""
    zone = flag_zone_width(crop.width, cfg.flag_zone_frac)
    labels, count = ndimage.label(crop.bits, structure=np.ones((3, 3), dtype=int))
    objects = ndimage.find_objects(labels)
    order = sorted(range(count), key=lambda i: (objects[i][0].start, objects[i][1].start))
    for i in order:
        sl = objects[i]
        h = sl[0].stop - sl[0].start
        w = sl[1].stop - sl[1].start
        if h < cfg.min_triangle_px or w < cfg.min_triangle_px:
            continue
        if sl[1].stop > zone:
            continue
        component = labels[sl] == (i + 1)
        contour = trace_outer_contour(component)
        if len(contour) < 3:
            continue
        perimeter = contour_perimeter(contour)
        poly = simplify_closed_contour(contour, cfg.rdp_epsilon_frac * perimeter)
        if len(poly) != 3:
            continue
        ox, oy = sl[1].start, sl[0].start
        return Polygon(tuple((x + ox, y + oy) for x, y in poly))
    return None


def detect_triangle_morph(crop: BinaryImage, cfg: ExtractionConfig) -> bool:
    """Opening with a square kernel removes strokes thinner than the kernel;
    a notable change inside the leading zone means a thin flag triangle."""
    zone = flag_zone_width(crop.width, cfg.flag_zone_frac)
    kernel = np.ones((cfg.morph_kernel, cfg.morph_kernel), dtype=bool)
    opened = ndimage.binary_opening(crop.bits, structure=kernel)
    changed = crop.bits[:, :zone] != opened[:, :zone]
    area = crop.height * zone
    return bool(area > 0 and changed.sum() / area > cfg.morph_diff_frac)


def _triangle_stroke_width(crop: BinaryImage, triangle: Polygon) -> int:
    """Mean ink thickness of the ring the contour was traced from."""
    labels, _ = ndimage.label(crop.bits, structure=np.ones((3, 3), dtype=int))
    vx, vy = triangle.vertices[0]
    label = labels[int(vy), int(vx)]
    if label == 0:
        return 1
    area = int((labels == label).sum())
    perimeter = contour_perimeter(list(triangle.vertices))
    if perimeter <= 0:
        return 1
    return max(1, round(area / perimeter))


def remove_flag(crop: BinaryImage, triangle: Polygon) -> BinaryImage:
    """White out pixels along the triangle edges, leaving the interior alone.

    The clearing band is the contour's mean stroke width (plus one pixel of
    raster slack) around each edge, so the enclosed note number survives.
    """
    width = _triangle_stroke_width(crop, triangle)
    reach = width + 1.0
    bits = crop.bits.copy()
    x0, y0, w, h = triangle.bbox()
    pad = int(np.ceil(reach)) + 1
    xa, ya = max(0, x0 - pad), max(0, y0 - pad)
    xb = min(crop.width, x0 + w + pad)
    yb = min(crop.height, y0 + h + pad)
    verts = list(triangle.vertices)
    for y in range(ya, yb):
        for x in range(xa, xb):
            if not bits[y, x]:
                continue
            p = (float(x), float(y))
            for i in range(len(verts)):
                a, b = verts[i], verts[(i + 1) % len(verts)]
                if point_segment_distance(p, a, b) <= reach:
                    bits[y, x] = False
                    break
    return BinaryImage(bits)


# ---------------------------------------------------------------------------
# OCR


class OcrEngine(Protocol):
    """Adapter contract for OCR backends.

    max_concurrency of 1 forces the pipeline to serialize calls into the
    engine; anything higher declares the adapter safe for parallel use.
    """

    max_concurrency: int

    def recognize(self, crop: BinaryImage, ref: Optional[NoteCrop] = None) -> str:
        ...


class CommandOcrEngine:
    """Runs an external OCR process on a PNG crop; stdout is the text.

    The command template gets the PNG path substituted for {input}; a
    non-zero exit code means the engine is unavailable.
    """

    max_concurrency = 1

    def __init__(self, command_template: str):
        if "{input}" not in command_template:
            raise ValueError("OCR command template must contain {input}")
        self.command_template = command_template

    def recognize(self, crop: BinaryImage, ref: Optional[NoteCrop] = None) -> str:
        with tempfile.TemporaryDirectory(prefix="aibat-ocr-") as tmp:
            png = os.path.join(tmp, "crop.png")
            write_png(png, crop.to_grayscale())
            cmd = [part.replace("{input}", png) for part in shlex.split(self.command_template)]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=120)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise EngineUnavailable(str(exc)) from exc
        if proc.returncode != 0:
            raise EngineUnavailable(f"ocr command exited {proc.returncode}: {proc.stderr.strip()}")
        return proc.stdout


def ocr(crop: BinaryImage, engine: OcrEngine, ref: Optional[NoteCrop] = None) -> str:
    """Recognize a crop; line breaks normalized to \\n, lines right-stripped."""
    raw = engine.recognize(crop, ref)
    lines = [line.rstrip() for line in raw.replace("\r\n", "\n").split("\n")]
    while lines and not lines[-1]:
        lines.pop()
    text = "\n".join(lines)
    if not text.strip():
        raise EmptyOcrResult("ocr produced no text")
    return text


# ---------------------------------------------------------------------------
# Full chain


@dataclass
class ExtractionResult:
    notes: list[DrawingNote]
    warnings: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"notes": [n.to_json() for n in self.notes], "warnings": self.warnings}


_LEADING_INT = re.compile(r"^\s*(\d+)\b")


def extract_notes(
    pages: list[PageImage],
    cfg: ExtractionConfig,
    engine: OcrEngine,
    debug_dir: Optional[str] = None,
) -> ExtractionResult:
    """Run the whole extraction chain over a set of pages.

    Flagged iff either triangle detector fires; a contour hit additionally
    erases the triangle before OCR. Notes are ordered (page, column, row)
    and numbered from the leading integer token of their OCR text, falling
    back to previous+1 with a warning.
    """
    if not pages:
        raise ValueError("need >= 1 page")
    notes: list[DrawingNote] = []
    warnings: list[dict] = []
    prev_number = 0
    for page in pages:
        page_bits = binarize(page, cfg)
        rx, ry, rw, rh = detect_notes_region(page_bits, cfg)
        region = page_bits.crop((rx, ry, rw, rh))
        for column_index, (cx, column) in enumerate(split_columns(region, cfg)):
            crops = split_notes(
                column,
                cfg,
                page_index=page.page_index,
                origin=(rx + cx, ry),
                column_index=column_index,
                page_gray=page.pixels,
            )
            for crop in crops:
                bx, by, bw, bh = crop.bbox
                crop_bits = BinaryImage(page_bits.bits[by : by + bh, bx : bx + bw])
                triangle = detect_triangle_contour(crop_bits, cfg)
                morph_hit = detect_triangle_morph(crop_bits, cfg)
                flagged = triangle is not None or morph_hit
                if triangle is not None:
                    crop_bits = remove_flag(crop_bits, triangle)
                if debug_dir:
                    os.makedirs(debug_dir, exist_ok=True)
                    write_png(
                        os.path.join(
                            debug_dir,
                            f"page{page.page_index}-col{column_index}-row{crop.row_order}.png",
                        ),
                        crop_bits.to_grayscale(),
                    )
                try:
                    text = ocr(crop_bits, engine, crop)
                except EmptyOcrResult:
                    warnings.append(
                        {
                            "kind": "empty-ocr-result",
                            "page_index": page.page_index,
                            "bbox": list(crop.bbox),
                            "detail": "crop skipped: OCR produced no text",
                        }
                    )
                    continue
                m = _LEADING_INT.match(text)
                if m:
                    number = int(m.group(1))
                else:
                    number = prev_number + 1
                    warnings.append(
                        {
                            "kind": "non-numeric-note-number",
                            "page_index": page.page_index,
                            "bbox": list(crop.bbox),
                            "detail": f"leading token not numeric; inferred {number}",
                        }
                    )
                prev_number = number
                notes.append(
                    DrawingNote(
                        note_number=number,
                        note_type=NoteType.FLAGGED if flagged else NoteType.PLAIN,
                        text=text,
                        crop_ref=replace(crop, pixels=None),
                    )
                )
    return ExtractionResult(notes=notes, warnings=warnings)


# ---------------------------------------------------------------------------
# Page image IO


_PAGE_NAME = re.compile(r"^page-(\d+)\.png$")


def write_png(path: str, gray: np.ndarray):
    Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def save_pages(pages: list[PageImage], out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    for page in pages:
        write_png(os.path.join(out_dir, f"page-{page.page_index}.png"), page.pixels)


def load_pages(in_dir: str, source_id: str = "") -> list[PageImage]:
    """Read page-<index>.png files, ordered by index."""
    found = []
    for name in os.listdir(in_dir):
        m = _PAGE_NAME.match(name)
        if m:
            found.append((int(m.group(1)), name))
    if not found:
        raise FileNotFoundError(f"no page-<index>.png files under {in_dir}")
    found.sort()
    return [
        PageImage(page_index=idx, pixels=read_png(os.path.join(in_dir, name)), source_id=source_id)
        for idx, name in found
    ]


def rasterize_pdf(pdf_path: str, out_dir: str, command_template: str, dpi: int = 300) -> list[PageImage]:
    """Rasterize a PDF via the configured external command, then load pages.

    The template receives {input}, {dpi} and {outdir} substitutions and must
    produce page-<index>.png files in the output directory.
    """
    os.makedirs(out_dir, exist_ok=True)
    cmd = [
        part.replace("{input}", pdf_path).replace("{dpi}", str(dpi)).replace("{outdir}", out_dir)
        for part in shlex.split(command_template)
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EngineUnavailable(f"rasterizer exited {proc.returncode}: {proc.stderr.strip()}")
    return load_pages(out_dir, source_id=os.path.splitext(os.path.basename(pdf_path))[0])

"""Page manifests, line extraction and sample assembly.

Images follow an inverted convention: 0 is background and 1 is ink, so
zero padding is blank paper.  On disk pages are ordinary 8-bit grayscale
PNGs (dark ink on white) and are inverted when loaded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from htrner.tags import (
    AnnotatedRecord,
    AnnotatedWord,
    PersonRole,
    SemanticCategory,
    SymbolTable,
    TagScheme,
    encode,
)

SPLITS = ("train", "valid", "test")
EXTRACTION_METHODS = ("bbox_union", "weighted_average")


class ManifestError(ValueError):
    """A manifest does not follow the expected schema."""


@dataclass(frozen=True)
class WordBox:
    x: int
    y: int
    w: int
    h: int
    transcript: str
    category: SemanticCategory
    person: PersonRole
    line_id: str
    record_id: str

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ManifestError(f"word box must have positive size, got {self.w}x{self.h}")
        object.__setattr__(self, "category", SemanticCategory(self.category))
        object.__setattr__(self, "person", PersonRole(self.person))

    @property
    def top(self) -> int:
        return self.y

    @property
    def bottom(self) -> int:
        return self.y + self.h

    def word(self) -> AnnotatedWord:
        return AnnotatedWord(self.transcript, self.category, self.person)

    def to_json(self) -> dict:
        return {
            "x": self.x, "y": self.y, "w": self.w, "h": self.h,
            "transcript": self.transcript,
            "category": self.category.value,
            "person": self.person.value,
            "line_id": self.line_id,
            "record_id": self.record_id,
        }


@dataclass
class PageManifest:
    image: str
    split: str
    words: list[WordBox] = field(default_factory=list)

    def lines(self) -> dict[str, list[WordBox]]:
        """Words grouped by line id, in reading order."""
        out: dict[str, list[WordBox]] = {}
        for w in self.words:
            out.setdefault(w.line_id, []).append(w)
        return out

    def records(self) -> dict[str, list[str]]:
        """Line ids grouped by record id, in reading order."""
        out: dict[str, list[str]] = {}
        for w in self.words:
            ids = out.setdefault(w.record_id, [])
            if not ids or ids[-1] != w.line_id:
                ids.append(w.line_id)
        return out

    def to_json(self) -> dict:
        return {"image": self.image, "split": self.split, "words": [w.to_json() for w in self.words]}


def parse_manifest(obj: dict) -> list[PageManifest]:
    """Validate a decoded manifest JSON document."""
    if not isinstance(obj, dict) or not isinstance(obj.get("pages"), list):
        raise ManifestError("manifest must be an object with a 'pages' list")
    pages = []
    fields = ("x", "y", "w", "h", "transcript", "category", "person", "line_id", "record_id")
    for i, page in enumerate(obj["pages"]):
        where = f"pages[{i}]"
        if not isinstance(page, dict) or "image" not in page or "words" not in page:
            raise ManifestError(f"{where}: needs 'image' and 'words'")
        split = page.get("split", "train")
        if split not in SPLITS:
            raise ManifestError(f"{where}.split: {split!r} is not one of {SPLITS}")
        words = []
        for j, wd in enumerate(page["words"]):
            missing = [f for f in fields if f not in wd]
            if missing:
                raise ManifestError(f"{where}.words[{j}]: missing field(s) {', '.join(missing)}")
            try:
                words.append(WordBox(
                    int(wd["x"]), int(wd["y"]), int(wd["w"]), int(wd["h"]), str(wd["transcript"]),
                    SemanticCategory(wd["category"]), PersonRole(wd["person"]),
                    str(wd["line_id"]), str(wd["record_id"]),
                ))
            except (ValueError, TypeError) as exc:
                raise ManifestError(f"{where}.words[{j}]: {exc}") from None
        pages.append(PageManifest(str(page["image"]), split, words))
    return pages


def load_manifest(path: str | Path) -> list[PageManifest]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return parse_manifest(obj)


def dump_manifest(pages: Sequence[PageManifest]) -> str:
    return json.dumps({"pages": [p.to_json() for p in pages]}, ensure_ascii=False, indent=1, sort_keys=True)


def save_manifest(pages: Sequence[PageManifest], path: str | Path) -> None:
    Path(path).write_text(dump_manifest(pages) + "\n", encoding="utf-8")


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as float intensities with 1 = ink."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return png_array_to_image(arr)


def png_array_to_image(arr: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(arr, dtype=np.float64) / 255.0


def image_to_png_array(img: np.ndarray) -> np.ndarray:
    return np.round((1.0 - np.clip(img, 0.0, 1.0)) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image_to_png_array(img), mode="L").save(path, optimize=False)


# Geometry ------------------------------------------------------------------


def line_bounds(words: Sequence[WordBox], method: str = "bbox_union") -> tuple[int, int, int, int]:
    """``(x0, x1, top, bottom)`` of a text line, bottom/x1 exclusive."""
    if not words:
        raise ValueError("line has no words")
    x0 = min(w.x for w in words)
    x1 = max(w.x + w.w for w in words)
    if method == "bbox_union":
        top = min(w.top for w in words)
        bottom = max(w.bottom for w in words)
    elif method == "weighted_average":
        total = sum(w.w for w in words)
        # floor/ceil so the averaged band never shaves ink off its own rounding
        top = math.floor(sum(w.w * w.top for w in words) / total)
        bottom = math.ceil(sum(w.w * w.bottom for w in words) / total)
    else:
        raise ValueError(f"unknown extraction method {method!r}")
    return x0, x1, top, bottom


def extract_line(page: np.ndarray, words: Sequence[WordBox], method: str = "bbox_union") -> np.ndarray:
    """Crop a text line from ``page`` by its word boxes."""
    if not words:
        raise ValueError("line has no words")
    if len({w.line_id for w in words}) > 1:
        raise ValueError("words belong to different lines")
    H, W = page.shape
    for w in words:
        if w.x < 0 or w.y < 0 or w.x + w.w > W or w.y + w.h > H:
            raise ValueError(f"word box {w.x},{w.y},{w.w},{w.h} lies outside the {W}x{H} page")
    x0, x1, top, bottom = line_bounds(words, method)
    top = max(0, min(top, H - 1))
    bottom = min(H, max(bottom, top + 1))
    return page[top:bottom, x0:x1].copy()


def normalize_height(img: np.ndarray, height: int) -> np.ndarray:
    """Bilinear rescale to ``height`` rows keeping the aspect ratio."""
    if height <= 0:
        raise ValueError("height must be positive")
    h, w = img.shape
    if h == height:
        return img.astype(np.float64, copy=True)
    new_w = max(1, int(round(w * height / h)))
    pil = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    out = np.asarray(pil.resize((new_w, height), Image.BILINEAR), dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def concat_record(lines: Sequence[np.ndarray], separator_px: int = 16) -> np.ndarray:
    """Join equal-height line images left to right with background gaps."""
    if not lines:
        raise ValueError("record has no lines")
    heights = {ln.shape[0] for ln in lines}
    if len(heights) != 1:
        raise ValueError(f"lines have different heights: {sorted(heights)}")
    if len(lines) == 1:
        return np.array(lines[0], dtype=np.float64)
    gap = np.zeros((lines[0].shape[0], separator_px))
    parts = []
    for i, ln in enumerate(lines):
        if i:
            parts.append(gap)
        parts.append(ln)
    return np.concatenate(parts, axis=1)


def pad_columns(img: np.ndarray, pad: int) -> np.ndarray:
    if pad <= 0:
        return img
    return np.pad(img, ((0, 0), (pad, pad)))


# Samples ---------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    record: AnnotatedRecord
    sample_id: str
    record_id: str
    split: str
    line_ids: tuple[str, ...] = ()
    target: list[int] = field(default_factory=list)

    def encode(self, scheme: TagScheme | str, table: SymbolTable) -> "Sample":
        self.target = encode(self.record, scheme, table)
        return self


def build_samples(
    pages: Sequence[PageManifest],
    images: Sequence[np.ndarray],
    level: str = "line",
    extraction: str = "bbox_union",
    height: int = 64,
    separator_px: int | None = None,
    pad_px: int | None = None,
    splits: Iterable[str] = SPLITS,
) -> list[Sample]:
    """Cut pages into line or record samples (targets left empty).

    Record samples are their lines, height-normalised and joined left to
    right; the annotation is all the record's words in reading order.
    ``separator_px`` and ``pad_px`` default to ``height // 4`` and
    ``height // 8``.
    """
    if level not in ("line", "record"):
        raise ValueError(f"unknown level {level!r}")
    if len(pages) != len(images):
        raise ValueError("need one image per page")
    separator_px = height // 4 if separator_px is None else separator_px
    pad_px = height // 8 if pad_px is None else pad_px
    wanted = set(splits)
    samples = []
    for page, img in zip(pages, images):
        if page.split not in wanted:
            continue
        lines = page.lines()
        crops = {lid: normalize_height(extract_line(img, ws, extraction), height) for lid, ws in lines.items()}
        if level == "line":
            for lid, ws in lines.items():
                rec = AnnotatedRecord(tuple(w.word() for w in ws), lid)
                samples.append(Sample(pad_columns(crops[lid], pad_px), rec, lid, ws[0].record_id, page.split, (lid,)))
        else:
            for rid, lids in page.records().items():
                words = tuple(w.word() for lid in lids for w in lines[lid])
                image = concat_record([crops[lid] for lid in lids], separator_px)
                samples.append(Sample(pad_columns(image, pad_px), AnnotatedRecord(words, rid), rid, rid, page.split, tuple(lids)))
    return samples


def ground_truth_records(pages: Sequence[PageManifest], splits: Iterable[str] = SPLITS) -> dict[str, AnnotatedRecord]:
    """Record id -> annotated record, in manifest order."""
    wanted = set(splits)
    words: dict[str, list[AnnotatedWord]] = {}
    for page in pages:
        if page.split not in wanted:
            continue
        for w in page.words:
            words.setdefault(w.record_id, []).append(w.word())
    return {rid: AnnotatedRecord(tuple(ws), rid) for rid, ws in words.items()}


def record_line_ids(pages: Sequence[PageManifest]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for page in pages:
        for rid, lids in page.records().items():
            out.setdefault(rid, []).extend(lids)
    return out

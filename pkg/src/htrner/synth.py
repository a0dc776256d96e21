"""Seeded synthetic marriage-record pages.

Text comes from a small grammar that mimics the structure of 17th-century
Catalan marriage licences (husband, his parents, wife, her parents), so the
person a word refers to is recoverable from context just as in the real
registers.  Every character is drawn as a fixed procedural glyph (a few
polyline strokes derived from the character itself) with per-instance
jitter, per-line slant, varying stroke weight and additive noise.

The output of :func:`synth_generate` depends only on ``(seed, config)``.
Pages are rendered with their own generator seeded by ``(seed, page_index)``
so they can be drawn in any order or in parallel.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from htrner.data import PageManifest, WordBox, image_to_png_array, png_array_to_image, save_image, save_manifest
from htrner.tags import AnnotatedRecord, AnnotatedWord, PersonRole as P, SemanticCategory as C

MALE_NAMES = (
    "Joan Pere Jaume Antoni Francesc Miquel Bernat Gabriel Jeroni Salvador Pau Onofre Benet Rafel "
    "Damia Esteve Marti Llorens Bartomeu Joseph Agusti Domingo Gaspar Sebastia Tomas Vicens Baltasar "
    "Cosme Honorat Magi Narcis Isidro"
).split()
FEMALE_NAMES = (
    "Elisabeth Juana Maria Anna Eulalia Margarida Catherina Francesca Paula Angela Isabel Magdalena "
    "Marianna Theresa Violant Hieronyma Esperansa Agnes Monserrada Cecilia Susanna Clara Luysa Antiga "
    "Rafaela Gracia Ursula Lucrecia"
).split()
SURNAMES = (
    "Pla Vidal Soler Roca Ferrer Puig Serra Font Riera Costa Mas Bosch Vila Sala Camps Pujol Prats "
    "Oliver Coll Valls Torrent Rovira Casals Badia Comas Vives Closas Bertran Janer Esteva Figueras "
    "Molins Parera Gali Torras Arnau Mateu Batlle Bonet Sunyer Ribas Pons Fabra Gelabert Monfort "
    "Canals Bruguera Mir Massana Sagarra"
).split()
OCCUPATIONS = (
    "pages teixidor sastre fuster ferrer mariner sabater boter paraire moliner corder flequer "
    "mercader traginer hortola pescador calceter blanquer argenter botiguer"
).split()
LOCATIONS = (
    "Bara Barcelona Sabadell Terrassa Mataro Badalona Granollers Manresa Vic Sitges Sarria Horta "
    "Sants Montcada Tiana Alella Premia Vilassar Arenys Caldes Moia Olesa Martorell Igualada Cardona "
    "Girona Tarragona Lleida"
).split()
FUNCTION_WORDS = "dit dia rebere de fill filla y ab habitant en".split()

DEFAULT_VOCABULARIES = {
    "male_name": MALE_NAMES,
    "female_name": FEMALE_NAMES,
    "surname": SURNAMES,
    "occupation": OCCUPATIONS,
    "location": LOCATIONS,
}

_SYLLABLES = "ca bo ri tal ven mor sa lu gue ra pi nes qu ell dor fa xa mont jo ber si".split()


@dataclass
class SynthConfig:
    n_records: int = 500
    records_per_page: int = 4
    grammar: str = "marriage"  # or "plain": unlabelled word salad for HTR pretraining
    oov_rate: float = 0.0557
    split_fractions: tuple[float, float, float] = (0.72, 0.08, 0.20)
    vocabularies: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_VOCABULARIES.items()})
    page_width: int = 480
    margin: int = 10
    x_height: int = 12
    ascender: int = 8
    descender: int = 7
    char_spacing: int = 2
    word_gap: int = 11
    line_gap: int = 6
    noise: float = 0.05
    slant: float = 0.15
    jitter: float = 0.5
    stroke_widths: tuple[int, ...] = (2,)

    def validate(self) -> None:
        if self.n_records < 1:
            raise ValueError("n_records must be positive")
        if self.records_per_page < 1:
            raise ValueError("records_per_page must be positive")
        if self.grammar not in ("marriage", "plain"):
            raise ValueError(f"unknown grammar {self.grammar!r}")
        if not 0.0 <= self.oov_rate < 1.0:
            raise ValueError("oov_rate must lie in [0, 1)")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three numbers summing to 1")
        for key in DEFAULT_VOCABULARIES:
            words = self.vocabularies.get(key)
            if not words:
                raise ValueError(f"vocabulary {key!r} is empty")
            for w in words:
                if not w or any(ch.isspace() for ch in w):
                    raise ValueError(f"bad vocabulary entry {w!r} in {key!r}")
        if self.noise < 0 or self.jitter < 0 or self.slant < 0:
            raise ValueError("noise, jitter and slant must be non-negative")
        if not self.stroke_widths or min(self.stroke_widths) < 1:
            raise ValueError("stroke widths must be positive integers")

    def to_json(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["stroke_widths"] = list(self.stroke_widths)
        return d


@dataclass
class SynthDataset:
    pages: list[PageManifest]
    images: list[np.ndarray]
    records: dict[str, AnnotatedRecord]
    config: SynthConfig
    seed: int

    def write(self, out_dir: str | Path) -> Path:
        """PNG pages plus ``manifest.json``; returns the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for page, img in zip(self.pages, self.images):
            save_image(img, out / page.image)
        path = out / "manifest.json"
        save_manifest(self.pages, path)
        return path

    def oov_fraction(self, split: str = "test") -> float:
        """Share of ``split`` words whose transcript never occurs in training pages."""
        train = {w.transcript for p in self.pages if p.split == "train" for w in p.words}
        words = [w.transcript for p in self.pages if p.split == split for w in p.words]
        if not words:
            return 0.0
        return sum(w not in train for w in words) / len(words)


# Text ------------------------------------------------------------------------


class _Grammar:
    def __init__(self, rng: np.random.Generator, vocab: dict[str, list[str]]):
        self.rng = rng
        self.vocab = vocab

    def pick(self, key: str) -> str:
        words = self.vocab[key]
        return words[int(self.rng.integers(len(words)))]

    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def marriage(self) -> list[AnnotatedWord]:
        out: list[AnnotatedWord] = []

        def other(*ws):
            out.extend(AnnotatedWord(w) for w in ws)

        def ent(word, cat, person):
            out.append(AnnotatedWord(word, cat, person))

        def person(role, male, full=True, job=True, place=0.0):
            ent(self.pick("male_name" if male else "female_name"), C.NAME, role)
            if male and self.chance(0.15):
                ent(self.pick("male_name"), C.NAME, role)
            if full or self.chance(0.3):
                ent(self.pick("surname"), C.SURNAME, role)
            if job and male and self.chance(0.75):
                ent(self.pick("occupation"), C.OCCUPATION, role)
            if self.chance(place):
                if self.chance(0.5):
                    other("habitant", "en")
                else:
                    other("de")
                ent(self.pick("location"), C.LOCATION, role)

        opening = (("dit", "dia", "rebere", "de"), ("rebere", "de"), ("dia", "rebere", "de"))
        other(*opening[int(self.rng.integers(len(opening)))])
        person(P.HUSBAND, True, place=0.85)
        if self.chance(0.25):
            ent("viudo", C.CIVIL_STATE, P.HUSBAND)
            if self.chance(0.5):
                other("de")
                person(P.OTHER_PERSON, False, full=False, job=False)
        other("fill", "de")
        person(P.HUSBANDS_FATHER, True, place=0.2)
        if self.chance(0.3):
            ent("difunt", C.CIVIL_STATE, P.HUSBANDS_FATHER)
        other("y", "de")
        person(P.HUSBANDS_MOTHER, False, full=False)
        other("ab")
        person(P.WIFE, False, full=False)
        widow = self.chance(0.3)
        ent("viuda" if widow else "donsella", C.CIVIL_STATE, P.WIFE)
        if widow and self.chance(0.5):
            other("de")
            person(P.OTHER_PERSON, True, job=False)
        other("filla", "de")
        person(P.WIFES_FATHER, True, place=0.6)
        if self.chance(0.3):
            ent("difunt", C.CIVIL_STATE, P.WIFES_FATHER)
        other("y", "de")
        person(P.WIFES_MOTHER, False, full=False)
        return out

    def plain(self) -> list[AnnotatedWord]:
        keys = list(self.vocab) + ["function"] * 2
        words = []
        for _ in range(int(self.rng.integers(18, 30))):
            key = keys[int(self.rng.integers(len(keys)))]
            words.append(AnnotatedWord(self.pick(key) if key != "function" else FUNCTION_WORDS[int(self.rng.integers(len(FUNCTION_WORDS)))]))
        return words


def held_out_words(seed: int, exclude: set[str], alphabet: set[str], n: int = 200) -> list[str]:
    """Pseudo-names never produced by the grammar, spelled with ``alphabet`` only."""
    rng = np.random.default_rng([seed, 7919])
    capitals = sorted(ch for ch in alphabet if ch.isupper())
    sylls = [s for s in _SYLLABLES if set(s) <= alphabet]
    out: list[str] = []
    seen = set(exclude)
    while len(out) < n:
        k = int(rng.integers(2, 4))
        body = "".join(sylls[int(rng.integers(len(sylls)))] for _ in range(k))
        word = capitals[int(rng.integers(len(capitals)))] + body[1:]
        if word not in seen and len(word) >= 3:
            seen.add(word)
            out.append(word)
    return out


# Glyphs and rendering ----------------------------------------------------------

_ASCENDING = set("bdfhklt")
_DESCENDING = set("gjpqy")


@dataclass(frozen=True)
class Glyph:
    width: float
    strokes: tuple[tuple[tuple[float, float], ...], ...]  # (x, y) with y measured up from the baseline


def glyph_for(ch: str, x_height: int, ascender: int, descender: int) -> Glyph:
    """Fixed stroke pattern of a character; independent of any dataset seed."""
    rng = np.random.default_rng(zlib.crc32(ch.encode("utf-8")))
    if ch.isupper() or ch.isdigit():
        lo, hi = 0.0, float(x_height + ascender)
        width = x_height * rng.uniform(0.75, 1.05)
    elif ch in _ASCENDING:
        lo, hi = 0.0, float(x_height + ascender)
        width = x_height * rng.uniform(0.55, 0.8)
    elif ch in _DESCENDING:
        lo, hi = -float(descender), float(x_height)
        width = x_height * rng.uniform(0.55, 0.8)
    else:
        lo, hi = 0.0, float(x_height)
        width = x_height * rng.uniform(0.55, 0.85)
    width = max(width, 7.0)
    strokes = []
    # a spine through the full vertical extent, then free strokes
    sx = rng.uniform(0.1, 0.9) * width
    strokes.append(((sx + rng.uniform(-2, 2), hi), (sx + rng.uniform(-2, 2), (lo + hi) / 2), (sx + rng.uniform(-2, 2), lo)))
    for _ in range(int(rng.integers(1, 3))):
        pts = tuple((rng.uniform(0, width), rng.uniform(lo, min(hi, float(x_height)) if lo == 0 else hi)) for _ in range(3))
        strokes.append(pts)
    return Glyph(float(width), tuple(strokes))


@dataclass
class _Placed:
    word: AnnotatedWord
    record_id: str
    line_id: str
    x: float
    baseline: float
    width: float


def _word_width(word: str, glyphs: dict[str, Glyph], spacing: int) -> float:
    return sum(glyphs[ch].width for ch in word) + spacing * (len(word) - 1)


def layout_page(records: Sequence[AnnotatedRecord], cfg: SynthConfig, glyphs: dict[str, Glyph]) -> tuple[list[_Placed], int]:
    """Greedy line filling; each record starts on a fresh line."""
    placed = []
    pitch = cfg.ascender + cfg.x_height + cfg.descender + cfg.line_gap
    baseline = cfg.margin + cfg.ascender + cfg.x_height
    right = cfg.page_width - cfg.margin
    for rec in records:
        x = float(cfg.margin)
        line = 0
        for word in rec.words:
            w = _word_width(word.transcript, glyphs, cfg.char_spacing)
            if x > cfg.margin and x + w > right:
                line += 1
                baseline += pitch
                x = float(cfg.margin)
            placed.append(_Placed(word, rec.record_id, f"{rec.record_id}_l{line}", x, baseline, w))
            x += w + cfg.word_gap
        baseline += pitch + cfg.line_gap
    height = int(baseline - pitch - cfg.line_gap + cfg.descender + cfg.margin + 2)
    return placed, height


def render_page(
    records: Sequence[AnnotatedRecord],
    cfg: SynthConfig,
    rng: np.random.Generator,
    image_name: str,
    split: str,
) -> tuple[PageManifest, np.ndarray]:
    alphabet = {ch for rec in records for w in rec.words for ch in w.transcript}
    glyphs = {ch: glyph_for(ch, cfg.x_height, cfg.ascender, cfg.descender) for ch in sorted(alphabet)}
    placed, height = layout_page(records, cfg, glyphs)
    W = cfg.page_width
    canvas = Image.new("L", (W, height), 0)
    draw = ImageDraw.Draw(canvas)
    boxes = []
    slants: dict[str, float] = {}
    for pw in placed:
        slant = slants.setdefault(pw.line_id, float(rng.uniform(-cfg.slant, cfg.slant)))
        stroke = int(cfg.stroke_widths[int(rng.integers(len(cfg.stroke_widths)))])
        ink = int(rng.integers(200, 256))
        base = pw.baseline + float(rng.normal(0.0, 0.6))
        x = pw.x
        xs, ys = [], []
        for ch in pw.word.transcript:
            g = glyphs[ch]
            for s in g.strokes:
                pts = []
                for gx, gy in s:
                    jx, jy = rng.normal(0.0, cfg.jitter, 2) if cfg.jitter > 0 else (0.0, 0.0)
                    py = base - gy + jy
                    px = x + gx + jx + slant * (base - py)
                    pts.append((px, py))
                    xs.append(px)
                    ys.append(py)
                draw.line(pts, fill=ink, width=stroke, joint="curve")
            x += g.width + cfg.char_spacing
        half = stroke / 2.0 + 0.5
        x0 = max(0, int(math.floor(min(xs) - half)))
        x1 = min(W, int(math.ceil(max(xs) + half)))
        y0 = max(0, int(math.floor(min(ys) - half)))
        y1 = min(height, int(math.ceil(max(ys) + half)))
        boxes.append(WordBox(x0, y0, x1 - x0, y1 - y0, pw.word.transcript, pw.word.category, pw.word.person, pw.line_id, pw.record_id))
    img = np.asarray(canvas, dtype=np.float64) / 255.0
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = png_array_to_image(image_to_png_array(img))  # what an 8-bit PNG round trip gives back
    return PageManifest(image_name, split, boxes), img


def _render_job(args):
    records, cfg, seed, index, name, split = args
    return render_page(records, cfg, np.random.default_rng([seed, index]), name, split)


def _split_counts(n_pages: int, fractions: Sequence[float]) -> list[int]:
    train = int(round(n_pages * fractions[0]))
    valid = int(round(n_pages * fractions[1]))
    if n_pages >= 3:
        train = min(max(train, 1), n_pages - 2)
        valid = min(max(valid, 1), n_pages - train - 1)
    return [train, valid, n_pages - train - valid]


def synth_generate(seed: int, config: SynthConfig | None = None, workers: int | None = None) -> SynthDataset:
    """Generate a synthetic corpus of annotated marriage-record pages.

    Splits are assigned per page in proportion to ``config.split_fractions``.
    Test-split name and surname slots are then swapped for held-out words
    until the share of test words unseen in training reaches
    ``config.oov_rate``.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    grammar = _Grammar(rng, cfg.vocabularies)
    texts = [grammar.marriage() if cfg.grammar == "marriage" else grammar.plain() for _ in range(cfg.n_records)]

    n_pages = -(-cfg.n_records // cfg.records_per_page)
    counts = _split_counts(n_pages, cfg.split_fractions)
    order = rng.permutation(n_pages)
    split_of = {}
    for name, lo, hi in (("train", 0, counts[0]), ("valid", counts[0], counts[0] + counts[1]), ("test", counts[0] + counts[1], n_pages)):
        for p in order[lo:hi]:
            split_of[int(p)] = name
    rec_split = [split_of[i // cfg.records_per_page] for i in range(cfg.n_records)]

    if cfg.oov_rate > 0:
        _inject_oov(texts, rec_split, cfg, seed, rng)

    records = [AnnotatedRecord(tuple(ws), f"r{i:04d}") for i, ws in enumerate(texts)]
    jobs = []
    for p in range(n_pages):
        chunk = records[p * cfg.records_per_page:(p + 1) * cfg.records_per_page]
        jobs.append((chunk, cfg, seed, p, f"page_{p:04d}.png", split_of[p]))
    workers = workers if workers is not None else int(os.environ.get("HTRNER_NUM_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_render_job, jobs))
    else:
        results = [_render_job(j) for j in jobs]
    pages = [r[0] for r in results]
    images = [r[1] for r in results]
    return SynthDataset(pages, images, {r.record_id: r for r in records}, cfg, seed)


def _inject_oov(texts, rec_split, cfg: SynthConfig, seed: int, rng: np.random.Generator) -> None:
    train_vocab = {w.transcript for ws, s in zip(texts, rec_split) if s == "train" for w in ws}
    test_words = [(i, j) for i, (ws, s) in enumerate(zip(texts, rec_split)) if s == "test" for j in range(len(ws))]
    if not test_words:
        return
    natural = sum(texts[i][j].transcript not in train_vocab for i, j in test_words)
    needed = int(round(cfg.oov_rate * len(test_words))) - natural
    eligible = [(i, j) for i, j in test_words
                if texts[i][j].category in (C.NAME, C.SURNAME) and texts[i][j].transcript in train_vocab]
    if needed <= 0 or not eligible:
        return
    alphabet = {ch for w in train_vocab for ch in w}
    every_word = {w for ws in texts for w in (x.transcript for x in ws)} | {w for v in cfg.vocabularies.values() for w in v}
    pool = held_out_words(seed, every_word, alphabet)
    picks = rng.choice(len(eligible), size=min(needed, len(eligible)), replace=False)
    for k in sorted(int(p) for p in picks):
        i, j = eligible[k]
        old = texts[i][j]
        texts[i][j] = AnnotatedWord(pool[int(rng.integers(len(pool)))], old.category, old.person)

"""Synthetic (screenshot, annotation, markup) triples.

Pages are written in a tiny row/cell DSL::

    PAGE <bg> ( ROW ( <kind> <color> <span> )+ ENDROW )* END

Each row is split into ``ROW_UNITS`` horizontal units and the spans of its
cells must add up to exactly that width.  ``render`` paints a program
deterministically; ``parse_lenient`` recovers the longest valid prefix of an
arbitrary token stream so that model outputs can always be rendered.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compressor import ElementAnnotation
from .encoder import PageImage

ROW_UNITS = 4
KINDS = ("text", "button", "icon", "input")
COLOR_NAMES = ("white", "black", "red", "green", "blue", "yellow", "gray", "orange")
PALETTE = np.array(
    [
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.5, 0.5, 0.5],
        [1.0, 0.5, 0.0],
    ]
)
BORDER = np.array([0.25, 0.25, 0.25])
PAGE_TYPES = ("text-heavy", "layout-rich", "image-heavy", "complex")

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
PROMPT_WORDS = ("<convert>", "<screenshot>", "<to-markup>")
VOCAB = (
    [PAD, BOS, EOS, *PROMPT_WORDS, "PAGE", "END", "ROW", "ENDROW"]
    + [k.upper() for k in KINDS]
    + [f"C:{c}" for c in COLOR_NAMES]
    + [f"S{s}" for s in range(1, ROW_UNITS + 1)]
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID, BOS_ID, EOS_ID = TOKEN_ID[PAD], TOKEN_ID[BOS], TOKEN_ID[EOS]
PAGE_ID, END_ID, ROW_ID, ENDROW_ID = (TOKEN_ID[t] for t in ("PAGE", "END", "ROW", "ENDROW"))
KIND_IDS = {TOKEN_ID[k.upper()]: k for k in KINDS}
COLOR_IDS = {TOKEN_ID[f"C:{c}"]: i for i, c in enumerate(COLOR_NAMES)}
SPAN_IDS = {TOKEN_ID[f"S{s}"]: s for s in range(1, ROW_UNITS + 1)}
PROMPT_IDS = [BOS_ID] + [TOKEN_ID[w] for w in PROMPT_WORDS]


@dataclass(frozen=True)
class Cell:
    kind: str
    color: int
    span: int


@dataclass
class MarkupProgram:
    bg: int = 0
    rows: list = field(default_factory=list)

    def validate(self) -> None:
        if not 0 <= self.bg < len(PALETTE):
            raise ValueError(f"background colour {self.bg} outside palette")
        for row in self.rows:
            if not row:
                raise ValueError("empty row")
            if sum(c.span for c in row) != ROW_UNITS:
                raise ValueError(f"row spans {[c.span for c in row]} do not sum to {ROW_UNITS}")
            for c in row:
                if c.kind not in KINDS or not 0 <= c.color < len(PALETTE) or not 1 <= c.span <= ROW_UNITS:
                    raise ValueError(f"invalid cell {c}")


def linearize(p: MarkupProgram) -> list[int]:
    ids = [PAGE_ID, TOKEN_ID[f"C:{COLOR_NAMES[p.bg]}"]]
    for row in p.rows:
        ids.append(ROW_ID)
        for c in row:
            ids += [TOKEN_ID[c.kind.upper()], TOKEN_ID[f"C:{COLOR_NAMES[c.color]}"], TOKEN_ID[f"S{c.span}"]]
        ids.append(ENDROW_ID)
    ids.append(END_ID)
    return ids


def parse_lenient(tokens) -> tuple[MarkupProgram, bool]:
    """Longest valid prefix parse; ``valid`` is False if any token was dropped."""
    toks = [int(t) for t in tokens]
    n = len(toks)
    prog = MarkupProgram()
    if n < 2 or toks[0] != PAGE_ID or toks[1] not in COLOR_IDS:
        return prog, False
    prog.bg = COLOR_IDS[toks[1]]
    i = 2
    while i < n:
        t = toks[i]
        if t == END_ID:
            return prog, i == n - 1
        if t != ROW_ID:
            return prog, False
        i += 1
        row, used = [], 0
        while i < n and toks[i] in KIND_IDS:
            if i + 2 >= n or toks[i + 1] not in COLOR_IDS or toks[i + 2] not in SPAN_IDS:
                return prog, False
            span = SPAN_IDS[toks[i + 2]]
            if used + span > ROW_UNITS:
                return prog, False
            row.append(Cell(KIND_IDS[toks[i]], COLOR_IDS[toks[i + 1]], span))
            used += span
            i += 3
        if i >= n or toks[i] != ENDROW_ID or used != ROW_UNITS:
            return prog, False
        prog.rows.append(row)
        i += 1
    return prog, False


def layout(p: MarkupProgram, height: int, width: int) -> list[tuple[tuple[int, int, int, int], Cell]]:
    """Pixel rectangle (x0, y0, x1, y1) of every cell, row-major."""
    out = []
    n = len(p.rows)
    for r, row in enumerate(p.rows):
        y0, y1 = r * height // n, (r + 1) * height // n
        u = 0
        for c in row:
            x0, x1 = u * width // ROW_UNITS, (u + c.span) * width // ROW_UNITS
            out.append(((x0, y0, x1, y1), c))
            u += c.span
    return out


def _paint_cell(img: np.ndarray, rect, cell: Cell) -> None:
    x0, y0, x1, y1 = rect
    color = PALETTE[cell.color]
    if cell.kind == "text":
        img[y0:y1:2, x0:x1] = color
    elif cell.kind == "button":
        img[y0:y1, x0:x1] = BORDER
        if y1 - y0 > 2 and x1 - x0 > 2:
            img[y0 + 1 : y1 - 1, x0 + 1 : x1 - 1] = color
    elif cell.kind == "icon":
        s = max(1, min(x1 - x0, y1 - y0) // 2)
        ix = x0 + (x1 - x0 - s) // 2
        iy = y0 + (y1 - y0 - s) // 2
        img[iy : iy + s, ix : ix + s] = color
    else:  # input: hollow outline
        img[y0, x0:x1] = color
        img[y1 - 1, x0:x1] = color
        img[y0:y1, x0] = color
        img[y0:y1, x1 - 1] = color


def render(p: MarkupProgram, dims: tuple[int, int]) -> PageImage:
    height, width = dims
    img = np.empty((height, width, 3))
    img[:] = PALETTE[p.bg]
    for rect, cell in layout(p, height, width):
        _paint_cell(img, rect, cell)
    return PageImage(img)


def similarity(a: PageImage, b: PageImage) -> float:
    """1 - mean absolute pixel difference."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image dims differ: {a.pixels.shape} vs {b.pixels.shape}")
    return float(1.0 - np.abs(a.pixels - b.pixels).mean())


# --------------------------------------------------------------------------
# generation


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    min_rows: int = 1
    max_rows: int = 6
    max_cells: int = ROW_UNITS
    patch_size: int = 4

    def validate(self) -> None:
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(f"page {self.height}x{self.width} not divisible by patch size {self.patch_size}")
        if self.max_rows > self.height or ROW_UNITS > self.width:
            raise ValueError("configuration makes cells smaller than 1 px")
        if not 0 <= self.min_rows <= self.max_rows:
            raise ValueError("invalid row range")
        if not 1 <= self.max_cells <= ROW_UNITS:
            raise ValueError(f"max_cells must be in [1, {ROW_UNITS}]")


# per page type: kind probabilities (text, button, icon, input), row range, cells-per-row range
_PAGE_STYLE = {
    "text-heavy": ((0.7, 0.1, 0.1, 0.1), (2, 6), (1, 3)),
    "layout-rich": ((0.25, 0.25, 0.25, 0.25), (4, 6), (2, 4)),
    "image-heavy": ((0.15, 0.15, 0.55, 0.15), (1, 4), (1, 4)),
    "complex": ((0.25, 0.25, 0.25, 0.25), (1, 6), (1, 4)),
}


@dataclass
class SyntheticSample:
    image: PageImage
    annotation: ElementAnnotation
    markup: MarkupProgram
    page_type: str

    @property
    def ids(self) -> list[int]:
        return linearize(self.markup)


def annotate(p: MarkupProgram, dims: tuple[int, int]) -> ElementAnnotation:
    rects = layout(p, *dims)
    return ElementAnnotation([r for r, _ in rects], [c.kind for _, c in rects])


def _spans(rng: np.random.Generator, n_cells: int) -> list[int]:
    cuts = sorted(rng.choice(np.arange(1, ROW_UNITS), size=n_cells - 1, replace=False).tolist())
    edges = [0, *cuts, ROW_UNITS]
    return [b - a for a, b in zip(edges, edges[1:])]


def gen_sample(seed: int, cfg: GenConfig | None = None) -> SyntheticSample:
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    page_type = PAGE_TYPES[int(rng.integers(len(PAGE_TYPES)))]
    probs, (r_lo, r_hi), (c_lo, c_hi) = _PAGE_STYLE[page_type]
    r_lo, r_hi = max(r_lo, cfg.min_rows), min(r_hi, cfg.max_rows)
    if r_lo > r_hi:
        r_lo = r_hi = min(max(cfg.min_rows, 0), cfg.max_rows)
    c_hi = min(c_hi, cfg.max_cells)
    c_lo = min(c_lo, c_hi)
    bg = int(rng.integers(len(PALETTE)))
    rows = []
    for _ in range(int(rng.integers(r_lo, r_hi + 1))):
        n_cells = int(rng.integers(c_lo, c_hi + 1))
        row = []
        for span in _spans(rng, n_cells):
            kind = KINDS[int(rng.choice(len(KINDS), p=probs))]
            color = int(rng.integers(len(PALETTE) - 1))
            color += color >= bg
            row.append(Cell(kind, color, span))
        rows.append(row)
    prog = MarkupProgram(bg, rows)
    dims = (cfg.height, cfg.width)
    return SyntheticSample(render(prog, dims), annotate(prog, dims), prog, page_type)


def gen_dataset(seed: int, count: int, cfg: GenConfig | None = None) -> list[SyntheticSample]:
    """Sample i uses seed ``seed * 1_000_003 + i`` so datasets with different seeds do not overlap."""
    return [gen_sample(seed * 1_000_003 + i, cfg) for i in range(count)]


# --------------------------------------------------------------------------
# dataset files

_DS_MAGIC = b"UIPD"
_DS_VERSION = 1


def write_dataset(path, samples: list[SyntheticSample]) -> Path:
    """Binary dataset plus a ``.vocab.txt`` sidecar (one token per line, id = line number)."""
    path = Path(path)
    if not samples:
        raise ValueError("no samples to write")
    H, W = samples[0].image.pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(_DS_MAGIC)
        f.write(struct.pack("<IIIII", _DS_VERSION, len(samples), H, W, len(VOCAB)))
        for s in samples:
            if s.image.pixels.shape[:2] != (H, W):
                raise ValueError("all samples must share image dims")
            f.write(struct.pack("<B", PAGE_TYPES.index(s.page_type)))
            f.write(np.ascontiguousarray(s.image.pixels, dtype="<f4").tobytes())
            ann = s.annotation
            f.write(struct.pack("<H", len(ann.boxes)))
            for box in ann.boxes:
                f.write(struct.pack("<4H", *box))
            f.write(bytes(["text button icon input background".split().index(c) for c in ann.categories]))
            ids = linearize(s.markup)
            f.write(struct.pack("<H", len(ids)))
            f.write(np.asarray(ids, dtype="<u2").tobytes())
    vocab_path = path.with_name(path.name + ".vocab.txt")
    vocab_path.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    return vocab_path


def read_dataset(path) -> list[SyntheticSample]:
    buf = Path(path).read_bytes()
    if buf[:4] != _DS_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, count, H, W, vocab_size = struct.unpack_from("<IIIII", buf, 4)
    if version != _DS_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    if vocab_size != len(VOCAB):
        raise ValueError(f"{path}: vocabulary size {vocab_size} != {len(VOCAB)}")
    cats = "text button icon input background".split()
    off = 24
    out = []
    npix = H * W * 3
    for _ in range(count):
        (ptype,) = struct.unpack_from("<B", buf, off)
        off += 1
        pixels = np.frombuffer(buf, dtype="<f4", count=npix, offset=off).reshape(H, W, 3).astype(np.float64)
        off += 4 * npix
        (nbox,) = struct.unpack_from("<H", buf, off)
        off += 2
        boxes = [struct.unpack_from("<4H", buf, off + 8 * k) for k in range(nbox)]
        off += 8 * nbox
        categories = [cats[b] for b in buf[off : off + nbox]]
        off += nbox
        (nids,) = struct.unpack_from("<H", buf, off)
        off += 2
        ids = np.frombuffer(buf, dtype="<u2", count=nids, offset=off).tolist()
        off += 2 * nids
        prog, valid = parse_lenient(ids)
        if not valid:
            raise ValueError(f"{path}: stored markup does not parse")
        out.append(SyntheticSample(PageImage(pixels), ElementAnnotation([tuple(b) for b in boxes], categories), prog, PAGE_TYPES[ptype]))
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes")
    return out

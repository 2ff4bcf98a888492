"""Dual-view samples: a synthetic cross-view benchmark and a PNG directory loader.

Synthetic benchmark
-------------------
Every class ``c`` owns two glyphs, ``A_c`` (only ever drawn in the OL view) and
``B_c`` (only ever drawn in the SD view).  Under the default ``"presence"`` rule
class ``c`` is positive iff ``A_c`` appears in OL and ``B_c`` appears in SD, so a
single view never decides a label.  Negatives may carry a lone glyph in one view.

The ``"object"`` rule is stricter.  A physical object of class ``c`` shows up as
``A_c`` in OL and ``B_c`` in SD at the same location, up to a small jitter that
stands in for the angular deviation between the two projections, and only such a
co-located pair makes the class positive.  Decoys add misaligned pairs (both
glyphs present, at least two glyph widths apart), so glyph presence alone is not
enough and a model has to relate the two views spatially.

Generic distractor glyphs and clutter strokes are laid on top with additive
transparency, the way X-ray attenuation superimposes.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)

GLYPH_PATTERN_SEED = 0x5EED
JITTER = 2
GRID = 4
ALIGNMENTS = ("object", "presence")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Style:
    """Knobs of the synthetic renderer (ranges are inclusive)."""

    strokes: Tuple[int, int] = (1, 3)
    stroke_alpha: Tuple[float, float] = (0.15, 0.35)
    distractors: Tuple[int, int] = (0, 2)
    glyph_alpha: Tuple[float, float] = (0.5, 0.9)
    noise: float = 0.03
    p_misaligned: float = 0.5  # negative class drawn as a misaligned A/B pair ("object" only)
    p_lone: float = 0.2  # negative class drawn as a single glyph in one view


DEFAULT_STYLE = Style()
CLEAN_STYLE = Style(strokes=(0, 0), distractors=(0, 0), noise=0.0)  # glyphs and decoys only


@dataclass(frozen=True)
class Placement:
    glyph: str  # "A3", "B3", or "D<k>" for a generic distractor
    view: str  # "ol" | "sd"
    row: int
    col: int


@dataclass
class SamplePair:
    id: str
    ol_image: Tensor  # (1, 1, H, W) in [0, 1]
    sd_image: Tensor
    labels: np.ndarray  # (C,) of 0/1
    placements: Tuple[Placement, ...] = field(default=(), compare=False)


# -- glyphs -----------------------------------------------------------------

def glyph_size(h: int, w: int) -> int:
    return max(8, (min(h, w) // 20) * GRID)  # a multiple of the coarse grid; 12 px at 64x64


def _connected(cells: np.ndarray) -> bool:
    on = set(zip(*np.nonzero(cells)))
    first = next(iter(on))
    seen, stack_ = {first}, [first]
    while stack_:
        r, c = stack_.pop()
        for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if nb in on and nb not in seen:
                seen.add(nb)
                stack_.append(nb)
    return len(seen) == len(on)


def glyph_bank(n_classes: int, size: int, n_distractors: int = 4) -> Dict[str, np.ndarray]:
    """Fixed binary glyphs ``A<c>``, ``B<c>`` and ``D<k>`` (independent of the dataset seed).

    Each glyph is a connected shape of 6-10 cells on a 4×4 coarse grid, upsampled
    to ``size`` pixels.  Coarse patterns differ pairwise in at least 5 cells, so the
    glyphs are told apart by their layout rather than by pixel texture.
    """
    if size % GRID:
        raise DatasetError(f"glyph size {size} must be a multiple of {GRID}")
    rng = np.random.default_rng(GLYPH_PATTERN_SEED)
    names = [f"{p}{c}" for c in range(n_classes) for p in "AB"] + [f"D{k}" for k in range(n_distractors)]
    coarse: List[np.ndarray] = []
    for _ in range(200_000):
        if len(coarse) == len(names):
            break
        cells = rng.random((GRID, GRID)) < 0.5
        if not 6 <= cells.sum() <= 10 or not _connected(cells):
            continue
        if all(np.sum(cells != other) >= 5 for other in coarse):
            coarse.append(cells)
    else:
        raise DatasetError("could not draw enough distinct glyphs")
    k = size // GRID
    return {name: np.kron(cells, np.ones((k, k))) for name, cells in zip(names, coarse)}


def _stroke(canvas: np.ndarray, rng: np.random.Generator, alpha: float) -> None:
    h, w = canvas.shape
    r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
    angle = rng.uniform(0, math.pi)
    length = rng.uniform(0.3, 0.9) * max(h, w)
    t = np.linspace(-0.5, 0.5, int(2 * length))
    rr = np.clip(np.round(r0 + t * length * math.sin(angle)).astype(int), 0, h - 1)
    cc = np.clip(np.round(c0 + t * length * math.cos(angle)).astype(int), 0, w - 1)
    mask = np.zeros_like(canvas)
    mask[rr, cc] = 1.0
    canvas += alpha * mask


def _far_position(rng, anchor: Tuple[int, int], hi_r: int, hi_c: int, min_dist: int) -> Tuple[int, int]:
    for _ in range(1000):
        r, c = int(rng.integers(0, hi_r + 1)), int(rng.integers(0, hi_c + 1))
        if max(abs(r - anchor[0]), abs(c - anchor[1])) >= min_dist:
            return r, c
    raise DatasetError("image too small to place a misaligned decoy")


def _render_sample(idx: int, n_classes: int, h: int, w: int, seed: int, bank, alignment: str,
                   style: Style = DEFAULT_STYLE):
    rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
    g = next(iter(bank.values())).shape[0]
    hi_r, hi_c = h - g, w - g
    placements: List[Placement] = []

    def jittered(r, c):
        dr, dc = rng.integers(-JITTER, JITTER + 1, size=2)
        return int(np.clip(r + dr, 0, hi_r)), int(np.clip(c + dc, 0, hi_c))

    k = int(rng.integers(1, min(3, n_classes) + 1))
    positives = sorted(rng.choice(n_classes, size=k, replace=False).tolist())
    labels = np.zeros(n_classes, dtype=np.int64)
    labels[positives] = 1
    for c in range(n_classes):
        r, col = int(rng.integers(0, hi_r + 1)), int(rng.integers(0, hi_c + 1))
        if labels[c]:
            if alignment == "object":
                r2, c2 = jittered(r, col)
            else:
                r2, c2 = int(rng.integers(0, hi_r + 1)), int(rng.integers(0, hi_c + 1))
            placements += [Placement(f"A{c}", "ol", r, col), Placement(f"B{c}", "sd", r2, c2)]
            continue
        u = rng.random()
        p_mis = style.p_misaligned if alignment == "object" else 0.0
        if u < p_mis:
            r2, c2 = _far_position(rng, (r, col), hi_r, hi_c, 2 * g)
            placements += [Placement(f"A{c}", "ol", r, col), Placement(f"B{c}", "sd", r2, c2)]
        elif u < p_mis + style.p_lone:
            placements.append(Placement(f"A{c}", "ol", r, col) if rng.random() < 0.5
                              else Placement(f"B{c}", "sd", r, col))
    n_dist = sum(1 for k in bank if k.startswith("D"))
    for view in ("ol", "sd"):
        for _ in range(int(rng.integers(style.distractors[0], style.distractors[1] + 1))):
            d = int(rng.integers(0, n_dist))
            placements.append(Placement(f"D{d}", view, int(rng.integers(0, hi_r + 1)),
                                        int(rng.integers(0, hi_c + 1))))

    images = {}
    for view in ("ol", "sd"):
        canvas = np.zeros((h, w))
        for _ in range(int(rng.integers(style.strokes[0], style.strokes[1] + 1))):
            _stroke(canvas, rng, rng.uniform(*style.stroke_alpha))
        for p in placements:
            if p.view == view:
                canvas[p.row:p.row + g, p.col:p.col + g] += rng.uniform(*style.glyph_alpha) * bank[p.glyph]
        canvas += rng.normal(0.0, style.noise, size=(h, w))
        images[view] = np.clip(canvas, 0.0, 1.0)
    return images["ol"], images["sd"], labels, tuple(placements)


def generate_synthetic_pair_dataset(n: int, c_cls: int = 6, size=(64, 64), seed: int = 0,
                                    alignment: str = "presence", start: int = 0,
                                    style: Style = DEFAULT_STYLE) -> List[SamplePair]:
    """``n`` deterministic samples; sample ``i`` depends only on ``(seed, start + i)``."""
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    if not 1 <= c_cls <= 8:
        raise DatasetError(f"c_cls must be in [1, 8], got {c_cls}")
    if min(h, w) < 32:
        raise DatasetError(f"image size must be at least 32, got {h}x{w}")
    if alignment not in ALIGNMENTS:
        raise DatasetError(f"alignment must be one of {ALIGNMENTS}, got {alignment!r}")
    bank = glyph_bank(c_cls, glyph_size(h, w))
    out = []
    for i in range(start, start + n):
        ol, sd, labels, placements = _render_sample(i, c_cls, h, w, seed, bank, alignment, style)
        out.append(SamplePair(f"syn{i:06d}", Tensor(ol[None, None]), Tensor(sd[None, None]),
                              labels, placements))
    return out


def synthetic_splits(n_train: int, n_val: int, n_test: int, c_cls: int = 6, size=(64, 64),
                     seed: int = 0, alignment: str = "presence", style: Style = DEFAULT_STYLE):
    """Disjoint train/val/test sets drawn from one sample stream."""
    kw = dict(c_cls=c_cls, size=size, seed=seed, alignment=alignment, style=style)
    return (generate_synthetic_pair_dataset(n_train, start=0, **kw),
            generate_synthetic_pair_dataset(n_val, start=n_train, **kw),
            generate_synthetic_pair_dataset(n_test, start=n_train + n_val, **kw))


def oracle_scores(samples: Sequence[SamplePair], n_classes: int, alignment: str = "presence") -> np.ndarray:
    """Scores from the recorded glyph placements: 1 where a matching A/B pair exists."""
    out = np.zeros((len(samples), n_classes))
    for i, s in enumerate(samples):
        for c in range(n_classes):
            a = [(p.row, p.col) for p in s.placements if p.glyph == f"A{c}" and p.view == "ol"]
            b = [(p.row, p.col) for p in s.placements if p.glyph == f"B{c}" and p.view == "sd"]
            if alignment == "presence":
                out[i, c] = float(bool(a) and bool(b))
            else:
                out[i, c] = float(any(max(abs(r1 - r2), abs(c1 - c2)) <= JITTER
                                      for r1, c1 in a for r2, c2 in b))
    return out


def stack(samples: Sequence[SamplePair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(OL images (N,1,H,W), SD images, labels (N,C)) as float64 arrays."""
    if not samples:
        raise DatasetError("empty dataset")
    ol = np.concatenate([s.ol_image.data for s in samples], axis=0)
    sd = np.concatenate([s.sd_image.data for s in samples], axis=0)
    y = np.stack([s.labels for s in samples]).astype(np.float64)
    return ol, sd, y


# -- on-disk layout: images/<id>_OL.png, images/<id>_SD.png, labels.csv -----------

def export_png_pair_dataset(samples: Sequence[SamplePair], directory) -> Path:
    from PIL import Image

    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    n_cls = len(samples[0].labels) if samples else 0
    for s in samples:
        for view, t in (("OL", s.ol_image), ("SD", s.sd_image)):
            px = np.round(np.clip(t.data[0, 0], 0, 1) * 255).astype(np.uint8)
            Image.fromarray(px, mode="L").save(root / "images" / f"{s.id}_{view}.png")
    with open(root / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id"] + [f"c{k}" for k in range(n_cls)])
        for s in samples:
            wr.writerow([s.id] + [int(v) for v in s.labels])
    return root


def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / (65535.0 if arr.max() > 255 else 255.0)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_png_pair_dataset(directory, size: Optional[Tuple[int, int]] = None) -> List[SamplePair]:
    """Read a dual-view directory; images are resized bilinearly to ``size`` if given."""
    from .ops import resize_bilinear

    root = Path(directory)
    csv_path = root / "labels.csv"
    if not csv_path.exists():
        if not root.exists() or not any(root.iterdir()):
            log.warning("dataset directory %s is empty", root)
            return []
        raise DatasetError(f"{root}: labels.csv not found")
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        log.warning("%s has no rows", csv_path)
        return []
    header, body = rows[0], rows[1:]
    if not header or header[0] != "id":
        raise DatasetError(f"{csv_path}: header must start with 'id', got {header[:1]}")
    n_cls = len(header) - 1
    out = []
    for line_no, row in enumerate(body, start=2):
        if not row:
            continue
        sid = row[0]
        if len(row) != n_cls + 1:
            raise DatasetError(f"{csv_path}:{line_no}: id {sid!r} has {len(row) - 1} labels, expected {n_cls}")
        try:
            labels = np.array([int(v) for v in row[1:]], dtype=np.int64)
        except ValueError:
            raise DatasetError(f"{csv_path}:{line_no}: id {sid!r} has a non-integer label") from None
        if not np.all((labels == 0) | (labels == 1)):
            raise DatasetError(f"{csv_path}:{line_no}: id {sid!r} has a non-binary label")
        views = []
        for view in ("OL", "SD"):
            p = root / "images" / f"{sid}_{view}.png"
            if not p.exists():
                raise DatasetError(f"id {sid!r}: missing {view} view file {p}")
            img = Tensor(_read_gray(p)[None, None])
            if size is not None and img.shape[2:] != tuple(size):
                img = Tensor(np.clip(resize_bilinear(img, tuple(size)).data, 0.0, 1.0))
            views.append(img)
        out.append(SamplePair(sid, views[0], views[1], labels))
    out.sort(key=lambda s: s.id)
    return out


def split_of(sample_id: str) -> str:
    """'train' / 'val' / 'test' at 7:2:1 from a stable hash of the id."""
    bucket = int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little") % 10
    return "train" if bucket < 7 else ("val" if bucket < 9 else "test")


def hash_split(samples: Sequence[SamplePair]) -> Dict[str, List[SamplePair]]:
    out: Dict[str, List[SamplePair]] = {"train": [], "val": [], "test": []}
    for s in samples:
        out[split_of(s.id)].append(s)
    return out


def write_split_manifest(splits: Dict[str, List[SamplePair]], directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for name, items in splits.items():
        (root / f"{name}_ids.txt").write_text("".join(f"{s.id}\n" for s in items))

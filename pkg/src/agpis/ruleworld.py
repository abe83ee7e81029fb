"""Synthetic product world: rendered image sequences with labeled rule violations.

Each product is a textured glyph on a plain background. Three canonical
views exist (front, zoomed detail, mirrored back); a qualified sequence is
the front view followed by the other two. Violations cover all three rule
categories:

=================  ========  =========================================
rule               category  mutation
=================  ========  =========================================
logo               single    striped high-contrast box in a corner
blur               single    5x5 box filter over one image
duplicate          pair      one image replaced by a shifted copy of another
color              pair      glyph re-rendered with hue moved by >= 0.3
order              multi     the detail crop is shown first
=================  ========  =========================================
"""

from __future__ import annotations

import colorsys
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import vocab

IMAGE_SIZE = 32
SEQ_LEN = 3
POOL_SIZES = (6, 7, 8)
DEFAULT_MIXTURE = (0.71, 0.12, 0.07, 0.10)  # qualified, single, pair, multi
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

LOGO_W, LOGO_H = 10, 6
LOGO_MIN_CONTRAST = 0.2
MIN_HUE_SHIFT = 0.3
MAX_JITTER = 2
_SUPERSAMPLE = 3
_SIZE_RADIUS = {"small": 0.26, "medium": 0.31, "large": 0.36}


class RuleClass(enum.IntEnum):
    QUALIFIED = 0
    LOGO = 1
    BLUR = 2
    DUPLICATE = 3
    COLOR = 4
    ORDER = 5

    @property
    def category(self) -> str:
        return _CATEGORY[self]

    @property
    def token(self) -> str:
        return _RULE_TOKEN[self]


_CATEGORY = {
    RuleClass.QUALIFIED: "qualified",
    RuleClass.LOGO: "single",
    RuleClass.BLUR: "single",
    RuleClass.DUPLICATE: "pair",
    RuleClass.COLOR: "pair",
    RuleClass.ORDER: "multi",
}
_RULE_TOKEN = {
    RuleClass.QUALIFIED: "yes",
    RuleClass.LOGO: "logo",
    RuleClass.BLUR: "blur",
    RuleClass.DUPLICATE: "duplicate",
    RuleClass.COLOR: "color",
    RuleClass.ORDER: "order",
}
NUM_CLASSES = len(RuleClass)
CATEGORIES = ("single", "pair", "multi")


@dataclass(frozen=True)
class ProductSpec:
    shape: str
    hue: float
    size: str
    texture_seed: int
    bg_hue: float = 0.1
    bg_value: float = 0.85

    def __post_init__(self):
        if self.shape not in vocab.SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0.0 <= self.hue < 1.0:
            raise ValueError(f"hue must lie in [0, 1), got {self.hue}")
        if self.size not in _SIZE_RADIUS:
            raise ValueError(f"unknown size {self.size!r}")

    @property
    def radius(self) -> float:
        return _SIZE_RADIUS[self.size] * IMAGE_SIZE

    @property
    def color_word(self) -> str:
        return hue_word(self.hue)

    def title_words(self) -> list[str]:
        return [self.size, self.color_word, self.shape]

    @classmethod
    def random(cls, rng: np.random.Generator) -> "ProductSpec":
        return cls(
            shape=str(rng.choice(vocab.SHAPES)),
            hue=float(rng.uniform(0.0, 1.0)) % 1.0,
            size=str(rng.choice(list(_SIZE_RADIUS))),
            texture_seed=int(rng.integers(0, 2**31 - 1)),
            bg_hue=float(rng.uniform(0.0, 1.0)),
            bg_value=float(rng.uniform(0.6, 0.95)),
        )


def hue_word(hue: float) -> str:
    return vocab.COLORS[int(np.floor((hue % 1.0) * len(vocab.COLORS) + 0.5)) % len(vocab.COLORS)]


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


# -- rendering ---------------------------------------------------------------
def _glyph_inside(shape: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return x * x + y * y < r * r
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) < 0.82 * r
    if shape == "triangle":
        # upward triangle with vertices at angle -90, 30, 150 degrees
        s3 = np.sqrt(3.0)
        return (y < 0.5 * r) & (s3 * x - y < r) & (-s3 * x - y < r)
    theta = np.arctan2(y, x) + np.pi / 2
    bound = r * (0.55 + 0.45 * (0.5 + 0.5 * np.cos(5 * theta)))
    return x * x + y * y < bound * bound


def _render(spec: ProductSpec, *, zoom: float = 1.0, focus=(0.0, 0.0), mirror: bool = False,
            value: float = 0.9, texture_turn: float = 0.0, hue: float | None = None) -> np.ndarray:
    n = IMAGE_SIZE * _SUPERSAMPLE
    c = IMAGE_SIZE / 2.0
    grid = (np.arange(n) + 0.5) / _SUPERSAMPLE
    py, px = np.meshgrid(grid, grid, indexing="ij")
    # image pixel -> product frame (origin at glyph centre)
    x = (px - c) / zoom + focus[0]
    y = (py - c) / zoom + focus[1]
    if mirror:
        x = -x
    r = spec.radius
    tex = np.random.default_rng(spec.texture_seed)
    period = tex.uniform(3.0, 5.0)
    angle = tex.uniform(0.0, np.pi) + texture_turn
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (x * np.cos(angle) + y * np.sin(angle)) / period)

    h = spec.hue if hue is None else hue
    glyph_rgb = np.array(colorsys.hsv_to_rgb(h % 1.0, 0.85, value))
    bg_rgb = np.array(colorsys.hsv_to_rgb(spec.bg_hue, 0.15, spec.bg_value))

    inside = _glyph_inside(spec.shape, x, y, r)
    accent = (x + 0.3 * r) ** 2 + (y + 0.3 * r) ** 2 < (0.18 * r) ** 2
    shade = (0.72 + 0.28 * stripes)[..., None]
    img = np.where(inside[..., None], glyph_rgb * shade, bg_rgb)
    img = np.where((inside & accent)[..., None], np.array([0.08, 0.08, 0.08]), img)
    img = img.reshape(IMAGE_SIZE, _SUPERSAMPLE, IMAGE_SIZE, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def render_views(spec: ProductSpec) -> dict[str, np.ndarray]:
    """Front (whole glyph), detail (zoomed crop) and back (mirrored, darker) views."""
    r = spec.radius
    return {
        "front": _render(spec),
        "detail": _render(spec, zoom=2.2, focus=(-0.35 * r, -0.35 * r)),
        "back": _render(spec, mirror=True, value=0.55, texture_turn=np.pi / 2),
    }


def _render_view(spec: ProductSpec, view: str, hue: float | None = None) -> np.ndarray:
    r = spec.radius
    if view == "front":
        return _render(spec, hue=hue)
    if view == "detail":
        return _render(spec, zoom=2.2, focus=(-0.35 * r, -0.35 * r), hue=hue)
    return _render(spec, mirror=True, value=0.55, texture_turn=np.pi / 2, hue=hue)


def glyph_box(spec: ProductSpec, view: str = "front") -> tuple[int, int, int, int]:
    """Bounding box (x, y, w, h) of non-background pixels for a view."""
    img = _render_view(spec, view)
    bg = np.array(colorsys.hsv_to_rgb(spec.bg_hue, 0.15, spec.bg_value))
    return _box_of(np.abs(img - bg).sum(axis=-1) > 1e-3)


def _box_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return (0, 0, mask.shape[1], mask.shape[0])
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def add_logo(img: np.ndarray, corner: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Composite a striped black/white box into one of the four corners."""
    out = img.copy()
    hgt, wid = img.shape[:2]
    x0 = 1 if corner in (0, 2) else wid - LOGO_W - 1
    y0 = 1 if corner in (0, 1) else hgt - LOGO_H - 1
    cols = np.arange(LOGO_W)
    stripe = np.where((cols // 2) % 2 == 0, 1.0, 0.05)
    out[y0:y0 + LOGO_H, x0:x0 + LOGO_W, :] = stripe[None, :, None]
    box = (x0, y0, LOGO_W, LOGO_H)
    contrast = np.abs(out[y0:y0 + LOGO_H, x0:x0 + LOGO_W] - img[y0:y0 + LOGO_H, x0:x0 + LOGO_W]).mean()
    assert contrast >= LOGO_MIN_CONTRAST, f"logo contrast {contrast:.3f} below margin"
    return out, box


def box_blur(img: np.ndarray, size: int = 5) -> np.ndarray:
    return ndimage.uniform_filter(img, size=(size, size, 1), mode="reflect")


def jitter(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation with edge replication."""
    assert max(abs(dx), abs(dy)) <= MAX_JITTER
    return ndimage.shift(img, (dy, dx, 0), order=0, mode="nearest")


# -- records -----------------------------------------------------------------
@dataclass
class ReviewRecord:
    sku: str
    pool: list[np.ndarray]
    sequence: list[int]
    title: list[int]
    feedback: list[int]
    label: int
    oracle: dict = field(default_factory=dict)
    split: str = "train"

    @property
    def images(self) -> list[np.ndarray]:
        return [self.pool[i] for i in self.sequence]

    @property
    def rule(self) -> RuleClass:
        return RuleClass(self.label)

    @property
    def category(self) -> str:
        return self.rule.category


def make_feedback(rule: RuleClass, violating_index: int | None = None) -> list[int]:
    """Feedback tokens: ``["yes"]`` when qualified, else ``[rule, "image", index]`` (1-based)."""
    rule = RuleClass(rule)
    if rule is RuleClass.QUALIFIED:
        return vocab.encode(["yes"])
    if violating_index is None or not 1 <= violating_index <= 9:
        raise ValueError(f"violating index must be in 1..9, got {violating_index}")
    return vocab.encode([rule.token, "image", str(violating_index)])


def rule_from_feedback(tokens: Sequence[int]) -> RuleClass:
    """Class named by the first rule word of a feedback sequence."""
    for w in vocab.decode(tokens):
        if w == "yes":
            return RuleClass.QUALIFIED
        for rule in RuleClass:
            if rule.token == w:
                return rule
    raise ValueError(f"feedback {vocab.decode(tokens)} names no rule")


def inject_violation(spec: ProductSpec, views: dict[str, np.ndarray], rule: RuleClass,
                     rng: np.random.Generator) -> tuple[list[np.ndarray], dict, list[str]]:
    """Mutate the canonical [front, detail, back] sequence to break one rule.

    Returns the mutated sequence, oracle annotations and the view name each
    position came from.
    """
    rule = RuleClass(rule)
    if rule is RuleClass.QUALIFIED:
        raise ValueError("inject_violation needs a violating rule")
    names = ["front", "detail", "back"]
    seq = [views[n].copy() for n in names]
    oracle: dict = {"rule": rule.token}

    if rule is RuleClass.LOGO:
        j = int(rng.integers(0, SEQ_LEN))
        seq[j], box = add_logo(seq[j], int(rng.integers(0, 4)))
        oracle.update(violating_index=j + 1, logo_box=list(box))
    elif rule is RuleClass.BLUR:
        j = int(rng.integers(0, SEQ_LEN))
        seq[j] = box_blur(seq[j])
        oracle.update(violating_index=j + 1)
    elif rule is RuleClass.DUPLICATE:
        j = int(rng.integers(1, SEQ_LEN))
        src = int(rng.integers(0, j))
        while True:
            dx, dy = (int(v) for v in rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2))
            if dx or dy:
                break
        seq[j] = jitter(seq[src], dx, dy)
        names[j] = names[src]
        x, y, w, h = glyph_box(spec, names[src])
        oracle.update(violating_index=j + 1, duplicate_of=src + 1, shift=[dx, dy],
                      duplicate_boxes=[[x, y, w, h], [x + dx, y + dy, w, h]])
    elif rule is RuleClass.COLOR:
        j = int(rng.integers(0, SEQ_LEN))
        shift = float(rng.uniform(MIN_HUE_SHIFT, 1.0 - MIN_HUE_SHIFT))
        new_hue = (spec.hue + shift) % 1.0
        assert hue_distance(new_hue, spec.hue) >= MIN_HUE_SHIFT - 1e-12
        seq[j] = _render_view(spec, names[j], hue=new_hue)
        oracle.update(violating_index=j + 1, shifted_hue=new_hue)
    elif rule is RuleClass.ORDER:
        rest = ["front", "back"] if rng.random() < 0.5 else ["back", "front"]
        names = ["detail"] + rest
        seq = [views[n].copy() for n in names]
        oracle.update(violating_index=1)
    return seq, oracle, names


def _make_record(idx: int, sku: str, spec: ProductSpec, rule: RuleClass, seed: int) -> ReviewRecord:
    rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
    views = render_views(spec)
    if rule is RuleClass.QUALIFIED:
        order = ["front", "detail", "back"]
        seq_imgs = [views[n] for n in order]
        oracle: dict = {"rule": "yes", "violating_index": None}
        names = order
    else:
        seq_imgs, oracle, names = inject_violation(spec, views, rule, rng)

    # candidate pool: the sequence itself, canonical views it does not show
    # (a mutated view replaces its clean original), then distractors
    suffix = {RuleClass.LOGO: "+logo", RuleClass.BLUR: "+blur", RuleClass.COLOR: "+color",
              RuleClass.DUPLICATE: "+shift"}
    kinds = list(names)
    if rule in suffix:
        kinds[oracle["violating_index"] - 1] += suffix[rule]
    pool = list(seq_imgs)
    mutated = {k.split("+")[0] for k in kinds if "+" in k and not k.endswith("+shift")}
    for name in ("front", "detail", "back"):
        if name not in kinds and name not in mutated:
            pool.append(views[name])
            kinds.append(name)
    k_c = int(rng.choice(POOL_SIZES))
    while len(pool) < k_c:
        if rng.random() < 0.5:
            view = str(rng.choice(["front", "detail", "back"]))
            img, _ = add_logo(views[view], int(rng.integers(0, 4)))
            pool.append(img)
            kinds.append(f"{view}+logo")
        else:
            view = str(rng.choice(["detail", "back"]))
            while True:
                dx, dy = (int(v) for v in rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2))
                if dx or dy:
                    break
            pool.append(jitter(views[view], dx, dy))
            kinds.append(f"{view}+shift")

    perm = rng.permutation(len(pool))
    inv = np.argsort(perm)
    pool = [pool[i] for i in perm]
    kinds = [kinds[i] for i in perm]
    sequence = [int(inv[i]) for i in range(SEQ_LEN)]
    oracle.update(
        primary_id=kinds.index("front") if "front" in kinds else None,
        noncompliant_ids=[i for i, k in enumerate(kinds) if k.endswith("+logo")],
        pool_kinds=kinds,
    )
    title = vocab.encode(spec.title_words())
    feedback = make_feedback(rule, oracle.get("violating_index"))
    return ReviewRecord(sku=sku, pool=pool, sequence=sequence, title=title, feedback=feedback,
                        label=int(rule), oracle=oracle)


def class_counts(n: int, mixture: Sequence[float]) -> list[int]:
    """Per-class quotas for ``n`` records (largest remainder rounding).

    Category shares are split evenly between the two rules of the single-
    and pair-image categories.
    """
    mixture = np.asarray(mixture, dtype=np.float64)
    if mixture.shape != (4,) or np.any(mixture < 0) or abs(mixture.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture must be 4 non-negative shares summing to 1, got {mixture.tolist()}")
    q, single, pair, multi = mixture
    shares = np.array([q, single / 2, single / 2, pair / 2, pair / 2, multi])
    raw = shares * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class Dataset:
    records: list[ReviewRecord]
    seed: int
    mixture: tuple[float, ...]

    def split(self, name: str) -> list[ReviewRecord]:
        return [r for r in self.records if r.split == name]

    def category_subsets(self, split: str = "test") -> dict[str, list[ReviewRecord]]:
        return category_subsets(self.split(split), self.seed)


def category_subsets(records: Sequence[ReviewRecord], seed: int = 0) -> dict[str, list[ReviewRecord]]:
    """Balanced per-category sets: every violation of the category plus as many
    randomly drawn qualified records."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B5E7]))
    qualified = [r for r in records if r.label == RuleClass.QUALIFIED]
    out = {}
    for cat in CATEGORIES:
        bad = [r for r in records if r.category == cat]
        k = min(len(bad), len(qualified))
        picks = sorted(rng.choice(len(qualified), size=k, replace=False).tolist()) if k else []
        out[cat] = bad[:k] + [qualified[i] for i in picks]
    return out


def generate_dataset(n: int, mixture: Sequence[float] = DEFAULT_MIXTURE, seed: int = 0) -> Dataset:
    """``n`` review records with exact class quotas and an SKU-disjoint 80/10/10 split.

    Some products are reviewed twice (about one SKU in three), so the split is
    done over SKUs. Record ``i`` is generated from its own seed stream.
    """
    if n < 1:
        raise ValueError("n must be positive")
    counts = class_counts(n, mixture)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    labels = np.repeat(np.arange(NUM_CLASSES), counts)
    labels = labels[rng.permutation(n)]

    # sku assignment: walk records, occasionally reusing the previous product
    sku_of = []
    n_sku = 0
    for i in range(n):
        if i > 0 and rng.random() < 0.25:
            sku_of.append(sku_of[-1])
        else:
            sku_of.append(n_sku)
            n_sku += 1
    sku_specs = [ProductSpec.random(np.random.default_rng(np.random.SeedSequence([seed, 0x5C, s])))
                 for s in range(n_sku)]

    order = rng.permutation(n_sku)
    per_sku = np.bincount(sku_of, minlength=n_sku)
    split_of_sku = np.empty(n_sku, dtype=object)
    targets = np.cumsum(SPLIT_FRACTIONS) * n
    filled = 0
    names = ("train", "val", "test")
    for s in order:
        filled += per_sku[s]
        split_of_sku[s] = names[int(np.searchsorted(targets, filled - 0.5))] if filled <= n else "test"

    records = []
    for i in range(n):
        s = sku_of[i]
        rec = _make_record(i, f"sku{s:06d}", sku_specs[s], RuleClass(int(labels[i])), seed)
        rec.split = str(split_of_sku[s])
        records.append(rec)
    return Dataset(records=records, seed=seed, mixture=tuple(float(m) for m in mixture))


def dominant_hue(img: np.ndarray, min_saturation: float = 0.5) -> float | None:
    """Circular mean hue of strongly saturated pixels (the glyph), or None."""
    flat = img.reshape(-1, 3)
    mx, mn = flat.max(axis=1), flat.min(axis=1)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    sel = flat[sat >= min_saturation]
    if len(sel) == 0:
        return None
    hues = np.array([colorsys.rgb_to_hsv(*px)[0] for px in sel])
    ang = 2 * np.pi * hues
    return float((np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi)) % 1.0)


# -- labelled image pairs for duplicate detection ----------------------------------
def duplicate_pairs(n: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (original, injected duplicate) pairs produced by the duplicate rule."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0B, i]))
        spec = ProductSpec.random(rng)
        seq, oracle, _ = inject_violation(spec, render_views(spec), RuleClass.DUPLICATE, rng)
        out.append((seq[oracle["duplicate_of"] - 1], seq[oracle["violating_index"] - 1]))
    return out


def distinct_pairs(n: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` non-duplicate pairs: even indices are two different views of one
    product, odd indices the same view of two different products."""
    out = []
    view_pairs = (("front", "detail"), ("front", "back"), ("detail", "back"))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1F, i]))
        a = ProductSpec.random(rng)
        if i % 2 == 0:
            va, vb = view_pairs[(i // 2) % 3]
            views = render_views(a)
            out.append((views[va], views[vb]))
        else:
            b = ProductSpec.random(rng)
            view = ("front", "detail", "back")[(i // 2) % 3]
            out.append((render_views(a)[view], render_views(b)[view]))
    return out

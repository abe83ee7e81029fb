"""Stage 1: primary selection, non-compliance filtering, duplicate detection, sequence assembly."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import autograd as ag
from . import model as M
from . import nn
from .autograd import Tensor

log = logging.getLogger(__name__)


class AbortReason(str, enum.Enum):
    NO_PRIMARY = "NoPrimary"
    TOO_FEW = "TooFew"


class Abort(Exception):
    """The pipeline stops and outputs nothing."""

    def __init__(self, reason: AbortReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = AbortReason(reason)


@dataclass(frozen=True)
class Stage1Config:
    primary_threshold: float = 0.5
    nc_threshold: float = 0.5
    n_proposals: int = 32
    k: int = 3
    # frozen after one calibration run on rule-world output (see tests/test_calibration.py)
    tau_dup: float = 0.05
    m_dup: int = 4
    min_box: int = 8
    nms_iou: float = 0.5
    descriptor_size: int = 16

    def __post_init__(self):
        for name in ("primary_threshold", "nc_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if min(self.n_proposals, self.k, self.m_dup) < 1:
            raise ValueError("n_proposals, k and m_dup must be >= 1")


# -- candidate bookkeeping -------------------------------------------------------
@dataclass
class CandidateSet:
    images: dict[int, np.ndarray]
    p_primary: dict[int, float] = field(default_factory=dict)
    p_nc: dict[int, float] = field(default_factory=dict)
    primary: int | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("candidate set is empty")

    @classmethod
    def from_images(cls, images: Sequence[np.ndarray]) -> "CandidateSet":
        return cls({i: np.asarray(img, dtype=np.float64) for i, img in enumerate(images)})

    @property
    def ids(self) -> list[int]:
        return sorted(self.images)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, keep: Sequence[int]) -> "CandidateSet":
        keep = set(keep)
        return CandidateSet(
            {i: im for i, im in self.images.items() if i in keep},
            {i: p for i, p in self.p_primary.items() if i in keep},
            {i: p for i, p in self.p_nc.items() if i in keep},
            self.primary if self.primary in keep else None,
        )


def label_primary(image_id: int, approved_sequence: Sequence[int], pool_ids: Sequence[int]) -> int:
    """1 iff the image opens an approved sequence (primary-classifier training label)."""
    if image_id not in set(pool_ids):
        raise ValueError(f"image {image_id} is not in the candidate pool")
    return int(len(approved_sequence) > 0 and image_id == approved_sequence[0])


# -- single-image classifiers ----------------------------------------------------
STAGE1_MODEL_CONFIG = M.MuiscConfig(dim=32, heads=2, encoder_blocks=1, fusion_blocks=0, decoder_blocks=0,
                                    dropout=0.0, use_decoder=False, hierarchical_fusion=False)


def classifier_shapes(cfg: M.MuiscConfig) -> dict[str, tuple[int, ...]]:
    """ViT encoder parameters of ``cfg`` plus a one-logit head."""
    shapes = {k: v for k, v in M.param_shapes(cfg).items()
              if k.split(".")[0] in ("patch", "cls", "enc_pos", "enc")}
    shapes["head.w"] = (cfg.dim, 1)
    shapes["head.b"] = (1,)
    return shapes


@dataclass
class ImageClassifier:
    """Tiny ViT + single-logit head; outputs P(positive | image)."""
    cfg: M.MuiscConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, cfg: M.MuiscConfig = STAGE1_MODEL_CONFIG, seed: int = 0) -> "ImageClassifier":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in classifier_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "ln_g":
                data = np.ones(shape)
            elif leaf == "ln_b" or (leaf.startswith("b") and len(shape) == 1):
                data = np.zeros(shape)
            else:
                data = nn.trunc_normal(rng, shape, cfg.init_std)
            params[name] = Tensor(data, requires_grad=True)
        return cls(cfg, params)

    def logits(self, images: np.ndarray, rng=None) -> Tensor:
        feats = M.encode_images(images, self.params, self.cfg, rng)
        cls_state = ag.take_positions(feats, np.zeros(feats.shape[0], dtype=np.int64))
        return nn.linear(cls_state, self.params["head.w"], self.params["head.b"]).reshape(feats.shape[0])

    def predict(self, images: Sequence[np.ndarray], batch_size: int = 128) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float64)
        out = []
        with ag.no_grad():
            for lo in range(0, len(imgs), batch_size):
                z = self.logits(imgs[lo: lo + batch_size]).data
                out.append(0.5 * (1.0 + np.tanh(0.5 * z)))
        return np.concatenate(out) if out else np.zeros(0)


def train_classifier(images: np.ndarray, labels: np.ndarray, *, epochs: int = 5, batch_size: int = 32,
                     lr: float = 1e-3, seed: int = 0,
                     cfg: M.MuiscConfig = STAGE1_MODEL_CONFIG) -> tuple[ImageClassifier, list[float]]:
    """Binary cross-entropy training of an :class:`ImageClassifier`."""
    from .training import OptimizerState, adamw_step, zero_grads

    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("no training images")
    clf = ImageClassifier.create(cfg, seed)
    state = OptimizerState(lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo: lo + batch_size]
            zero_grads(clf.params)
            loss = ag.bce_logits(clf.logits(images[idx]), labels[idx])
            ag.backward(loss)
            adamw_step(clf.params, state)
            total += loss.item() * len(idx)
        losses.append(total / len(images))
    return clf, losses


@dataclass
class Stage1Models:
    primary: ImageClassifier
    nc: ImageClassifier

    def score(self, cands: CandidateSet) -> CandidateSet:
        ids = cands.ids
        imgs = np.stack([cands.images[i] for i in ids])
        pp = self.primary.predict(imgs)
        pn = self.nc.predict(imgs)
        return replace(cands, p_primary={i: float(p) for i, p in zip(ids, pp)},
                       p_nc={i: float(p) for i, p in zip(ids, pn)})


def stage1_training_sets(records) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """(images, labels) for the primary and non-compliance classifiers.

    Primary labels come from approved (qualified) sequences only; every
    pool image is labeled for non-compliance from the generator oracle.
    """
    p_imgs, p_lab, n_imgs, n_lab = [], [], [], []
    for r in records:
        pool_ids = list(range(len(r.pool)))
        nc = set(r.oracle.get("noncompliant_ids", []))
        for i, img in enumerate(r.pool):
            n_imgs.append(img)
            n_lab.append(1 if i in nc else 0)
            if r.label == 0:
                p_imgs.append(img)
                p_lab.append(label_primary(i, r.sequence, pool_ids))
    return (np.asarray(p_imgs), np.asarray(p_lab)), (np.asarray(n_imgs), np.asarray(n_lab))


def train_stage1(records, *, epochs: int = 5, seed: int = 0, lr: float = 1e-3) -> Stage1Models:
    (pi, pl), (ni, nl) = stage1_training_sets(records)
    if len(pi) == 0:
        raise ValueError("no qualified records to train the primary classifier")
    primary, _ = train_classifier(pi, pl, epochs=epochs, seed=seed, lr=lr)
    nc, _ = train_classifier(ni, nl, epochs=epochs, seed=seed + 1, lr=lr)
    return Stage1Models(primary, nc)


# -- filters ---------------------------------------------------------------------
def select_primary(cands: CandidateSet, cfg: Stage1Config, models: Stage1Models | None = None) -> CandidateSet:
    """Pick the highest p_primary (ties: lowest id); abort unless it beats the threshold."""
    if len(cands) == 0:
        raise ValueError("candidate set is empty")
    if models is not None:
        cands = models.score(cands)
    best = max(cands.ids, key=lambda i: (cands.p_primary[i], -i))
    if not cands.p_primary[best] > cfg.primary_threshold:
        raise Abort(AbortReason.NO_PRIMARY, f"max p_primary {cands.p_primary[best]:.3f}")
    return replace(cands, primary=best)


def filter_noncompliant(cands: CandidateSet, cfg: Stage1Config, k_t: int,
                        models: Stage1Models | None = None) -> CandidateSet:
    """Drop images with p_nc above the threshold; abort if fewer than ``k_t`` remain."""
    if models is not None and not cands.p_nc:
        cands = models.score(cands)
    keep = [i for i in cands.ids if not cands.p_nc[i] > cfg.nc_threshold]
    if len(keep) < k_t:
        raise Abort(AbortReason.TOO_FEW, f"{len(keep)} compliant images, need {k_t}")
    return cands.subset(keep)


# -- region proposals and descriptors ----------------------------------------------
@dataclass(frozen=True)
class RegionProposal:
    image_id: int
    box: tuple[int, int, int, int]  # x, y, w, h
    score: float


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Per-pixel max over channels of the Sobel gradient norm."""
    img = np.asarray(image, dtype=np.float64)
    mags = []
    for c in range(img.shape[2]):
        gx = ndimage.sobel(img[..., c], axis=1, mode="nearest")
        gy = ndimage.sobel(img[..., c], axis=0, mode="nearest")
        mags.append(np.hypot(gx, gy))
    mag = np.max(mags, axis=0)
    mag[mag < 1e-9] = 0.0
    return mag


def _box_sum(integral: np.ndarray, x: int, y: int, w: int, h: int) -> float:
    return integral[y + h, x + w] - integral[y, x + w] - integral[y + h, x] + integral[y, x]


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    return inter / float(aw * ah + bw * bh - inter)


def window_sizes(height: int, width: int, min_box: int) -> list[int]:
    side = min(height, width)
    return sorted({max(min_box, int(round(side * f / 2.0)) * 2) for f in (0.3, 0.5, 0.75)})


def propose_regions(image: np.ndarray, cfg: Stage1Config = Stage1Config(), image_id: int = 0) -> list[RegionProposal]:
    """Sliding-window boxes scored by enclosed edge mass minus edge mass crossing the border.

    Square windows at three scales. Edge mass strictly inside the box counts
    for it; mass in a two-pixel band straddling the border (one pixel either
    side) counts against it. The score is normalised by perimeter^1.5 so
    tight boxes around a contour win over loose ones. Greedy NMS at
    ``cfg.nms_iou`` then keeps the best ``cfg.n_proposals``.
    """
    mag = gradient_magnitude(image)
    h, w = mag.shape
    if min(h, w) < cfg.min_box:
        raise ValueError(f"image {w}x{h} smaller than minimum box {cfg.min_box}")
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = mag.cumsum(0).cumsum(1)
    cands = []
    for size in window_sizes(h, w, cfg.min_box):
        for y in range(0, h - size + 1):
            for x in range(0, w - size + 1):
                inner = _box_sum(integral, x + 1, y + 1, size - 2, size - 2)
                x0, y0 = max(0, x - 1), max(0, y - 1)
                x1, y1 = min(w, x + size + 1), min(h, y + size + 1)
                crossing = _box_sum(integral, x0, y0, x1 - x0, y1 - y0) - inner
                score = (inner - crossing) / (4.0 * size) ** 1.5
                if score > 1e-9:
                    cands.append((score, y, x, size))
    cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    kept: list[RegionProposal] = []
    for score, y, x, size in cands:
        box = (x, y, size, size)
        if all(iou(box, k.box) <= cfg.nms_iou for k in kept):
            kept.append(RegionProposal(image_id, box, float(score)))
            if len(kept) == cfg.n_proposals:
                break
    return kept


@dataclass(frozen=True)
class PatchDescriptor:
    proposal: RegionProposal
    feature: np.ndarray


def descriptor(image: np.ndarray, box, size: int = 16) -> np.ndarray:
    """Unit-norm [color histogram (8 bins x 3 channels) ++ gradient orientation histogram (8 bins)]."""
    x, y, w, h = (int(v) for v in box)
    patch = np.asarray(image, dtype=np.float64)[y: y + h, x: x + w]
    if patch.shape[0] != size or patch.shape[1] != size:
        patch = ndimage.zoom(patch, (size / patch.shape[0], size / patch.shape[1], 1), order=1, mode="nearest")
    patch = np.clip(patch, 0.0, 1.0)
    color = []
    for c in range(3):
        hist, _ = np.histogram(patch[..., c], bins=8, range=(0.0, 1.0))
        color.append(hist / patch[..., c].size)
    gray = patch.mean(axis=2)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    gx[np.abs(gx) < 1e-9] = 0.0
    gy[np.abs(gy) < 1e-9] = 0.0
    mag = np.hypot(gx, gy)
    # bins centred on multiples of 45 degrees so axis-aligned edges sit mid-bin
    ang = np.mod(np.arctan2(gy, gx) + np.pi / 8, 2 * np.pi)
    orient, _ = np.histogram(ang, bins=8, range=(0.0, 2 * np.pi), weights=mag)
    if orient.sum() > 0:
        orient = orient / orient.sum()
    feat = np.concatenate(color + [orient])
    return feat / np.linalg.norm(feat)


@dataclass
class MatchResult:
    duplicate: bool
    pairs: list[tuple[tuple[int, int, int, int], tuple[int, int, int, int], float]]


def describe(image: np.ndarray, cfg: Stage1Config, image_id: int = 0) -> list[PatchDescriptor]:
    return [PatchDescriptor(p, descriptor(image, p.box, cfg.descriptor_size))
            for p in propose_regions(image, cfg, image_id)]


def _knn(dist: np.ndarray, k: int) -> np.ndarray:
    """Boolean [n, m]: column j among the k nearest of row i (ties by index)."""
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    out = np.zeros(dist.shape, dtype=bool)
    np.put_along_axis(out, order, True, axis=1)
    return out


def match_descriptors(da: Sequence[PatchDescriptor], db: Sequence[PatchDescriptor], cfg: Stage1Config) -> MatchResult:
    if not da or not db:
        return MatchResult(False, [])
    fa = np.stack([d.feature for d in da])
    fb = np.stack([d.feature for d in db])
    dist = np.sqrt(np.maximum(((fa[:, None, :] - fb[None, :, :]) ** 2).sum(-1), 0.0))
    mutual = _knn(dist, cfg.k) & _knn(dist.T, cfg.k).T
    ok = mutual & (dist < cfg.tau_dup)
    pairs = [(da[i].proposal.box, db[j].proposal.box, float(dist[i, j])) for i, j in zip(*np.nonzero(ok))]
    return MatchResult(len(pairs) >= cfg.m_dup, pairs)


def match_patches(a: np.ndarray, b: np.ndarray, cfg: Stage1Config = Stage1Config()) -> MatchResult:
    """Duplicate verdict for an image pair from mutual k-NN patch matches under ``tau_dup``."""
    return match_descriptors(describe(a, cfg, 0), describe(b, cfg, 1), cfg)


def pairwise_duplicates(cands: CandidateSet, cfg: Stage1Config) -> dict[tuple[int, int], bool]:
    descs = {i: describe(cands.images[i], cfg, i) for i in cands.ids}
    ids = cands.ids
    return {(a, b): match_descriptors(descs[a], descs[b], cfg).duplicate
            for n, a in enumerate(ids) for b in ids[n + 1:]}


def dedup_resolve(cands: CandidateSet, verdicts: Mapping[tuple[int, int], bool], primary: int | None,
                  k_t: int) -> CandidateSet:
    """Remove one image of every duplicate pair.

    The primary always survives; otherwise the image with the smaller
    p_nc stays (ties keep the lower id). Pairs are visited in id order.
    """
    alive = set(cands.ids)
    for a, b in sorted(tuple(sorted(p)) for p, dup in verdicts.items() if dup):
        if a not in alive or b not in alive:
            continue
        if primary in (a, b):
            loser = b if a == primary else a
        else:
            pa, pb = cands.p_nc.get(a, 0.0), cands.p_nc.get(b, 0.0)
            loser = b if pa <= pb else a
        alive.discard(loser)
    if len(alive) < k_t:
        raise Abort(AbortReason.TOO_FEW, f"{len(alive)} images left after de-duplication, need {k_t}")
    return cands.subset(alive)


def assemble_sequence(cands: CandidateSet, primary: int, k_t: int, seed: int) -> list[int]:
    """Primary first, then ``k_t - 1`` others drawn without replacement in draw order."""
    rest = [i for i in cands.ids if i != primary]
    if primary not in cands.images or len(rest) < k_t - 1:
        raise ValueError(f"cannot assemble {k_t} images from {len(cands)} candidates")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(rest), size=k_t - 1, replace=False)
    return [primary] + [rest[int(i)] for i in picks]

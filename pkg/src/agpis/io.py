"""Checkpoints, the JSONL dataset manifest and PPM image files."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import model as M
from . import vocab
from .autograd import Tensor
from .ruleworld import NUM_CLASSES, Dataset, ReviewRecord

MAGIC = b"MUISC1\n"
KINDS = ("muisc", "stage1")
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A checkpoint, manifest or image file is malformed."""


# -- images ------------------------------------------------------------------------
def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary PPM (P6, 8 bit). ``image`` is HxWx3 in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Inverse of :func:`write_ppm`; returns float64 in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    raster = data[pos:]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """What an image looks like after a write/read cycle."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255) / 255.0


# -- checkpoints ---------------------------------------------------------------------
def save_checkpoint(path: str | os.PathLike, params: Mapping[str, Tensor | np.ndarray], cfg: M.MuiscConfig,
                    kind: str = "muisc") -> None:
    """Magic line, ``key=value`` header, blank line, then binary entries in name order.

    Entry layout: u16 name length, utf-8 name, u8 rank, u32 dims, float32 data
    (all little-endian). Parameters are stored at 32-bit precision.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    names = sorted(params)
    head = [f"kind={kind}", f"entries={len(names)}"] + [f"{k}={v}" for k, v in cfg.to_items()]
    chunks = [MAGIC, ("\n".join(head) + "\n\n").encode("utf-8")]
    for name in names:
        p = params[name]
        arr = np.asarray(p.data if isinstance(p, Tensor) else p)
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    kind: str
    cfg: M.MuiscConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)


def _read_header(data: bytes) -> tuple[dict[str, str], int]:
    if not data.startswith(MAGIC):
        raise FormatError(f"unknown magic {data[:len(MAGIC)]!r}")
    end = data.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise FormatError("truncated header")
    items = {}
    for line in data[len(MAGIC):end].decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad header line {line!r}")
        items[key] = value
    return items, end + 2


def expected_shapes(kind: str, cfg: M.MuiscConfig) -> dict[str, tuple[int, ...]]:
    if kind == "muisc":
        return M.param_shapes(cfg)
    from .stage1 import classifier_shapes
    return {f"{role}.{k}": v for role in ("primary", "nc") for k, v in classifier_shapes(cfg).items()}


def load_checkpoint(path: str | os.PathLike, expect_cfg: M.MuiscConfig | None = None,
                    expect_kind: str | None = None) -> Checkpoint:
    """Read and fully validate a checkpoint; nothing is returned unless every entry is sound."""
    data = Path(path).read_bytes()
    items, pos = _read_header(data)
    kind = items.pop("kind", None)
    if kind not in KINDS:
        raise FormatError(f"header: unknown kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind} checkpoint, found {kind}")
    try:
        n_entries = int(items.pop("entries"))
        cfg = M.MuiscConfig.from_items(items)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"header: {exc}") from exc
    if expect_cfg is not None and cfg != expect_cfg:
        diff = [k for (k, a), (_, b) in zip(cfg.to_items(), expect_cfg.to_items()) if a != b]
        raise FormatError(f"config mismatch in {', '.join(diff)}")
    shapes = expected_shapes(kind, cfg)
    params: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        name = "<unnamed>"
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise struct.error("short name")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"entry {name}: truncated or corrupt record") from exc
        if name not in shapes:
            raise FormatError(f"entry {name}: not a parameter of this config")
        if tuple(shape) != tuple(shapes[name]):
            raise FormatError(f"entry {name}: shape {tuple(shape)} but config expects {tuple(shapes[name])}")
        if name in params:
            raise FormatError(f"entry {name}: duplicated")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"entry {name}: truncated data")
        params[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last entry")
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise FormatError(f"entry {missing[0]}: missing ({len(missing)} absent)")
    return Checkpoint(kind, cfg, params)


def save_model(path, model: M.MuiscModel) -> None:
    save_checkpoint(path, model.params, model.cfg, "muisc")


def load_model(path, expect_cfg: M.MuiscConfig | None = None) -> M.MuiscModel:
    ck = load_checkpoint(path, expect_cfg, "muisc")
    return M.MuiscModel(ck.cfg, {k: Tensor(v, requires_grad=True) for k, v in ck.params.items()})


def save_stage1(path, models) -> None:
    params = {f"primary.{k}": v for k, v in models.primary.params.items()}
    params.update({f"nc.{k}": v for k, v in models.nc.params.items()})
    save_checkpoint(path, params, models.primary.cfg, "stage1")


def load_stage1(path):
    from .stage1 import ImageClassifier, Stage1Models
    ck = load_checkpoint(path, expect_kind="stage1")

    def part(role):
        pre = role + "."
        return ImageClassifier(ck.cfg, {k[len(pre):]: Tensor(v, requires_grad=True)
                                        for k, v in ck.params.items() if k.startswith(pre)})
    return Stage1Models(part("primary"), part("nc"))


# -- manifest --------------------------------------------------------------------------
class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None, sku: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line
        self.sku = sku


_FIELDS = {"sku": str, "candidates": list, "sequence": list, "title": list, "feedback": list,
           "label": int, "split": str, "oracle": dict}


@dataclass
class ManifestEntry:
    sku: str
    candidates: list[str]
    sequence: list[int]
    title: list[str]
    feedback: list[str]
    label: int
    split: str
    oracle: dict

    def to_json(self) -> str:
        obj = {k: getattr(self, k) for k in _FIELDS}
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def validate_entry(obj, line: int | None = None, root: Path | None = None) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError("record is not a JSON object", line)
    sku = obj.get("sku") if isinstance(obj.get("sku"), str) else None
    for key, typ in _FIELDS.items():
        if key not in obj:
            raise ManifestError(f"missing field {key!r}", line, sku)
        v = obj[key]
        if not isinstance(v, typ) or (typ is int and isinstance(v, bool)):
            raise ManifestError(f"field {key!r} must be {typ.__name__}", line, sku)
    extra = sorted(set(obj) - set(_FIELDS))
    if extra:
        raise ManifestError(f"unknown field {extra[0]!r}", line, sku)
    e = ManifestEntry(**{k: obj[k] for k in _FIELDS})
    if not 0 <= e.label < NUM_CLASSES:
        raise ManifestError(f"sku {e.sku}: label {e.label} outside [0, {NUM_CLASSES})", line, sku)
    if e.split not in SPLITS:
        raise ManifestError(f"sku {e.sku}: unknown split {e.split!r}", line, sku)
    if not e.candidates or not all(isinstance(p, str) for p in e.candidates):
        raise ManifestError(f"sku {e.sku}: candidates must be a non-empty list of paths", line, sku)
    if not all(isinstance(i, int) and not isinstance(i, bool) and 0 <= i < len(e.candidates) for i in e.sequence):
        raise ManifestError(f"sku {e.sku}: sequence indices must address candidates", line, sku)
    for key in ("title", "feedback"):
        bad = [t for t in getattr(e, key) if t not in vocab.TOKEN_ID]
        if bad:
            raise ManifestError(f"sku {e.sku}: {key} token {bad[0]!r} not in the vocabulary", line, sku)
    if root is not None:
        for p in e.candidates:
            # os.path rather than pathlib: pathlib interns every path part, which grows without bound
            if not os.path.isfile(os.path.join(root, p)):
                raise ManifestError(f"sku {e.sku}: missing image {p}", line, sku)
    return e


def iter_manifest(path: str | os.PathLike, check_paths: bool = True) -> Iterator[ManifestEntry]:
    """Stream entries one line at a time; images are not opened."""
    path = Path(path)
    root = path.parent if check_paths else None
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise ManifestError("last line is not newline-terminated", n)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", n) from exc
            yield validate_entry(obj, n, root)


def read_manifest(path, check_paths: bool = True) -> list[ManifestEntry]:
    return list(iter_manifest(path, check_paths))


def write_manifest(path: str | os.PathLike, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def entry_for(record: ReviewRecord, paths: Sequence[str]) -> ManifestEntry:
    return ManifestEntry(sku=record.sku, candidates=list(paths), sequence=list(record.sequence),
                         title=vocab.decode(record.title), feedback=vocab.decode(record.feedback),
                         label=int(record.label), split=record.split, oracle=_jsonable(record.oracle))


def load_record(entry: ManifestEntry, root: str | os.PathLike) -> ReviewRecord:
    root = Path(root)
    try:
        pool = [read_ppm(root / p) for p in entry.candidates]
    except FileNotFoundError as exc:
        raise ManifestError(f"sku {entry.sku}: missing image {exc.filename}", sku=entry.sku) from exc
    return ReviewRecord(sku=entry.sku, pool=pool, sequence=list(entry.sequence),
                        title=vocab.encode(entry.title), feedback=vocab.encode(entry.feedback),
                        label=entry.label, oracle=dict(entry.oracle), split=entry.split)


def write_dataset(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    """Write every pool image as PPM plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for n, rec in enumerate(dataset.records):
        paths = []
        for j, img in enumerate(rec.pool):
            rel = f"images/r{n:06d}_{j}.ppm"
            write_ppm(out / rel, img)
            paths.append(rel)
        entries.append(entry_for(rec, paths))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def read_dataset(manifest: str | os.PathLike, split: str | None = None) -> list[ReviewRecord]:
    """Load records (with images) from a manifest, optionally a single split."""
    manifest = Path(manifest)
    return [load_record(e, manifest.parent) for e in iter_manifest(manifest)
            if split is None or e.split == split]

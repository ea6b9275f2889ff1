"""Image, mask and manifest I/O plus the stratified k-fold splitter."""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._random import make_rng
from ._validation import check_mask, check_rgb
from .exceptions import DuplicateId, FormatError, InvalidInput, MissingColumn, NotFound, ParseError

REQUIRED_COLUMNS = ("id", "image_path", "scanner")
MASK_THRESHOLD = 127


def _open(path):
    if not os.path.exists(path):
        raise NotFound(f"no such file: {path}")
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    return im


def _to_uint8(im, path):
    if im.mode in ("I", "I;16", "I;16B", "I;16L", "F") or im.mode.startswith("I;"):
        raise FormatError(f"{path}: unsupported bit depth (mode {im.mode})")
    return im


def read_image(path):
    """Read an 8-bit RGB image; grey is expanded to RGB and alpha dropped."""
    im = _to_uint8(_open(path), path)
    if im.mode != "RGB":
        im = im.convert("RGB")
    return np.asarray(im, dtype=np.uint8).copy()


def write_image(img, path):
    Image.fromarray(check_rgb(img), mode="RGB").save(path, format="PNG")


def read_mask(path):
    """Read a binary mask; a pixel is positive iff its value exceeds 127."""
    im = _to_uint8(_open(path), path)
    if im.mode in ("1", "P", "LA"):
        im = im.convert("L")
    if im.mode in ("L", "RGB", "RGBA"):
        arr = np.asarray(im)
    else:
        raise FormatError(f"{path}: unsupported mask mode {im.mode}")
    if arr.ndim == 3:
        rgb = arr[..., :3]
        if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 0], rgb[..., 2])):
            raise FormatError(f"{path}: RGB mask channels disagree")
        arr = rgb[..., 0]
    return arr > MASK_THRESHOLD


def write_mask(mask, path):
    mask = check_mask(mask)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


@dataclass
class ManifestRow:
    id: str
    image_path: str
    scanner: str
    mask_path: str = None
    fold: int = None
    extra: dict = field(default_factory=dict)

    def get(self, column):
        if column in ("id", "image_path", "scanner", "mask_path", "fold"):
            return getattr(self, column)
        return self.extra.get(column)


@dataclass
class Manifest:
    rows: list
    columns: tuple = ()

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def ids(self):
        return [row.id for row in self.rows]


def _resolve(base, value):
    if not value:
        return None
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))


def read_manifest(path):
    """Parse a manifest CSV (``id,image_path,mask_path,scanner[,fold]``).

    Relative paths are resolved against the manifest's directory. Extra
    columns (e.g. ``pred_path``) are kept and resolved the same way when
    their name ends in ``_path``.
    """
    if not os.path.exists(path):
        raise NotFound(f"no such file: {path}")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty manifest", 1) from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        rows, seen = [], set()
        for lineno, values in enumerate(reader, start=2):
            if not values or all(not v.strip() for v in values):
                continue
            if len(values) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(values)}", lineno)
            rec = dict(zip(header, (v.strip() for v in values)))
            if not rec["id"]:
                raise ParseError("empty id", lineno)
            if rec["id"] in seen:
                raise DuplicateId(rec["id"], lineno)
            seen.add(rec["id"])
            fold = rec.get("fold") or None
            if fold is not None:
                try:
                    fold = int(fold)
                except ValueError:
                    raise ParseError(f"fold {fold!r} is not an integer", lineno) from None
            extra = {
                k: (_resolve(base, v) if k.endswith("_path") else v)
                for k, v in rec.items()
                if k not in ("id", "image_path", "mask_path", "scanner", "fold")
            }
            rows.append(
                ManifestRow(
                    id=rec["id"],
                    image_path=_resolve(base, rec["image_path"]),
                    scanner=rec["scanner"],
                    mask_path=_resolve(base, rec.get("mask_path")),
                    fold=fold,
                    extra=extra,
                )
            )
    return Manifest(rows, tuple(header))


@dataclass
class FoldAssignment:
    k: int
    assignments: dict

    def folds(self):
        out = [[] for _ in range(self.k)]
        for id_, f in self.assignments.items():
            out[f].append(id_)
        return out

    def to_dict(self):
        return {"k": self.k, "assignments": dict(self.assignments)}

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(int(data["k"]), {str(k): int(v) for k, v in data["assignments"].items()})


def stratified_kfold(manifest, k=4, seed=0, by="scanner"):
    """Assign every row to one of ``k`` folds, balanced within each stratum.

    Strata are visited in sorted label order; each is shuffled with its own
    seeded stream and dealt round-robin starting at fold 0, so per-stratum
    fold sizes differ by at most one.
    """
    rows = list(manifest)
    if k < 2:
        raise InvalidInput(f"k must be at least 2, got {k}")
    if k > len(rows):
        raise InvalidInput(f"k={k} exceeds the number of rows ({len(rows)})")
    strata = {}
    for row in rows:
        label = row.get(by)
        if label is None:
            raise InvalidInput(f"row {row.id!r} has no value for {by!r}")
        strata.setdefault(str(label), []).append(row.id)
    assignments = {}
    for index, label in enumerate(sorted(strata)):
        ids = strata[label]
        order = make_rng(seed, index).permutation(len(ids))
        for position, j in enumerate(order):
            assignments[ids[j]] = position % k
    # keep manifest order in the output mapping
    return FoldAssignment(k, {row.id: assignments[row.id] for row in rows})

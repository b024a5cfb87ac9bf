"""On-disk datasets: PNG I/O, the synthetic manifest and public-layout loaders.

Layout conventions understood by :func:`load_dataset` (all paths relative to
``root``; image extensions .png/.jpg/.jpeg/.bmp/.tif are accepted):

``synthetic``
    ``manifest.csv`` with columns path, maskPath, cx, cy, a, b, theta,
    pixelSizeMm, split, cupMaskPath. Rows with a filled ellipse (``a``)
    become ellipse records, rows with a mask path mask records, and rows
    with neither unlabelled records.
``refuge``
    ``images/<id>.*`` and ``masks/<id>.*``; the mask is a grayscale map with
    0 = cup, 128 = disc rim, 255 = background. ``target="od"`` keeps
    pixels < 255, ``"oc"`` keeps pixels < 64.
``drishti``
    ``Images/<id>.png`` and ``GT/<id>/SoftMap/<id>_ODsegSoftmap.png`` (or
    ``_cupsegSoftmap.png``); soft maps are thresholded at 128.
``rimone``
    images anywhere below ``root``; the disc mask sits next to the image as
    ``<stem>-gs.png`` (cup: ``<stem>-cup.png``), nonzero = foreground.
``hc18``
    ``training_set/<id>.png`` with ``<id>_Annotation.png`` (a thin ellipse
    outline), and ``training_set_pixel_size_and_HC.csv`` with columns
    ``filename, pixel size(mm), ...``. The ellipse is fitted to the outline
    pixels. A ``test_set`` directory with its own CSV is read as split
    ``test`` (no annotations there, so those records carry no GT).
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Ellipse, rasterize_ellipse_mask
from .synthetic import Sample

LAYOUTS = ("synthetic", "refuge", "drishti", "rimone", "hc18")
SPLITS = ("train", "val", "test")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("path", "maskPath", "cx", "cy", "a", "b", "theta", "pixelSizeMm", "split",
                    "cupMaskPath")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    """One sample on disk. Exactly one of ``mask_path`` / ``ellipse`` is set,
    except for unlabelled test images where both are ``None``."""

    id: str
    image_path: Path
    mask_path: Path | None = None
    ellipse: Ellipse | None = None
    pixel_size_mm: float | None = None
    split: str = "train"
    mask_codec: str = "binary"

    def __post_init__(self):
        if self.mask_path is not None and self.ellipse is not None:
            raise DatasetError(f"{self.id}: record has both a mask and an ellipse")
        if self.split not in SPLITS:
            raise DatasetError(f"{self.id}: split must be one of {SPLITS}, got {self.split!r}")

    @property
    def has_gt(self) -> bool:
        return self.mask_path is not None or self.ellipse is not None


@dataclass
class LoadResult:
    records: list[SampleRecord]
    errors: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


# ---------------------------------------------------------------------------
# pixels

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save_png(path, array: np.ndarray) -> None:
    """Write a uint8 / bool / [0,1]-float array as an 8-bit PNG."""
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Float32 image in [0, 1]: (H, W) for grayscale, (H, W, 3) for colour."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im)
    return (arr.astype(np.float32) / 255.0)


def _load_raw(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def decode_mask(raw: np.ndarray, codec: str) -> np.ndarray:
    if codec == "binary":
        return raw > 127
    if codec == "nonzero":
        return raw > 0
    if codec == "refuge_od":
        return raw < 255
    if codec == "refuge_oc":
        return raw < 64
    raise DatasetError(f"unknown mask codec {codec!r}")


def load_mask(record: SampleRecord, shape: tuple[int, int] | None = None) -> np.ndarray | None:
    """Boolean GT mask for a record (ellipses are rasterized), or None."""
    if record.mask_path is not None:
        return decode_mask(_load_raw(record.mask_path), record.mask_codec)
    if record.ellipse is not None:
        if shape is None:
            with Image.open(record.image_path) as im:
                shape = (im.height, im.width)
        return rasterize_ellipse_mask(record.ellipse, shape)
    return None


# ---------------------------------------------------------------------------
# synthetic manifest

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_dataset(samples: list[Sample], root, split: str | list[str] = "train") -> list[SampleRecord]:
    """Write PNGs plus ``manifest.csv``; returns the records as the loader sees them."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = [split] * len(samples) if isinstance(split, str) else list(split)
    if len(splits) != len(samples):
        raise DatasetError("need one split per sample")
    rows = []
    for s, sp in zip(samples, splits):
        img_rel = f"images/{s.id}.png"
        save_png(root / img_rel, s.image)
        row = dict.fromkeys(MANIFEST_COLUMNS, "")
        row.update(path=img_rel, split=sp, pixelSizeMm=_fmt(s.pixel_size_mm))
        if s.cup is not None:
            row["maskPath"] = f"masks/{s.id}.png"
            row["cupMaskPath"] = f"masks/{s.id}_cup.png"
            save_png(root / row["maskPath"], s.mask)
            save_png(root / row["cupMaskPath"], s.cup)
        else:
            e = s.ellipse
            row.update(cx=_fmt(e.cx), cy=_fmt(e.cy), a=_fmt(e.a), b=_fmt(e.b), theta=_fmt(e.theta))
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (root / MANIFEST).write_text(buf.getvalue())
    return load_dataset(root, "synthetic").records


def _float_or_none(s: str):
    s = (s or "").strip()
    return float(s) if s else None


def _load_synthetic(root: Path, target: str, errors: list[str]) -> list[SampleRecord]:
    man = root / MANIFEST
    if not man.exists():
        return []
    out = []
    with open(man, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            try:
                img = root / row["path"]
                if not img.exists():
                    raise DatasetError(f"missing image {img}")
                sid = Path(row["path"]).stem
                px = _float_or_none(row.get("pixelSizeMm"))
                split = (row.get("split") or "train").strip()
                if _float_or_none(row.get("a")) is not None:
                    e = Ellipse(*(float(row[k]) for k in ("cx", "cy", "a", "b", "theta")))
                    out.append(SampleRecord(sid, img, ellipse=e, pixel_size_mm=px, split=split))
                    continue
                key = "cupMaskPath" if target == "oc" else "maskPath"
                rel = (row.get(key) or "").strip()
                if not rel:  # unlabelled sample
                    out.append(SampleRecord(sid, img, pixel_size_mm=px, split=split))
                    continue
                mp = root / rel
                if not mp.exists():
                    raise DatasetError(f"missing mask {mp}")
                out.append(SampleRecord(sid, img, mask_path=mp, pixel_size_mm=px, split=split))
            except (DatasetError, KeyError, ValueError) as exc:
                errors.append(f"row {i}: {exc}")
    return out


# ---------------------------------------------------------------------------
# public layouts

def _images_in(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _find(d: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTS:
        for cand in (d / f"{stem}{ext}", d / f"{stem}{ext.upper()}"):
            if cand.exists():
                return cand
    return None


def _load_refuge(root, target, errors):
    codec = "refuge_oc" if target == "oc" else "refuge_od"
    out = []
    for img in _images_in(root / "images"):
        m = _find(root / "masks", img.stem)
        if m is None:
            errors.append(f"{img.name}: no mask in masks/")
            continue
        out.append(SampleRecord(img.stem, img, mask_path=m, mask_codec=codec))
    return out


def _load_drishti(root, target, errors):
    suffix = "cupsegSoftmap" if target == "oc" else "ODsegSoftmap"
    out = []
    for img in _images_in(root / "Images"):
        m = _find(root / "GT" / img.stem / "SoftMap", f"{img.stem}_{suffix}")
        if m is None:
            errors.append(f"{img.name}: no {suffix} soft map")
            continue
        out.append(SampleRecord(img.stem, img, mask_path=m, mask_codec="binary"))
    return out


def _load_rimone(root, target, errors):
    tag = "-cup" if target == "oc" else "-gs"
    out = []
    for img in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTS):
        if img.stem.endswith(("-gs", "-cup")):
            continue
        m = _find(img.parent, img.stem + tag)
        if m is None:
            errors.append(f"{img.relative_to(root)}: no {tag} mask")
            continue
        sid = str(img.relative_to(root).with_suffix("")).replace("/", "_")
        out.append(SampleRecord(sid, img, mask_path=m, mask_codec="nonzero"))
    return out


def ellipse_from_outline(raw: np.ndarray) -> Ellipse:
    """Fit the drawn outline itself, so its line width does not bias the axes."""
    from ..metrics import fit_ellipse_points
    rows, cols = np.nonzero(raw > 127)
    return fit_ellipse_points(np.column_stack([cols, rows])).canonical()


def _read_pixel_sizes(csv_path: Path) -> dict[str, float]:
    sizes = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        try:
            fcol = header.index("filename")
            pcol = next(i for i, h in enumerate(header) if h.startswith("pixel size"))
        except (ValueError, StopIteration):
            raise DatasetError(f"{csv_path.name}: expected 'filename' and 'pixel size(mm)' columns")
        for row in reader:
            if len(row) > max(fcol, pcol):
                sizes[row[fcol].strip()] = float(row[pcol])
    return sizes


def _load_hc18(root, target, errors):
    out = []
    for sub, split in (("training_set", "train"), ("test_set", "test")):
        d = root / sub
        if not d.is_dir():
            continue
        csvs = sorted(root.glob(f"{sub}_pixel_size*.csv")) + sorted(d.glob("*pixel_size*.csv"))
        sizes = _read_pixel_sizes(csvs[0]) if csvs else {}
        if not csvs:
            errors.append(f"{sub}: no pixel-size CSV")
        for img in _images_in(d):
            if img.stem.endswith("_Annotation"):
                continue
            px = sizes.get(img.name)
            if px is None:
                errors.append(f"{img.name}: no pixel size entry")
            ann = _find(d, f"{img.stem}_Annotation")
            if ann is None:
                if split == "train":
                    errors.append(f"{img.name}: missing annotation")
                    continue
                out.append(SampleRecord(img.stem, img, pixel_size_mm=px, split=split))
                continue
            try:
                e = ellipse_from_outline(_load_raw(ann))
            except ValueError as exc:
                errors.append(f"{img.name}: {exc}")
                continue
            out.append(SampleRecord(img.stem, img, ellipse=e, pixel_size_mm=px, split=split))
    return out


_LOADERS = {
    "synthetic": _load_synthetic,
    "refuge": _load_refuge,
    "drishti": _load_drishti,
    "rimone": _load_rimone,
    "hc18": _load_hc18,
}


def load_dataset(root, layout: str = "synthetic", target: str = "od") -> LoadResult:
    """Parse ``root`` according to ``layout``.

    Per-sample problems are collected in ``errors`` and the sample skipped;
    an empty result triggers a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if layout not in _LOADERS:
        raise DatasetError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    if target not in ("od", "oc"):
        raise DatasetError(f"target must be 'od' or 'oc', got {target!r}")
    errors: list[str] = []
    records = _LOADERS[layout](root, target, errors)
    if not records:
        warnings.warn(f"no samples found under {root} for layout {layout!r}", stacklevel=2)
    return LoadResult(records, errors)


# ---------------------------------------------------------------------------
# model-ready arrays

def pad_to_square(img: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Zero-pad bottom/right to a square; returns the array and the pads."""
    h, w = img.shape[:2]
    n = max(h, w)
    pads = [(0, n - h), (0, n - w)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pads), n - h, n - w


def to_chw(img: np.ndarray, channels: int) -> np.ndarray:
    """(H, W[, C]) in [0, 1] to float32 (channels, H, W)."""
    x = np.asarray(img, dtype=np.float32)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape[-1] != channels:
        if channels == 1:
            x = x.mean(axis=-1, keepdims=True)
        elif x.shape[-1] == 1:
            x = np.repeat(x, channels, axis=-1)
        else:
            raise DatasetError(f"cannot map {x.shape[-1]} channels to {channels}")
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


@dataclass
class Prepared:
    id: str
    image: np.ndarray            # (C, S, S) float32
    mask: np.ndarray | None      # (S, S) bool
    pixel_size_mm: float | None
    ellipse: Ellipse | None = None


def prepare(record: SampleRecord, size: int, channels: int = 3, roi: bool = False,
            r_range: tuple[float, float] = (0.06, 0.25), vessel_suppression: bool = False) -> Prepared:
    """Load a record and bring it to ``size`` x ``size``.

    With ``roi`` the optic disc is localized and a 3R box around it is
    resized (fundus). Otherwise the image is zero-padded to a square and
    resized isotropically, and the pixel size is rescaled to match.
    """
    from .localize import RoiBox, extract_roi, localize_od, resize_bilinear
    img = load_image(record.image_path)
    mask = load_mask(record, img.shape[:2])
    px = record.pixel_size_mm
    ell = record.ellipse
    if roi:
        h, w = img.shape[:2]
        m = min(h, w)
        r_lo, r_hi = max(2, int(r_range[0] * m)), max(3, int(r_range[1] * m))
        box: RoiBox = localize_od(img, r_lo, min(r_hi, m // 2), vessel_suppression=vessel_suppression)
        img = extract_roi(img, box, size)
        if mask is not None:
            mask = extract_roi(mask.astype(np.float64), box, size) >= 0.5
        scale = size / box.side
        ell = None
    else:
        img, _, _ = pad_to_square(img)
        scale = size / img.shape[0]
        img = resize_bilinear(img, size)
        if mask is not None:
            mask = resize_bilinear(pad_to_square(mask.astype(np.float64))[0], size) >= 0.5
        if ell is not None:
            # half-pixel-centred resize maps x to (x + 0.5) * s - 0.5
            ell = Ellipse((ell.cx + 0.5) * scale - 0.5, (ell.cy + 0.5) * scale - 0.5,
                          ell.a * scale, ell.b * scale, ell.theta)
    if px is not None and not math.isclose(scale, 1.0):
        px = px / scale
    return Prepared(record.id, to_chw(img, channels), mask, px, ell)

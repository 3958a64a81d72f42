"""Volume ingestion, slice preprocessing, label images, augmentation and pooling."""
from __future__ import annotations

import enum
import gzip
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .errors import (BadMagic, DegenerateVolume, DomainError, EmptyAfterFilter, LabelValueError,
                     ManifestError, ModeError, NiftiError, PolicyViolation, Truncated,
                     UnsupportedDatatype)

SLICE_SIZE = 256
BACKGROUND, BRAIN, LESION = 0, 1, 2
LABEL_GRAY = {BACKGROUND: 0.0, BRAIN: 0.5, LESION: 1.0}
DECODE_THRESHOLDS = (0.25, 0.75)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    brain_mask: np.ndarray | None = None
    lesion_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be positive, got {self.spacing}")
        for name in ("brain_mask", "lesion_mask"):
            mask = getattr(self, name)
            if mask is not None:
                if mask.shape != self.voxels.shape:
                    raise ValueError(f"{name} shape {mask.shape} differs from voxels {self.voxels.shape}")
                setattr(self, name, mask.astype(bool))

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(eq=False)
class SliceRecord:
    image: np.ndarray
    label: np.ndarray | None = None
    dataset: str = ""
    vendor: str = ""
    subject: str = ""
    slice_index: int = 0
    original_shape: tuple = (SLICE_SIZE, SLICE_SIZE)
    validation_only: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != (SLICE_SIZE, SLICE_SIZE):
            raise ValueError(f"slice image must be {SLICE_SIZE}x{SLICE_SIZE}, got {self.image.shape}")
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError("label raster is not aligned with the image")
        self.original_shape = tuple(int(n) for n in self.original_shape)

    @property
    def domain(self) -> str:
        return domain_key(self.dataset, self.vendor)

    @property
    def has_label(self) -> bool:
        return self.label is not None

    def training_label(self) -> np.ndarray:
        """Label for use by a training loop; validation-only labels are refused."""
        if self.validation_only:
            raise PolicyViolation(f"labels of {self.domain}/{self.subject}/{self.slice_index} "
                                  "are reserved for validation")
        if self.label is None:
            raise LabelValueError(f"{self.domain}/{self.subject}/{self.slice_index} has no label")
        return self.label

    def same_as(self, other: "SliceRecord") -> bool:
        if not isinstance(other, SliceRecord):
            return False
        labels_match = (self.label is None and other.label is None) or (
            self.label is not None and other.label is not None and np.array_equal(self.label, other.label))
        return (np.array_equal(self.image, other.image) and labels_match
                and (self.dataset, self.vendor, self.subject, self.slice_index, self.original_shape,
                     self.validation_only, self.provenance)
                == (other.dataset, other.vendor, other.subject, other.slice_index, other.original_shape,
                    other.validation_only, other.provenance))


def domain_key(dataset: str, vendor: str) -> str:
    return f"{dataset}:{vendor}" if vendor else dataset


class DatasetManifest:
    """Slice records grouped by domain key, in insertion order."""

    def __init__(self, domains: dict[str, list[SliceRecord]] | None = None):
        self.domains: dict[str, list[SliceRecord]] = {}
        for key, records in (domains or {}).items():
            self.domains[key] = list(records)

    @classmethod
    def from_records(cls, records: Iterable[SliceRecord]) -> "DatasetManifest":
        m = cls()
        for r in records:
            m.add(r)
        return m

    def add(self, record: SliceRecord):
        self.domains.setdefault(record.domain, []).append(record)

    def records(self, key: str | None = None) -> list[SliceRecord]:
        if key is None:
            return [r for rs in self.domains.values() for r in rs]
        if key not in self.domains:
            raise DomainError(f"unknown domain {key!r}; have {sorted(self.domains)}")
        return self.domains[key]

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.domains.items()}

    def keys(self):
        return list(self.domains)

    def datasets(self):
        return sorted({k.split(":")[0] for k in self.domains})

    def __len__(self):
        return sum(len(v) for v in self.domains.values())

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest) or self.keys() != other.keys():
            return False
        return all(len(a) == len(b) and all(x.same_as(y) for x, y in zip(a, b))
                   for a, b in zip(self.domains.values(), other.domains.values()))

    def __repr__(self):
        return f"DatasetManifest({self.counts()})"


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.9, 1.1)
    rotation_range: tuple = (-10.0, 10.0)
    mirror_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi <= 2):
            raise ValueError(f"scale range must lie in (0, 2], got {self.scale_range}")
        if not 0 <= self.mirror_prob <= 1:
            raise ValueError(f"mirror probability must lie in [0, 1], got {self.mirror_prob}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation range is reversed")


# ---------------------------------------------------------------------------
# NIfTI-1

_DTYPES = {2: "u1", 4: "i2", 16: "f4", 512: "u2"}
_HEADER_SIZE = 348


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume (``.nii`` or ``.nii.gz``)."""
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) < _HEADER_SIZE:
        raise Truncated(f"{path}: header needs {_HEADER_SIZE} bytes, file has {len(raw)}")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"{path}: magic {magic!r} is not NIfTI-1")
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: detached .hdr/.img pairs are not supported")

    # byte order from dim[0], which must lie in 1..7
    for endian in "<>":
        dim = struct.unpack(endian + "8h", raw[40:56])
        if 1 <= dim[0] <= 7:
            break
    else:
        raise BadMagic(f"{path}: dim[0] is not a valid rank in either byte order")
    (datatype,) = struct.unpack(endian + "h", raw[70:72])
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype} is not one of u8/i16/u16/f32")
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, slope, inter = struct.unpack(endian + "3f", raw[108:120])

    shape = tuple(int(d) for d in dim[1:1 + dim[0]])
    if len(shape) < 3:
        shape = shape + (1,) * (3 - len(shape))
    elif len(shape) > 3:
        if math.prod(shape[3:]) != 1:
            raise NiftiError(f"{path}: only single-frame volumes are supported, dims {shape}")
        shape = shape[:3]
    dtype = np.dtype(endian + _DTYPES[datatype])
    count = math.prod(shape)
    start = int(vox_offset) if vox_offset >= _HEADER_SIZE else 352
    payload = raw[start:start + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise Truncated(f"{path}: header declares {count} voxels, payload holds "
                        f"{len(payload) // dtype.itemsize}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F").astype(np.float32)
    if slope != 0 and math.isfinite(slope):
        data = data * np.float32(slope) + np.float32(inter)
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return Volume(data, spacing=spacing, meta={"source": str(path)})


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write a minimal little-endian single-file NIfTI-1 (u8 or f32 payload)."""
    path = Path(path)
    data = np.asarray(data)
    if data.dtype == bool or data.dtype == np.uint8:
        code, arr = 2, data.astype("<u1")
    else:
        code, arr = 16, data.astype("<f4")
    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<2h", hdr, 70, code, arr.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    body = bytes(hdr) + b"\x00" * 4 + arr.tobytes(order="F")
    if path.suffix == ".gz":
        body = gzip.compress(body, mtime=0)
    path.write_bytes(body)
    return path


# ---------------------------------------------------------------------------
# preprocessing

def normalize_volume(v: Volume) -> Volume:
    """Scale intensities into [0, 1] by the volume maximum."""
    inside = v.voxels if v.brain_mask is None else v.voxels[v.brain_mask]
    if inside.size == 0 or not np.any(inside > 0):
        raise DegenerateVolume("volume has no positive intensity inside the brain mask")
    peak = v.voxels.max()
    voxels = np.clip(v.voxels / peak, 0.0, 1.0).astype(np.float32)
    return replace(v, voxels=voxels)


def tri_level_label(brain: np.ndarray, lesion: np.ndarray) -> np.ndarray:
    label = np.where(brain, BRAIN, BACKGROUND).astype(np.uint8)
    label[lesion.astype(bool)] = LESION
    return label


def resample_image(image: np.ndarray, shape) -> np.ndarray:
    # scikit-image defaults: bilinear, anti-aliasing when downsampling
    return np.clip(resize(image.astype(np.float64), shape, preserve_range=True), 0.0, 1.0).astype(np.float32)


def resample_label(label: np.ndarray, shape) -> np.ndarray:
    return resize(label, shape, order=0, preserve_range=True, anti_aliasing=False).astype(label.dtype)


def extract_slices(v: Volume, fraction_threshold: float = 0.10) -> list[SliceRecord]:
    """Axial slices resampled to 256x256, dropping empty and sparse-brain slices.

    A slice survives when its brain pixel count is nonzero and at least
    ``fraction_threshold`` of the largest per-slice count in the volume.
    """
    if v.brain_mask is None:
        raise ValueError("extract_slices needs a brain mask")
    counts = v.brain_mask.sum(axis=(0, 1))
    threshold = fraction_threshold * counts.max()
    keep = [z for z in range(v.shape[2]) if counts[z] > 0 and counts[z] >= threshold]
    if not keep:
        raise EmptyAfterFilter(f"no slice of {v.meta.get('subject', '?')} survives the brain-coverage filter")
    original = v.shape[:2]
    target = (SLICE_SIZE, SLICE_SIZE)
    records = []
    for z in keep:
        label = None
        if v.lesion_mask is not None:
            label = resample_label(tri_level_label(v.brain_mask[:, :, z], v.lesion_mask[:, :, z]), target)
        records.append(SliceRecord(
            image=resample_image(v.voxels[:, :, z], target),
            label=label,
            dataset=v.meta.get("dataset", ""),
            vendor=v.meta.get("vendor", ""),
            subject=str(v.meta.get("subject", "")),
            slice_index=int(z),
            original_shape=original,
        ))
    return records


def restore_shape(s: SliceRecord, image: np.ndarray) -> np.ndarray:
    """Resample a 256x256 raster back to the slice's original in-plane shape."""
    shape = tuple(s.original_shape)
    if image.shape == shape:
        return image.copy()
    if image.dtype.kind in "biu":
        return resample_label(image, shape)
    return resample_image(image, shape)


# ---------------------------------------------------------------------------
# label images

def encode_label_image(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    bad = ~np.isin(label, list(LABEL_GRAY))
    if bad.any():
        raise LabelValueError(f"label values {sorted(set(np.unique(label[bad]).tolist()))} "
                              "are not background/brain/lesion")
    out = np.zeros(label.shape, dtype=np.float32)
    for level, gray in LABEL_GRAY.items():
        out[label == level] = gray
    return out


def decode_label_image(image: np.ndarray) -> np.ndarray:
    lo, hi = DECODE_THRESHOLDS
    out = np.full(image.shape, BRAIN, dtype=np.uint8)
    out[image < lo] = BACKGROUND
    out[image >= hi] = LESION
    return out


# ---------------------------------------------------------------------------
# augmentation

def _affine_about_center(shape, angle_deg, scale):
    """Output->input mapping for rotation+scaling about the raster centre."""
    c = (np.asarray(shape, dtype=float) - 1) / 2
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    inv = rot.T / scale
    return inv, c - inv @ c


def augment_transform_point(point, shape, angle_deg, scale, mirror):
    """Where an input (row, col) lands after :func:`augment`'s transform."""
    p = np.asarray(point, dtype=float)
    if mirror:
        p = np.array([p[0], shape[1] - 1 - p[1]])
    inv, offset = _affine_about_center(shape, angle_deg, scale)
    return np.linalg.solve(inv, p - offset)


def sample_augmentation(cfg: AugmentConfig, rng: np.random.Generator):
    scale = float(rng.uniform(*cfg.scale_range))
    angle = float(rng.uniform(*cfg.rotation_range))
    mirror = bool(rng.random() < cfg.mirror_prob)
    return angle, scale, mirror


def apply_augmentation(image, label, angle, scale, mirror):
    if mirror:
        image = image[:, ::-1]
        label = None if label is None else label[:, ::-1]
    if angle != 0.0 or scale != 1.0:
        inv, offset = _affine_about_center(image.shape, angle, scale)
        image = ndimage.affine_transform(image, inv, offset, order=1, mode="constant", cval=0.0)
        if label is not None:
            label = ndimage.affine_transform(label, inv, offset, order=0, mode="constant", cval=0)
    image = np.ascontiguousarray(np.clip(image, 0.0, 1.0), dtype=np.float32)
    label = None if label is None else np.ascontiguousarray(label)
    return image, label


def augment(s: SliceRecord, cfg: AugmentConfig, rng: np.random.Generator) -> SliceRecord:
    """Random scale, rotation and horizontal mirror, shared by image and label."""
    angle, scale, mirror = sample_augmentation(cfg, rng)
    image, label = apply_augmentation(s.image, s.label, angle, scale, mirror)
    return replace(s, image=image, label=label)


# ---------------------------------------------------------------------------
# pooling

class TranslationMode(str, enum.Enum):
    IMAGE2IMAGE = "image2image"
    SCAN2SCAN = "scan2scan"
    LABEL2IMAGE = "label2image"
    SYN2IMAGE = "syn2image"

    @classmethod
    def parse(cls, value) -> "TranslationMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ModeError(f"unknown translation mode {value!r}; "
                            f"expected one of {[m.value for m in cls]}") from None


def select_domains(manifest: DatasetManifest, selector: str) -> list[str]:
    """Domain keys matching a ``dataset`` or ``dataset:vendor`` selector."""
    if ":" in selector:
        if selector not in manifest.domains:
            raise DomainError(f"unknown domain {selector!r}; have {manifest.keys()}")
        return [selector]
    keys = [k for k in manifest.keys() if k.split(":")[0] == selector]
    if not keys:
        raise DomainError(f"unknown dataset {selector!r}; have {manifest.datasets()}")
    return keys


def label_image_record(r: SliceRecord) -> SliceRecord:
    label = r.training_label()
    return replace(r, image=encode_label_image(label), label=label,
                   provenance={**r.provenance, "encoded_label": True})


def pool_domains(manifest: DatasetManifest, mode, source_sel, target_sel: str):
    """Assemble (source records, target records) for one translation job.

    ``source_sel`` is a dataset or domain selector, except in Syn2Image mode
    where it is the externally supplied sequence of synthetic label records.
    """
    mode = TranslationMode.parse(mode)
    target_keys = select_domains(manifest, target_sel)
    if len(target_keys) != 1:
        raise DomainError(f"target must be a single vendor domain, {target_sel!r} matches {target_keys}")
    target = list(manifest.records(target_keys[0]))

    if mode is TranslationMode.SYN2IMAGE:
        if isinstance(source_sel, str):
            raise DomainError("syn2image needs the synthetic label records as its source")
        source = [label_image_record(r) if not r.provenance.get("encoded_label") else r
                  for r in (source_sel.records() if isinstance(source_sel, DatasetManifest) else source_sel)]
        return source, target

    source_keys = select_domains(manifest, source_sel)
    if mode is TranslationMode.SCAN2SCAN and ":" not in source_sel:
        raise DomainError(f"scan2scan needs a single source vendor, got dataset {source_sel!r}")
    source = [r for k in source_keys for r in manifest.records(k)]
    if mode is TranslationMode.LABEL2IMAGE:
        source = [label_image_record(r) for r in source]
    return source, target


# ---------------------------------------------------------------------------
# manifest files
#
# line 1: {"format": "mraug-manifest", "version": 1}
# then one JSON object per slice record; rasters live next to the manifest as
# raw little-endian f32 (images) and u8 (labels) tiles.

MANIFEST_HEADER = {"format": "mraug-manifest", "version": 1}


def _raster_dir(path: Path) -> Path:
    return path.with_name(path.stem + "_rasters")


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rdir = _raster_dir(path)
    lines = [json.dumps(MANIFEST_HEADER, sort_keys=True)]
    if len(manifest):
        rdir.mkdir(exist_ok=True)
    for i, r in enumerate(manifest.records()):
        image_name = f"{i:06d}.f32"
        r.image.astype("<f4").tofile(rdir / image_name)
        label_name = None
        if r.label is not None:
            label_name = f"{i:06d}.u8"
            r.label.astype("<u1").tofile(rdir / label_name)
        lines.append(json.dumps({
            "domain": r.domain, "dataset": r.dataset, "vendor": r.vendor, "subject": r.subject,
            "slice": r.slice_index, "original_shape": list(r.original_shape),
            "image": f"{rdir.name}/{image_name}",
            "label": None if label_name is None else f"{rdir.name}/{label_name}",
            "validation_only": r.validation_only, "provenance": r.provenance,
        }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def _load_tile(base: Path, rel: str, dtype, lineno: int) -> np.ndarray:
    f = base / rel
    if not f.exists():
        raise ManifestError(f"raster {rel} is missing", line=lineno)
    arr = np.fromfile(f, dtype=dtype)
    if arr.size != SLICE_SIZE * SLICE_SIZE:
        raise ManifestError(f"raster {rel} holds {arr.size} values, expected {SLICE_SIZE ** 2}", line=lineno)
    return arr.reshape(SLICE_SIZE, SLICE_SIZE)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError("empty file, header missing", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"bad header: {e}", line=1) from None
    if header.get("format") != MANIFEST_HEADER["format"]:
        raise ManifestError("not a manifest header", line=1)
    manifest = DatasetManifest()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image = _load_tile(path.parent, rec["image"], "<f4", lineno).astype(np.float32)
            label = None
            if rec.get("label"):
                label = _load_tile(path.parent, rec["label"], "<u1", lineno).astype(np.uint8)
            record = SliceRecord(image=image, label=label, dataset=rec["dataset"], vendor=rec["vendor"],
                                 subject=rec["subject"], slice_index=int(rec["slice"]),
                                 original_shape=tuple(rec["original_shape"]),
                                 validation_only=bool(rec.get("validation_only", False)),
                                 provenance=rec.get("provenance", {}))
            if record.domain != rec["domain"]:
                raise ManifestError(f"domain {rec['domain']!r} disagrees with dataset/vendor", line=lineno)
        except ManifestError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed record: {e}", line=lineno) from None
        manifest.add(record)
    return manifest


def manifest_from_volumes(volumes: Sequence[Volume], fraction_threshold=0.10,
                          validation_only=False) -> DatasetManifest:
    manifest = DatasetManifest()
    for v in volumes:
        for r in extract_slices(v, fraction_threshold):
            r.validation_only = validation_only
            manifest.add(r)
    return manifest


def volumes_from_manifest(manifest: DatasetManifest) -> list[Volume]:
    """Rebuild per-subject label volumes from labeled slice records.

    Only slices present in the manifest are filled; images and labels are
    restored to the original in-plane shape.
    """
    groups: dict[tuple, list[SliceRecord]] = {}
    for r in manifest.records():
        groups.setdefault((r.dataset, r.vendor, r.subject), []).append(r)
    volumes = []
    for (dataset, vendor, subject), recs in groups.items():
        rows, cols = recs[0].original_shape
        depth = max(r.slice_index for r in recs) + 1
        vox = np.zeros((rows, cols, depth), np.float32)
        brain = np.zeros((rows, cols, depth), bool)
        lesion = np.zeros((rows, cols, depth), bool)
        for r in recs:
            vox[:, :, r.slice_index] = restore_shape(r, r.image)
            if r.label is not None:
                lab = restore_shape(r, r.label)
                brain[:, :, r.slice_index] = lab >= BRAIN
                lesion[:, :, r.slice_index] = lab == LESION
        volumes.append(Volume(vox, brain_mask=brain, lesion_mask=lesion,
                              meta={"dataset": dataset, "vendor": vendor, "subject": subject,
                                    "slices": sorted(r.slice_index for r in recs)}))
    return volumes

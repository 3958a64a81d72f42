"""Synthetic two-scanner FLAIR-like phantoms with known lesion labels."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import PhantomError
from .imaging import DatasetManifest, Volume, manifest_from_volumes, normalize_volume

BRAIN_LEVEL = 0.35
LESION_LEVEL = 0.9
TEXTURE_AMPLITUDE = 0.04
# the middle of the ellipsoid is sampled so every emitted slice keeps >= 25% brain area
Z_EXTENT = 0.85


@dataclass(frozen=True)
class DomainStyle:
    gamma: float = 1.0
    contrast: float = 1.0
    noise: str = "gaussian"
    sigma: float = 0.0
    bias_amplitude: float = 0.0
    texture_seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise PhantomError(f"gamma must be positive, got {self.gamma}")
        if not self.contrast > 0:
            raise PhantomError(f"contrast must be positive, got {self.contrast}")
        if self.sigma < 0:
            raise PhantomError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.noise not in ("gaussian", "rician"):
            raise PhantomError(f"noise model must be gaussian or rician, got {self.noise!r}")


@dataclass(frozen=True)
class PhantomSpec:
    subjects: int = 8
    slices_per_subject: int = 20
    lesion_count: tuple = (5, 10)
    lesion_radius: tuple = (4.0, 9.0)
    seed: int = 0
    shape: tuple = (192, 160)
    spacing: tuple = (1.0, 1.0, 3.0)

    def __post_init__(self):
        if self.subjects < 1 or self.slices_per_subject < 1:
            raise PhantomError("subject and slice counts must be >= 1")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise PhantomError(f"bad lesion count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi:
            raise PhantomError(f"bad lesion radius range {self.lesion_radius}")
        if rhi >= min(self.shape) / 2:
            raise PhantomError(f"lesion radius {rhi} exceeds the image bounds {self.shape}")


SOURCE_STYLE = DomainStyle(gamma=1.0, contrast=1.0, noise="gaussian", sigma=0.02,
                           bias_amplitude=0.05, texture_seed=11)
TARGET_STYLE = DomainStyle(gamma=0.5, contrast=0.6, noise="rician", sigma=0.04,
                           bias_amplitude=0.15, texture_seed=23)

# three "vendors" per dataset for multi-domain plans
VENDOR_STYLES = {
    "source": {
        "GE": SOURCE_STYLE,
        "Siemens": DomainStyle(gamma=0.9, contrast=1.1, noise="gaussian", sigma=0.025,
                               bias_amplitude=0.08, texture_seed=12),
        "Philips": DomainStyle(gamma=1.1, contrast=0.95, noise="gaussian", sigma=0.015,
                               bias_amplitude=0.04, texture_seed=13),
    },
    "target": {
        "GE": TARGET_STYLE,
        "Siemens": DomainStyle(gamma=0.6, contrast=0.7, noise="rician", sigma=0.05,
                               bias_amplitude=0.1, texture_seed=24),
        "Philips": DomainStyle(gamma=0.45, contrast=0.55, noise="rician", sigma=0.03,
                               bias_amplitude=0.2, texture_seed=25),
    },
}


def _subject_geometry(spec: PhantomSpec, rng: np.random.Generator):
    rows, cols = spec.shape
    semi = np.array([rows * rng.uniform(0.36, 0.44), cols * rng.uniform(0.34, 0.42)])
    center = np.array([rows / 2 + rng.uniform(-3, 3), cols / 2 + rng.uniform(-3, 3)])
    if spec.lesion_radius[1] >= 0.5 * semi.min():
        raise PhantomError(f"lesion radius {spec.lesion_radius[1]} too large for brain semi-axes {semi}")
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    lesions = []
    for _ in range(n_lesions):
        radius = rng.uniform(*spec.lesion_radius)
        # keep the whole blob inside the brain: stay within 60% of the ellipsoid radius
        for _ in range(100):
            u = rng.uniform(-0.6, 0.6, size=3)
            if np.sum(u ** 2) < 0.36:
                break
        pos = center + u[:2] * semi
        lesions.append((pos, float(u[2]), radius))
    return center, semi, lesions


def _subject_volume(spec: PhantomSpec, style: DomainStyle, subject: int):
    rows, cols = spec.shape
    depth = spec.slices_per_subject
    geo_rng = np.random.default_rng([spec.seed, subject])
    center, semi, lesions = _subject_geometry(spec, geo_rng)

    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    zs = np.linspace(-Z_EXTENT, Z_EXTENT, depth)
    ry = (yy - center[0]) / semi[0]
    rx = (xx - center[1]) / semi[1]
    brain = np.stack([(ry ** 2 + rx ** 2 + z ** 2) < 1.0 for z in zs], axis=-1)

    z_scale = spec.spacing[2] / spec.spacing[0]
    lesion_map = np.zeros(brain.shape)
    lesion_mask = np.zeros(brain.shape, bool)
    zi = np.arange(depth, dtype=np.float64)
    for pos, z, radius in lesions:
        z_center = (z + Z_EXTENT) / (2 * Z_EXTENT) * (depth - 1)
        dz = (zi - z_center) * z_scale
        d = np.sqrt((yy - pos[0])[..., None] ** 2 + (xx - pos[1])[..., None] ** 2 + dz[None, None, :] ** 2)
        lesion_map = np.maximum(lesion_map, 1.0 / (1.0 + np.exp((d - radius) / 0.6)))
        lesion_mask |= d < radius
    lesion_mask &= brain

    tex_rng = np.random.default_rng([style.texture_seed, spec.seed, subject])
    texture = ndimage.gaussian_filter(tex_rng.standard_normal(brain.shape), sigma=(4, 4, 1))
    texture *= TEXTURE_AMPLITUDE / max(texture.std(), 1e-12)

    base = np.where(brain, BRAIN_LEVEL + texture, 0.0)
    base = base + brain * lesion_map * (LESION_LEVEL - BRAIN_LEVEL)
    base = np.clip(base, 0.0, 1.0)

    styled = base ** style.gamma
    if style.contrast != 1.0:
        m = styled[brain].mean()
        styled = np.where(brain, m + style.contrast * (styled - m), styled)
    if style.bias_amplitude:
        direction = tex_rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        ramp = (ry * direction[0] + rx * direction[1]) / 2
        field = 1.0 + style.bias_amplitude * (ramp + 0.5 * (ry ** 2 + rx ** 2) - 0.25)
        styled = styled * field[..., None]
    if style.sigma > 0:
        noise_rng = np.random.default_rng([style.texture_seed, spec.seed, subject, 1])
        n1 = noise_rng.normal(0, style.sigma, brain.shape)
        if style.noise == "rician":
            n2 = noise_rng.normal(0, style.sigma, brain.shape)
            styled = np.sqrt((styled + n1) ** 2 + n2 ** 2)
        else:
            styled = styled + n1
    styled = np.clip(styled, 0.0, None).astype(np.float32)
    return styled, brain, lesion_mask


def phantom_volumes(spec: PhantomSpec, style: DomainStyle, dataset="PH", vendor="A") -> list[Volume]:
    """Normalized phantom volumes, one per subject."""
    volumes = []
    for s in range(spec.subjects):
        vox, brain, lesion = _subject_volume(spec, style, s)
        v = Volume(vox, spacing=tuple(spec.spacing), brain_mask=brain, lesion_mask=lesion,
                   meta={"dataset": dataset, "vendor": vendor, "subject": f"{dataset}-{vendor}-{spec.seed}-{s:03d}"})
        volumes.append(normalize_volume(v))
    return volumes


def make_phantom_domain(spec: PhantomSpec, style: DomainStyle, dataset="PH", vendor="A",
                        validation_only=False) -> DatasetManifest:
    return manifest_from_volumes(phantom_volumes(spec, style, dataset, vendor),
                                 validation_only=validation_only)


def make_domain_pair(spec_a: PhantomSpec, style_a: DomainStyle, spec_b: PhantomSpec, style_b: DomainStyle,
                     key_a=("SRC", "A"), key_b=("TGT", "B")):
    """Source manifest with training labels and target manifest whose labels are validation-only."""
    a = make_phantom_domain(spec_a, style_a, *key_a)
    b = make_phantom_domain(spec_b, style_b, *key_b, validation_only=True)
    return a, b


def brain_mean_intensity(record) -> float:
    """Mean image intensity over the record's brain pixels (needs a label)."""
    return float(record.image[record.label >= 1].mean())


def style_separation_accuracy(a: DatasetManifest, b: DatasetManifest) -> float:
    """Accuracy of the best single threshold on brain-mean intensity."""
    va = np.array([brain_mean_intensity(r) for r in a.records()])
    vb = np.array([brain_mean_intensity(r) for r in b.records()])
    values = np.concatenate([va, vb])
    truth = np.concatenate([np.zeros(len(va)), np.ones(len(vb))])
    best = 0.0
    for t in np.unique(values):
        pred = values >= t
        acc = max(np.mean(pred == truth), np.mean(pred != truth))
        best = max(best, acc)
    return float(best)


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)

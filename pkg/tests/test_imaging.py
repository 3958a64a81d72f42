import gzip
import struct

import numpy as np
import pytest

from mraug import imaging
from mraug.errors import (BadMagic, DegenerateVolume, DomainError, EmptyAfterFilter, LabelValueError,
                          ManifestError, PolicyViolation, Truncated, UnsupportedDatatype)
from mraug.imaging import AugmentConfig, DatasetManifest, SliceRecord, TranslationMode, Volume


def nifti_bytes(data, datatype=16, fmt="<f4", endian="<", slope=0.0, inter=0.0,
                magic=b"n+1\x00", dims=None, pixdim=(2.0, 1.5, 3.0)):
    """Hand-packed NIfTI-1 single file, straight from the header layout."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    d = dims if dims is not None else data.shape
    struct.pack_into(endian + "8h", hdr, 40, len(d), *d, *([1] * (7 - len(d))))
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, np.dtype(fmt).itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "f", hdr, 112, slope)
    struct.pack_into(endian + "f", hdr, 116, inter)
    hdr[344:348] = magic
    return bytes(hdr) + b"\0\0\0\0" + data.astype(fmt).tobytes(order="F")


class TestNifti:
    def test_minimal_f32(self, tmp_path):
        data = np.arange(32, dtype=np.float32).reshape(4, 4, 2)
        p = tmp_path / "v.nii"
        p.write_bytes(nifti_bytes(data))
        v = imaging.load_nifti(p)
        assert v.shape == (4, 4, 2)
        np.testing.assert_array_equal(v.voxels, data)
        assert v.spacing == (2.0, 1.5, 3.0)

    @pytest.mark.parametrize("code,fmt", [(2, "u1"), (4, "<i2"), (512, "<u2")])
    def test_integer_types_with_scaling(self, tmp_path, code, fmt):
        data = np.arange(24).reshape(2, 3, 4)
        p = tmp_path / "v.nii"
        p.write_bytes(nifti_bytes(data, datatype=code, fmt=fmt, slope=2.0, inter=1.0))
        v = imaging.load_nifti(p)
        np.testing.assert_allclose(v.voxels, data * 2.0 + 1.0)

    def test_big_endian(self, tmp_path):
        data = np.linspace(0, 1, 18, dtype=np.float32).reshape(3, 3, 2)
        p = tmp_path / "be.nii"
        p.write_bytes(nifti_bytes(data, fmt=">f4", endian=">"))
        np.testing.assert_array_equal(imaging.load_nifti(p).voxels, data)

    def test_gzip(self, tmp_path):
        data = np.ones((2, 2, 2), np.float32)
        p = tmp_path / "v.nii.gz"
        p.write_bytes(gzip.compress(nifti_bytes(data)))
        assert imaging.load_nifti(p).shape == (2, 2, 2)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "v.nii"
        p.write_bytes(nifti_bytes(np.zeros((2, 2, 2)), magic=b"abcd"))
        with pytest.raises(BadMagic):
            imaging.load_nifti(p)

    def test_unsupported_datatype(self, tmp_path):
        p = tmp_path / "v.nii"
        p.write_bytes(nifti_bytes(np.zeros((2, 2, 2)), datatype=64, fmt="<f8"))
        with pytest.raises(UnsupportedDatatype):
            imaging.load_nifti(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "v.nii"
        p.write_bytes(nifti_bytes(np.zeros((4, 4, 2)), dims=(4, 4, 3)))
        with pytest.raises(Truncated):
            imaging.load_nifti(p)

    def test_writer_roundtrip(self, tmp_path):
        data = np.random.default_rng(0).random((5, 6, 3)).astype(np.float32)
        p = imaging.write_nifti(tmp_path / "w.nii.gz", data, spacing=(1.0, 2.0, 3.0))
        v = imaging.load_nifti(p)
        np.testing.assert_array_equal(v.voxels, data)
        assert v.spacing == (1.0, 2.0, 3.0)


def volume_with_counts(counts, shape=(40, 40)):
    brain = np.zeros(shape + (len(counts),), bool)
    for z, c in enumerate(counts):
        brain.reshape(-1, len(counts))[:c, z] = True
    vox = brain.astype(np.float32) * 0.5
    vox[0, 0, 0] = 1.0
    return Volume(vox, brain_mask=brain, meta={"dataset": "D", "vendor": "V", "subject": "s"})


class TestNormalize:
    def test_simple(self):
        v = Volume(np.array([0.0, 5.0, 10.0]).reshape(1, 1, 3))
        np.testing.assert_array_equal(imaging.normalize_volume(v).voxels.ravel(), [0.0, 0.5, 1.0])

    def test_idempotent_and_order_preserving(self, rng):
        v = Volume(rng.random((8, 9, 4)) * 300)
        n1 = imaging.normalize_volume(v)
        n2 = imaging.normalize_volume(n1)
        assert n1.voxels.max() == 1.0
        np.testing.assert_array_equal(n1.voxels, n2.voxels)
        assert np.argmax(v.voxels) == np.argmax(n1.voxels)
        order = np.argsort(v.voxels, axis=None, kind="stable")
        assert np.all(np.diff(n1.voxels.ravel()[order]) >= 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateVolume):
            imaging.normalize_volume(Volume(np.zeros((2, 2, 2))))

    def test_degenerate_inside_mask(self):
        vox = np.zeros((2, 2, 2))
        vox[0, 0, 0] = 1
        mask = np.zeros((2, 2, 2), bool)
        mask[1, 1, 1] = True
        with pytest.raises(DegenerateVolume):
            imaging.normalize_volume(Volume(vox, brain_mask=mask))


class TestExtractSlices:
    def test_count_rule(self):
        recs = imaging.extract_slices(volume_with_counts([1000, 500, 50]))
        # 50 < 0.1 * 1000
        assert [r.slice_index for r in recs] == [0, 1]

    def test_empty_slice_dropped(self):
        recs = imaging.extract_slices(volume_with_counts([300, 200, 0]))
        assert [r.slice_index for r in recs] == [0, 1]

    def test_output_raster_and_shape_record(self):
        v = volume_with_counts([900, 900], shape=(128, 128))
        recs = imaging.extract_slices(v)
        assert all(r.image.shape == (256, 256) for r in recs)
        assert recs[0].original_shape == (128, 128)
        assert recs[0].domain == "D:V"

    def test_never_below_threshold(self, rng):
        counts = rng.integers(0, 1500, size=12).tolist()
        v = volume_with_counts(counts)
        kept = {r.slice_index for r in imaging.extract_slices(v, 0.1)}
        m = max(counts)
        assert kept == {z for z, c in enumerate(counts) if c > 0 and c >= 0.1 * m}

    def test_nothing_survives(self):
        v = Volume(np.ones((4, 4, 2)), brain_mask=np.zeros((4, 4, 2), bool))
        with pytest.raises(EmptyAfterFilter):
            imaging.extract_slices(v)

    def test_labels_nearest_and_lesion_within_brain(self):
        v = volume_with_counts([1600, 1600])
        lesion = np.zeros_like(v.brain_mask)
        lesion[10:14, 10:14, :] = True
        v.lesion_mask = lesion
        rec = imaging.extract_slices(v)[0]
        assert set(np.unique(rec.label)) <= {0, 1, 2}
        assert (rec.label == 2).sum() > 0

    def test_top_and_bottom_slices_dropped_on_ellipsoid(self):
        z = np.linspace(-1.2, 1.2, 25)
        yy, xx = np.mgrid[-1:1:64j, -1:1:64j]
        brain = np.stack([(yy ** 2 + xx ** 2 + zz ** 2) < 1 for zz in z], axis=-1)
        v = Volume(brain.astype(np.float32), brain_mask=brain)
        kept = [r.slice_index for r in imaging.extract_slices(v)]
        assert kept == list(range(kept[0], kept[-1] + 1))
        assert kept[0] > 0 and kept[-1] < 24


def smooth_phantom(shape):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    cy, cx = shape[0] / 2, shape[1] / 2
    return np.exp(-(((yy - cy) / (shape[0] / 3)) ** 2 + ((xx - cx) / (shape[1] / 3)) ** 2)).astype(np.float32)


class TestRestoreShape:
    def test_identity_at_256(self):
        img = smooth_phantom((256, 256))
        rec = SliceRecord(image=img)
        np.testing.assert_array_equal(imaging.restore_shape(rec, img), img)

    def test_shape_contract(self):
        rec = SliceRecord(image=np.zeros((256, 256), np.float32), original_shape=(232, 256))
        assert imaging.restore_shape(rec, rec.image).shape == (232, 256)

    @pytest.mark.parametrize("shape", [(232, 256), (128, 128), (300, 220)])
    def test_roundtrip_error_bounded(self, shape):
        orig = smooth_phantom(shape)
        up = imaging.resample_image(orig, (256, 256))
        rec = SliceRecord(image=up, original_shape=shape)
        back = imaging.restore_shape(rec, up)
        again = imaging.resample_image(back, (256, 256))
        assert np.abs(again - up).mean() < 0.05

    def test_label_stays_categorical(self):
        lab = np.zeros((256, 256), np.uint8)
        lab[50:200, 60:190] = 1
        lab[100:120, 100:120] = 2
        rec = SliceRecord(image=np.zeros((256, 256), np.float32), original_shape=(180, 200))
        assert set(np.unique(imaging.restore_shape(rec, lab))) == {0, 1, 2}


class TestLabelImage:
    def test_background(self):
        assert not imaging.encode_label_image(np.zeros((4, 4), np.uint8)).any()

    def test_levels(self):
        out = imaging.encode_label_image(np.array([[0, 1, 2]]))
        assert out.tolist() == [[0.0, 0.5, 1.0]]

    def test_bijection(self, rng):
        lab = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        np.testing.assert_array_equal(imaging.decode_label_image(imaging.encode_label_image(lab)), lab)

    def test_unknown_value(self):
        with pytest.raises(LabelValueError):
            imaging.encode_label_image(np.array([[0, 3]]))


def lesion_slice():
    img = np.zeros((256, 256), np.float32)
    lab = np.zeros((256, 256), np.uint8)
    yy, xx = np.mgrid[0:256, 0:256]
    brain = ((yy - 128) / 100.0) ** 2 + ((xx - 128) / 80.0) ** 2 < 1
    lesion = (yy - 90) ** 2 + (xx - 170) ** 2 < 8 ** 2
    img[brain] = 0.4
    img[lesion] = 1.0
    lab[brain] = 1
    lab[lesion] = 2
    return SliceRecord(image=img, label=lab)


class TestAugment:
    def test_identity(self, rng):
        s = lesion_slice()
        cfg = AugmentConfig(scale_range=(1, 1), rotation_range=(0, 0), mirror_prob=0)
        out = imaging.augment(s, cfg, rng)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.label, s.label)

    def test_mirror_involution(self, rng):
        s = lesion_slice()
        cfg = AugmentConfig(scale_range=(1, 1), rotation_range=(0, 0), mirror_prob=1)
        once = imaging.augment(s, cfg, rng)
        np.testing.assert_array_equal(once.image, s.image[:, ::-1])
        twice = imaging.augment(once, cfg, rng)
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.label, s.label)

    @pytest.mark.parametrize("seed", range(6))
    def test_label_image_alignment(self, seed):
        s = lesion_slice()
        cfg = AugmentConfig(scale_range=(0.8, 1.2), rotation_range=(-30, 30), mirror_prob=0.5)
        r = np.random.default_rng(seed)
        angle, scale, mirror = imaging.sample_augmentation(cfg, np.random.default_rng(seed))
        out = imaging.augment(s, cfg, r)
        assert out.image.shape == (256, 256) and out.label.shape == (256, 256)
        expected = imaging.augment_transform_point((90, 170), (256, 256), angle, scale, mirror)
        lab_c = np.argwhere(out.label == 2).mean(axis=0)
        img_c = np.argwhere(out.image > 0.7).mean(axis=0)
        assert np.linalg.norm(lab_c - expected) < 1.0
        assert np.linalg.norm(img_c - expected) < 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(scale_range=(0.5, 2.5))
        with pytest.raises(ValueError):
            AugmentConfig(mirror_prob=1.5)


def table1_manifest():
    img = np.zeros((256, 256), np.float32)
    lab = np.zeros((256, 256), np.uint8)
    m = DatasetManifest()
    for vendor, n in (("GE", 538), ("Siemens", 554), ("Philips", 603)):
        for i in range(n):
            m.add(SliceRecord(image=img, label=lab, dataset="MICCAI", vendor=vendor, slice_index=i))
    for vendor, n in (("GE", 341), ("Siemens", 574), ("Philips", 767)):
        for i in range(n):
            m.add(SliceRecord(image=img, label=lab, dataset="CAIN", vendor=vendor, slice_index=i,
                              validation_only=True))
    return m


class TestPoolDomains:
    def test_image2image(self):
        src, tgt = imaging.pool_domains(table1_manifest(), "image2image", "MICCAI", "CAIN:GE")
        assert (len(src), len(tgt)) == (1695, 341)

    def test_scan2scan(self):
        src, tgt = imaging.pool_domains(table1_manifest(), TranslationMode.SCAN2SCAN, "MICCAI:GE", "CAIN:GE")
        assert (len(src), len(tgt)) == (538, 341)

    def test_label2image_encodes(self):
        src, _ = imaging.pool_domains(table1_manifest(), "label2image", "MICCAI", "CAIN:Philips")
        assert len(src) == 1695
        assert src[0].provenance["encoded_label"]

    def test_label2image_refuses_validation_labels(self):
        with pytest.raises(PolicyViolation):
            imaging.pool_domains(table1_manifest(), "label2image", "CAIN", "CAIN:GE")

    def test_syn2image(self):
        lab = np.zeros((256, 256), np.uint8)
        syn = [SliceRecord(image=np.zeros((256, 256), np.float32), label=lab, dataset="SYN") for _ in range(50)]
        src, tgt = imaging.pool_domains(table1_manifest(), "syn2image", syn, "CAIN:Siemens")
        assert (len(src), len(tgt)) == (50, 574)

    def test_unknown(self):
        m = table1_manifest()
        with pytest.raises(DomainError):
            imaging.pool_domains(m, "image2image", "MICCAI", "CAIN:Toshiba")
        with pytest.raises(DomainError):
            imaging.pool_domains(m, "scan2scan", "MICCAI", "CAIN:GE")
        with pytest.raises(Exception):
            imaging.pool_domains(m, "paint2image", "MICCAI", "CAIN:GE")


def small_manifest(rng):
    m = DatasetManifest()
    for key, n in (("A", 2), ("B", 3), ("C", 1)):
        for i in range(n):
            lab = rng.integers(0, 3, (256, 256)).astype(np.uint8) if n != 3 else None
            m.add(SliceRecord(image=rng.random((256, 256)).astype(np.float32), label=lab, dataset="X",
                              vendor=key, subject=f"s{i}", slice_index=i, original_shape=(200, 180),
                              validation_only=(key == "C"), provenance={"mode": "phantom"}))
    return m


class TestManifestIO:
    def test_roundtrip(self, tmp_path, rng):
        m = small_manifest(rng)
        back = imaging.read_manifest(imaging.write_manifest(tmp_path / "m.jsonl", m))
        assert back == m
        assert back.counts() == {"X:A": 2, "X:B": 3, "X:C": 1}

    def test_empty(self, tmp_path):
        p = imaging.write_manifest(tmp_path / "e.jsonl", DatasetManifest())
        assert len(p.read_text().splitlines()) == 1
        assert len(imaging.read_manifest(p)) == 0

    def test_malformed_line_number(self, tmp_path, rng):
        p = imaging.write_manifest(tmp_path / "m.jsonl", small_manifest(rng))
        lines = p.read_text().splitlines()
        lines[3] = '{"domain": "X:B"'
        p.write_text("\n".join(lines))
        with pytest.raises(ManifestError) as exc:
            imaging.read_manifest(p)
        assert exc.value.line == 4

    def test_missing_raster(self, tmp_path, rng):
        p = imaging.write_manifest(tmp_path / "m.jsonl", small_manifest(rng))
        next((tmp_path / "m_rasters").glob("*.f32")).unlink()
        with pytest.raises(ManifestError):
            imaging.read_manifest(p)

import os

import numpy as np
import pytest

from aceseg import ConfigError, FormatError, PairingError
from aceseg.data import (
    IGNORE_INDEX,
    SceneDataset,
    SceneSpec,
    augment,
    generate_scene,
    hflip_pair,
    image_path,
    label_path,
    load_pair,
    read_manifest,
    save_pair,
    write_dataset,
    write_manifest,
)


class ForcedRng:
    """Deterministic stand-in driving exact augmentation decisions."""

    def __init__(self, flip=False, scale=1.0, offsets=0):
        self._flip = flip
        self._scale = scale
        self._offsets = offsets

    def random(self):
        return 0.0 if self._flip else 1.0

    def uniform(self, lo, hi):
        return self._scale

    def integers(self, lo, hi):
        return min(self._offsets, hi - 1)


class TestSceneSpec:
    def test_requires_two_classes(self):
        with pytest.raises(ConfigError):
            SceneSpec(classes=1)

    def test_requires_4x_size_span(self):
        with pytest.raises(ConfigError):
            SceneSpec(min_size=16, max_size=48)


class TestGenerateScene:
    def test_deterministic(self):
        spec = SceneSpec(seed=7)
        a_img, a_lbl = generate_scene(spec, 3)
        b_img, b_lbl = generate_scene(spec, 3)
        assert a_img.tobytes() == b_img.tobytes()
        assert a_lbl.tobytes() == b_lbl.tobytes()

    def test_different_indices_differ(self):
        spec = SceneSpec(seed=7)
        a, _ = generate_scene(spec, 0)
        b, _ = generate_scene(spec, 1)
        assert a.tobytes() != b.tobytes()

    def test_two_class_circle_histogram(self):
        spec = SceneSpec(classes=2, shapes=1, seed=11)
        # scan seeds until the single shape drawn is a circle
        for idx in range(50):
            rng = np.random.default_rng([spec.seed, idx])
            rng.integers(1, 2)
            if int(rng.integers(0, 3)) == 1:
                _, label = generate_scene(spec, idx)
                assert set(np.unique(label)) == {0, 1}
                return
        pytest.fail("no circle scene found in 50 indices")

    def test_labels_always_in_range(self):
        spec = SceneSpec(classes=4, seed=5)
        for i in range(20):
            _, label = generate_scene(spec, i)
            values = set(np.unique(label))
            assert values <= set(range(4)) | {IGNORE_INDEX}
            assert IGNORE_INDEX not in values  # generator never emits ignore

    def test_image_on_8bit_grid_in_unit_range(self):
        image, _ = generate_scene(SceneSpec(seed=1), 0)
        assert image.min() >= 0.0 and image.max() <= 1.0
        np.testing.assert_array_equal(np.round(image * 255), image * 255)

    def test_foreground_class_frequencies_symmetric(self):
        # classes are drawn uniformly, so by symmetry each foreground class
        # should hold an equal share of foreground pixels over many scenes
        spec = SceneSpec(classes=4, seed=123)
        counts = np.zeros(4, dtype=np.int64)
        for i in range(1000):
            _, label = generate_scene(spec, i)
            counts += np.bincount(label.reshape(-1), minlength=4)
        fg = counts[1:]
        share = fg / fg.sum()
        np.testing.assert_allclose(share, 1 / 3, rtol=0.2)


class TestAugment:
    def test_flip_is_involution(self):
        image, label = generate_scene(SceneSpec(seed=2), 0)
        f_img, f_lbl = hflip_pair(*hflip_pair(image, label))
        assert f_img.tobytes() == image.tobytes()
        assert f_lbl.tobytes() == label.tobytes()

    def test_forced_flip_twice_restores_pair(self):
        image, label = generate_scene(SceneSpec(seed=2), 1)
        once = augment(image, label, 64, 1.0, 1.0, ForcedRng(flip=True))
        twice = augment(once[0], once[1], 64, 1.0, 1.0, ForcedRng(flip=True))
        assert twice[0].tobytes() == image.tobytes()
        assert twice[1].tobytes() == label.tobytes()

    def test_neutral_parameters_are_identity(self):
        image, label = generate_scene(SceneSpec(seed=3), 0)
        out_img, out_lbl = augment(image, label, 64, 1.0, 1.0, ForcedRng(flip=False))
        assert out_img.tobytes() == image.tobytes()
        assert out_lbl.tobytes() == label.tobytes()

    @pytest.mark.parametrize("scale", [0.5, 0.9, 1.7, 2.0])
    def test_output_always_crop_sized(self, scale):
        image, label = generate_scene(SceneSpec(seed=4), 0)
        out_img, out_lbl = augment(image, label, 64, scale, scale,
                                   np.random.default_rng(0))
        assert out_img.shape == (3, 64, 64)
        assert out_lbl.shape == (64, 64)

    def test_downscale_pads_with_ignore(self):
        image, label = generate_scene(SceneSpec(seed=5), 0)
        _, out_lbl = augment(image, label, 64, 0.5, 0.5,
                             ForcedRng(flip=False, scale=0.5))
        assert (out_lbl == IGNORE_INDEX).sum() == 64 * 64 - 32 * 32

    def test_label_set_preserved(self):
        spec = SceneSpec(seed=6)
        rng = np.random.default_rng(9)
        for i in range(10):
            image, label = generate_scene(spec, i)
            _, out_lbl = augment(image, label, 64, 0.5, 2.0, rng)
            allowed = set(np.unique(label)) | {IGNORE_INDEX}
            assert set(np.unique(out_lbl)) <= allowed


class TestPnmIO:
    def test_roundtrip_identical(self, tmp_path):
        image, label = generate_scene(SceneSpec(seed=8), 0)
        save_pair(str(tmp_path), 0, image, label)
        r_img, r_lbl = load_pair(str(tmp_path), 0)
        assert r_img.tobytes() == image.tobytes()
        assert r_lbl.tobytes() == label.tobytes()

    def test_ppm_header_bytes(self, tmp_path):
        image = np.zeros((3, 64, 64), dtype=np.float32)
        label = np.zeros((64, 64), dtype=np.uint8)
        save_pair(str(tmp_path), 0, image, label)
        raw = open(image_path(str(tmp_path), 0), "rb").read()
        header = b"P6\n64 64\n255\n"
        assert raw.startswith(header)
        assert len(raw) == len(header) + 64 * 64 * 3

    def test_malformed_magic_rejected(self, tmp_path):
        image, label = generate_scene(SceneSpec(seed=8), 0)
        save_pair(str(tmp_path), 0, image, label)
        path = image_path(str(tmp_path), 0)
        raw = bytearray(open(path, "rb").read())
        raw[1] = ord("7")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            load_pair(str(tmp_path), 0)

    def test_truncated_payload_rejected(self, tmp_path):
        image, label = generate_scene(SceneSpec(seed=8), 0)
        save_pair(str(tmp_path), 0, image, label)
        path = label_path(str(tmp_path), 0)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-5])
        with pytest.raises(FormatError):
            load_pair(str(tmp_path), 0)

    def test_size_mismatch_is_pairing_error(self, tmp_path):
        image, label = generate_scene(SceneSpec(seed=8), 0)
        save_pair(str(tmp_path), 0, image, label)
        small = np.zeros((32, 32), dtype=np.uint8)
        from aceseg.data import _write_pnm
        _write_pnm(label_path(str(tmp_path), 0), b"P5", small)
        with pytest.raises(PairingError):
            load_pair(str(tmp_path), 0)

    def test_out_of_range_label_loads_fine(self, tmp_path):
        # a 200 label is structurally valid; the loss rejects it later
        image = np.zeros((3, 16, 16), dtype=np.float32)
        label = np.full((16, 16), 200, dtype=np.uint8)
        save_pair(str(tmp_path), 0, image, label)
        _, loaded = load_pair(str(tmp_path), 0)
        assert loaded.max() == 200

    def test_comments_in_header_tolerated(self, tmp_path):
        path = os.path.join(str(tmp_path), "c.pgm")
        payload = bytes(range(16))
        open(path, "wb").write(b"P5\n# a comment\n4 4\n255\n" + payload)
        from aceseg.data import _read_pnm
        arr = _read_pnm(path, b"P5")
        assert arr.shape == (4, 4)


class TestDatasetAndManifest:
    def test_write_dataset_and_manifest(self, tmp_path):
        root = str(tmp_path)
        write_dataset(root, SceneSpec(canvas=32, classes=3, min_size=4,
                                      max_size=24, seed=1), 5)
        info = read_manifest(root)
        assert info == {"count": 5, "classes": 3, "size": 32, "seed": 1}
        ds = SceneDataset(root)
        assert len(ds) == 5
        image, label = ds.pair(2)
        assert image.shape == (3, 32, 32)
        assert label.shape == (32, 32)

    def test_manifest_missing_key_rejected(self, tmp_path):
        write_manifest(str(tmp_path), 5, 4, 64, 0)
        path = os.path.join(str(tmp_path), "manifest.txt")
        open(path, "w").write("count=5 classes=4 size=64\n")
        with pytest.raises(FormatError):
            read_manifest(str(tmp_path))

    def test_split_deterministic(self, tmp_path):
        root = str(tmp_path)
        write_dataset(root, SceneSpec(canvas=16, min_size=2, max_size=12, seed=2), 10)
        ds = SceneDataset(root)
        train, val = ds.split(2)
        assert train == list(range(8))
        assert val == [8, 9]
        with pytest.raises(ConfigError):
            ds.split(10)

    def test_pairs_cached(self, tmp_path):
        root = str(tmp_path)
        write_dataset(root, SceneSpec(canvas=16, min_size=2, max_size=12, seed=3), 2)
        ds = SceneDataset(root)
        a = ds.pair(0)
        b = ds.pair(0)
        assert a[0] is b[0]

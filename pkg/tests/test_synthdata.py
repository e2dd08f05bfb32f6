import math

import numpy as np
import pytest

from corrpm.supervision import derive_edges
from corrpm.synthdata import (
    KEYPOINT_PARTS,
    DatasetError,
    GeneratorConfig,
    apply_transform,
    augment,
    dataset_config,
    generate,
    generate_many,
    keypoint_pixel,
    read_dataset,
    read_manifest,
    samples_equal,
    transform_point,
    write_dataset,
)

CFG = GeneratorConfig()


@pytest.fixture(scope="module")
def samples():
    return generate_many(CFG, range(40))


def test_deterministic():
    assert samples_equal(generate(CFG, 17), generate(CFG, 17))
    assert not samples_equal(generate(CFG, 17), generate(CFG, 18))


def test_label_range_and_shapes(samples):
    for s in samples:
        assert s.image.shape == (3, 64, 64) and s.mask.shape == (64, 64)
        assert s.mask.max() < CFG.q
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_keypoints_inside_own_part(samples):
    for s in samples:
        for p, part in zip(s.keypoints, KEYPOINT_PARTS):
            r, c = keypoint_pixel(p)
            assert p.visible and s.mask[r, c] == part


def test_edges_derived(samples):
    for s in samples:
        assert np.array_equal(s.edges, derive_edges(s.mask))


def test_class_balance():
    masks = [generate(CFG, seed).mask for seed in range(1000)]
    for c in range(CFG.q):
        assert np.mean([np.any(m == c) for m in masks]) >= 0.95


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(canvas=(60, 64))
    with pytest.raises(ValueError):
        GeneratorConfig(j=0)
    assert len(generate(GeneratorConfig(j=3), 0).keypoints) == 3


class TestAugment:
    def test_identity(self, samples):
        s = samples[0]
        out = apply_transform(s, 0.0, False, 1.0)
        assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)
        assert out.keypoints == s.keypoints and np.array_equal(out.edges, s.edges)

    def test_flip_involution(self, samples):
        for s in samples:
            twice = apply_transform(apply_transform(s, 0.0, True, 1.0), 0.0, True, 1.0)
            assert np.array_equal(twice.mask, s.mask)
            assert twice.keypoints == s.keypoints

    def test_flip_swaps_sides(self, samples):
        s = samples[1]
        f = apply_transform(s, 0.0, True, 1.0)
        assert np.count_nonzero(f.mask == 3) == np.count_nonzero(s.mask == 4)
        # the figure's left hand becomes its right hand, mirrored
        assert f.keypoints[2].x == 63 - s.keypoints[1].x and f.keypoints[2].y == s.keypoints[1].y

    def test_rotation_matches_affine_oracle(self):
        angle, scale = 90.0, 1.0
        x, y = 40.25, 12.5
        # two quarter turns about the centre equal a point reflection
        x1, y1 = transform_point(x, y, (64, 64), angle, False, scale)
        x2, y2 = transform_point(x1, y1, (64, 64), angle, False, scale)
        assert math.isclose(x2, 63 - x, abs_tol=1e-12) and math.isclose(y2, 63 - y, abs_tol=1e-12)
        t = np.deg2rad(30.0)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        want = np.array([31.5, 31.5]) + 1.2 * rot @ (np.diag([-1.0, 1.0]) @ (np.array([x, y]) - 31.5))
        got = transform_point(x, y, (64, 64), 30.0, True, 1.2)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rotated_mask_consistent(self, samples):
        s = samples[2]
        out = apply_transform(s, 90.0, False, 1.0)
        # a quarter turn on a square grid is an exact pixel permutation
        assert np.array_equal(out.mask, np.rot90(s.mask, k=-1))

    def test_random_augment_invariants(self, samples):
        for i, s in enumerate(samples[:10]):
            a = augment(s, seed=i)
            assert np.array_equal(a.edges, derive_edges(a.mask))
            assert -60 <= a.meta["augment"]["angle"] <= 60
            assert 0.75 <= a.meta["augment"]["scale"] <= 1.25
            for p, part in zip(a.keypoints, KEYPOINT_PARTS):
                if p.visible:
                    r, c = keypoint_pixel(p)
                    assert 0 <= r < 64 and 0 <= c < 64 and a.mask[r, c] == part


class TestDatasetIO:
    def test_roundtrip(self, samples, tmp_path):
        write_dataset(samples[:10], tmp_path, CFG)
        back = read_dataset(tmp_path)
        assert len(back) == 10
        assert all(samples_equal(a, b) for a, b in zip(samples[:10], back))
        assert dataset_config(tmp_path) == CFG

    def test_manifest_count(self, samples, tmp_path):
        write_dataset(samples[:4], tmp_path)
        manifest = read_manifest(tmp_path)
        dirs = [p for p in tmp_path.iterdir() if p.is_dir()]
        assert manifest["count"] == len(dirs) == 4

    def test_corrupt_byte_rejected(self, samples, tmp_path):
        write_dataset(samples[:2], tmp_path)
        blob = tmp_path / "sample_00001" / "image.cpmt"
        data = bytearray(blob.read_bytes())
        data[100] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(DatasetError, match="sample_00001/image.cpmt"):
            read_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetError, match="manifest"):
            read_dataset(tmp_path)

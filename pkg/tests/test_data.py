"""Datasets, the IDX reader and the image/point writers."""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from pagan.config import TrainConfig
from pagan.data import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, Dataset, GaussianRingSpec,
                        RingClassifier, find_mnist, gaussian_ring, image_grid, interleave,
                        load_dataset, load_mnist_idx, mode_coverage, parse_idx, pixels_to_unit,
                        read_pnm, shapes_dataset, to_bytes, write_idx, write_image_grid,
                        write_points)
from pagan.errors import FormatError

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist"


def idx_blob(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


class TestIdxParser:
    def test_valid(self):
        dims, arr = parse_idx(idx_blob(IDX_IMAGES_MAGIC, (2, 2, 2), range(8)), IDX_IMAGES_MAGIC, "images")
        assert dims == (2, 2, 2) and arr[1, 1, 1] == 7

    @pytest.mark.parametrize("blob,field", [
        (b"\x00\x00", "images.magic"),
        (idx_blob(IDX_LABELS_MAGIC, (1,), [0]), "images.magic"),
        (struct.pack(">I", IDX_IMAGES_MAGIC) + b"\x00\x00\x00\x01", "images.dims"),
        (idx_blob(IDX_IMAGES_MAGIC, (2, 2, 2), range(7)), "images.payload"),
        (idx_blob(IDX_IMAGES_MAGIC, (1, 1, 1), range(2)), "images.payload"),
    ])
    def test_errors_name_field(self, blob, field):
        with pytest.raises(FormatError) as info:
            parse_idx(blob, IDX_IMAGES_MAGIC, "images")
        assert info.value.field == field

    def test_pixel_endpoints(self):
        v = pixels_to_unit(np.array([0, 255], dtype=np.uint8))
        assert v[0] == -1.0 and v[1] == 1.0 and v.dtype == np.float32

    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_round_trip(self, tmp_path, rng, suffix):
        images = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
        labels = np.arange(5, dtype=np.uint8)
        write_idx(tmp_path / f"im{suffix}", images, IDX_IMAGES_MAGIC)
        write_idx(tmp_path / f"lb{suffix}", labels, IDX_LABELS_MAGIC)
        ds = load_mnist_idx(tmp_path / f"im{suffix}", tmp_path / f"lb{suffix}")
        assert ds.items.shape == (5, 1, 4, 3)
        np.testing.assert_array_equal(ds.items[:, 0], pixels_to_unit(images))
        np.testing.assert_array_equal(ds.labels, np.arange(5))

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "im", np.zeros((3, 2, 2)), IDX_IMAGES_MAGIC)
        write_idx(tmp_path / "lb", np.zeros(2), IDX_LABELS_MAGIC)
        with pytest.raises(FormatError) as info:
            load_mnist_idx(tmp_path / "im", tmp_path / "lb")
        assert info.value.field == "count"

    def test_gzip_detected_by_content(self, tmp_path):
        blob = idx_blob(IDX_LABELS_MAGIC, (3,), [1, 2, 3])
        with gzip.open(tmp_path / "labels.bin", "wb") as f:
            f.write(blob)
        write_idx(tmp_path / "im", np.zeros((3, 1, 1)), IDX_IMAGES_MAGIC)
        assert load_mnist_idx(tmp_path / "im", tmp_path / "labels.bin").labels.tolist() == [1, 2, 3]

    def test_find_prefers_train(self, tmp_path):
        for prefix in ("train", "t10k"):
            write_idx(tmp_path / f"{prefix}-images-idx3-ubyte", np.zeros((1, 1, 1)), IDX_IMAGES_MAGIC)
            write_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", np.zeros(1), IDX_LABELS_MAGIC)
        assert find_mnist(tmp_path)[0].name.startswith("train")

    def test_find_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            find_mnist(tmp_path)


@pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST files not present")
class TestBundledMnist:
    def test_load(self):
        ds = load_dataset(TrainConfig(dataset="mnist", data_dir=str(MNIST_DIR)))
        assert ds.items.shape == (10000, 1, 28, 28)
        assert ds.items.min() == -1.0 and ds.items.max() == 1.0
        assert sorted(np.unique(ds.labels)) == list(range(10))

    def test_limit(self):
        ds = load_dataset(TrainConfig(dataset="mnist", data_dir=str(MNIST_DIR), n_data=100))
        assert len(ds) == 100


class TestRing:
    def test_statistics(self):
        spec = GaussianRingSpec()
        ds = gaussian_ring(spec, np.random.default_rng(0))
        assert ds.items.shape == (10000, 2)
        radii = np.linalg.norm(ds.items, axis=1)
        assert abs(radii.mean() - 2.0) < 0.01
        frac, covered = mode_coverage(ds.items, spec)
        assert covered == 8
        # 3-std disc of a 2-D Gaussian holds 1 - exp(-4.5) of each mode
        assert abs(frac.sum() - (1 - np.exp(-4.5))) < 0.01

    def test_single_mode_at_origin(self):
        spec = GaussianRingSpec(modes=1, radius=0.0, std=0.3, n=20000)
        pts = gaussian_ring(spec, np.random.default_rng(1)).items.astype(np.float64)
        assert np.all(np.abs(pts.mean(axis=0)) < 3 * 0.3 / np.sqrt(spec.n))

    def test_mode_counts_multinomial(self):
        spec = GaussianRingSpec(n=100_000)
        labels = gaussian_ring(spec, np.random.default_rng(2)).labels
        counts = np.bincount(labels, minlength=8)
        sd = np.sqrt(spec.n * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - spec.n / 8) < 4 * sd)

    def test_vanishing_std(self):
        spec = GaussianRingSpec(std=1e-9, n=1000)
        ds = gaussian_ring(spec, np.random.default_rng(3))
        d = np.linalg.norm(ds.items - spec.centers()[ds.labels], axis=1)
        assert np.all(d < 1e-6)

    def test_collapsed_generator(self):
        spec = GaussianRingSpec()
        points = np.tile(spec.centers()[2], (1000, 1))
        frac, covered = mode_coverage(points, spec)
        assert covered == 1 and frac[2] == 1.0

    def test_two_percent_threshold(self):
        spec = GaussianRingSpec()
        c = spec.centers()
        points = np.concatenate([np.tile(c[0], (979, 1)), np.tile(c[1], (21, 1))])
        assert mode_coverage(points, spec)[1] == 2
        points = np.concatenate([np.tile(c[0], (981, 1)), np.tile(c[1], (19, 1))])
        assert mode_coverage(points, spec)[1] == 1

    def test_classifier(self):
        spec = GaussianRingSpec()
        p = RingClassifier(spec).predict_proba(spec.centers())
        np.testing.assert_allclose(p, np.eye(8), atol=1e-12)
        far = RingClassifier(spec).predict_proba(np.array([[100.0, 0.0]]))
        assert np.isfinite(far).all() and abs(far.sum() - 1) < 1e-12

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            GaussianRingSpec(std=0.0)


class TestShapes:
    def test_values(self):
        ds = shapes_dataset(200, 16, np.random.default_rng(0))
        assert ds.items.shape == (200, 1, 16, 16)
        assert set(np.unique(ds.items)) == {-1.0, 1.0}
        assert set(np.unique(ds.labels)) == {0, 1, 2, 3}

    def test_deterministic(self):
        a = load_dataset(TrainConfig(dataset="shapes", n_data=100))
        b = load_dataset(TrainConfig(dataset="shapes", n_data=100))
        np.testing.assert_array_equal(a.items, b.items)


class TestDataset:
    def test_label_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros(2))

    def test_batches(self, rng):
        ds = Dataset(np.arange(10.0)[:, None])
        batches = list(ds.batches(3, rng))
        assert len(batches) == 3 and len(np.unique(np.concatenate(batches))) == 9


class TestWriters:
    def test_to_bytes(self):
        np.testing.assert_array_equal(to_bytes([-1.0, 0.0, 1.0, 2.0]), [0, 128, 255, 255])

    def test_interleave(self):
        out = interleave(np.zeros((2, 1)), np.ones((2, 1)))
        np.testing.assert_array_equal(out[:, 0], [0, 1, 0, 1])
        with pytest.raises(ValueError):
            interleave(np.zeros((2, 1)), np.zeros((3, 1)))

    def test_grid_layout(self):
        images = np.stack([np.full((1, 2, 2), v) for v in (0.1, 0.2, 0.3)])
        g = image_grid(images, 2)
        assert g.shape == (1, 4, 4)
        assert g[0, 0, 2] == 0.2 and g[0, 2, 0] == 0.3 and g[0, 3, 3] == -1.0

    def test_all_minus_one(self, tmp_path):
        path = write_image_grid(-np.ones((1, 1, 2, 2)), 1, tmp_path / "z.pgm")
        assert path.read_bytes() == b"P5\n2 2\n255\n" + b"\x00" * 4

    def test_interleaved_columns(self):
        orig = np.stack([np.full((1, 1, 1), v) for v in (-1.0, -0.5, 0.0, 0.5)])
        grid = image_grid(interleave(orig, -orig), 8)
        np.testing.assert_array_equal(grid[0, 0], [-1, 1, -0.5, 0.5, 0, 0, 0.5, -0.5])

    def test_pgm_bytes(self, tmp_path):
        images = np.array([[[[-1.0, 1.0]]]])
        path = write_image_grid(images, 1, tmp_path / "a.pgm")
        assert path.read_bytes() == b"P5\n2 1\n255\n\x00\xff"

    def test_ppm_round_trip(self, tmp_path, rng):
        images = rng.uniform(-1, 1, (4, 3, 5, 5))
        path = write_image_grid(images, 2, tmp_path / "a.ppm")
        np.testing.assert_array_equal(read_pnm(path), to_bytes(image_grid(images, 2)))

    def test_rejects_two_channels(self, tmp_path):
        with pytest.raises(ValueError):
            write_image_grid(np.zeros((1, 2, 3, 3)), 1, tmp_path / "x.pgm")

    def test_read_pnm_rejects_truncated(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(FormatError):
            read_pnm(tmp_path / "t.pgm")

    def test_points(self, tmp_path):
        pts = np.array([[0.5, -1.25], [2.0, 3.0]])
        np.testing.assert_allclose(np.loadtxt(write_points(pts, tmp_path / "p.txt")), pts)

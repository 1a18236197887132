import numpy as np
import pytest

from btn.config import SceneConfig
from btn.datagen import (
    AnnotationError,
    DatasetError,
    convert_annotated,
    generate,
    load_dataset,
    save_dataset,
)
from btn.numerics import ChecksumError


def _write_pgm(path, pix):
    h, w = pix.shape
    path.write_bytes(b"P5\n# test\n%d %d\n255\n" % (w, h) + pix.astype(np.uint8).tobytes())


class TestGenerate:
    def test_fixed_count(self):
        s = generate(SceneConfig(count_range=(5, 5)), 1).samples[0]
        assert s.true_count == 5 and len(s.head_positions) == 5
        assert 4.975 <= s.gt_density.sum() <= 5.0

    def test_shapes_and_range(self):
        ds = generate(SceneConfig(), 4)
        for s in ds.samples:
            assert s.image.shape == (1, 64, 64) and s.gt_density.shape == (1, 16, 16)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert 5 <= s.true_count <= 30

    def test_count_consistency(self):
        for s in generate(SceneConfig(), 60).samples:
            assert abs(s.gt_density.sum() - s.true_count) <= 0.005 * s.true_count

    def test_heads_near_borders_keep_their_mass(self):
        # corner heads lose most of the disc off-canvas; the mass is folded back
        from btn.datagen import density_map

        den = density_map([(0.1, 0.1), (63.9, 63.9)], (16, 16), 1.5)
        assert 1.99 <= den.sum() <= 2.0

    def test_empty_scene(self):
        s = generate(SceneConfig(count_range=(0, 0), noise_std=0.0), 1).samples[0]
        assert s.true_count == 0 and not s.image.any() and not s.gt_density.any()

    def test_seeded(self):
        a, b = generate(SceneConfig(seed=4), 3), generate(SceneConfig(seed=4), 3)
        assert a.samples == b.samples
        assert generate(SceneConfig(seed=5), 3).samples != a.samples

    def test_streams_differ(self):
        assert generate(SceneConfig(), 2, stream=0).samples != generate(SceneConfig(), 2, stream=1).samples

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            generate(SceneConfig(), 0)


class TestFiles:
    def test_roundtrip(self, tmp_path):
        ds = generate(SceneConfig(), 3)
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back.samples == ds.samples and back.config == ds.config

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(generate(SceneConfig(seed=2), 3), tmp_path / name)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_missing_file(self, tmp_path):
        save_dataset(generate(SceneConfig(), 2), tmp_path)
        (tmp_path / "density_00001.btnt").unlink()
        with pytest.raises(DatasetError, match="density_00001.btnt"):
            load_dataset(tmp_path)

    def test_flipped_byte(self, tmp_path):
        save_dataset(generate(SceneConfig(), 1), tmp_path)
        f = tmp_path / "image_00000.btnt"
        raw = bytearray(f.read_bytes())
        raw[100] ^= 0xFF
        f.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(tmp_path)

    def test_count_mismatch(self, tmp_path):
        import json

        save_dataset(generate(SceneConfig(), 2), tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        man["n"] = 3
        (tmp_path / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)


class TestConvert:
    def test_blank(self, tmp_path):
        _write_pgm(tmp_path / "a.pgm", np.zeros((16, 16)))
        (tmp_path / "a.csv").write_text("")
        s = convert_annotated(tmp_path / "a.pgm", tmp_path / "a.csv")
        assert s.true_count == 0 and not s.gt_density.any() and not s.image.any()

    def test_single_center_head(self, tmp_path):
        _write_pgm(tmp_path / "a.pgm", np.full((32, 32), 255))
        (tmp_path / "a.csv").write_text("row,col\n16,16\n")
        s = convert_annotated(tmp_path / "a.pgm", tmp_path / "a.csv")
        assert s.true_count == 1 and 0.995 <= s.gt_density.sum() <= 1.0
        assert s.image.max() == 1.0 and s.gt_density.shape == (1, 8, 8)

    def test_out_of_bounds(self, tmp_path):
        _write_pgm(tmp_path / "a.pgm", np.zeros((16, 16)))
        (tmp_path / "a.csv").write_text("3,3\n-1,0\n")
        with pytest.raises(AnnotationError, match="row 1"):
            convert_annotated(tmp_path / "a.pgm", tmp_path / "a.csv")

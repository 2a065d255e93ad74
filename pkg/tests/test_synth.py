import json

import numpy as np
import pytest

from dcseg import netpbm, synth


def test_scene_deterministic():
    a = synth.generate_scene(5)
    b = synth.generate_scene(5)
    assert a.image.tobytes() == b.image.tobytes() and a.label_map.tobytes() == b.label_map.tobytes()


def test_default_scene_has_road_and_sky():
    lab = synth.generate_scene(0).label_map
    hist = np.bincount(lab.ravel(), minlength=6)
    assert hist[synth.CLASS_NAMES.index("road")] > 0 and hist[synth.CLASS_NAMES.index("sky")] > 0


def test_generator_contract_two_classes():
    geometry = synth.GeometryConfig(height=32, width=32)
    ok = sum(np.unique(synth.generate_scene(s, geometry).label_map).size >= 2 for s in range(1000))
    assert ok >= 950


def test_zero_area_road_rejected():
    with pytest.raises(synth.SynthError, match="zero-area road"):
        synth.generate_scene(0, synth.GeometryConfig(road_bottom=(0.0, 0.0)))


def test_fog_zero_strength_identity():
    s = synth.generate_scene(1)
    out = synth.apply_condition(s, "fog", 0, strength=0.0)
    np.testing.assert_array_equal(out.image, s.image)


def test_night_darkens_and_labels_untouched():
    for seed in range(5):
        s = synth.generate_scene(seed)
        assert synth.apply_condition(s, "night", seed).image.mean() < s.image.mean()
        for c in range(4):
            out = synth.apply_condition(s, c, seed)
            assert out.label_map.tobytes() == s.label_map.tobytes()
            assert out.condition == c
            assert out.image.min() >= 0 and out.image.max() <= 1


def test_unknown_condition():
    with pytest.raises(synth.SynthError):
        synth.apply_condition(synth.generate_scene(0), 7, 0)
    with pytest.raises(synth.SynthError):
        synth.apply_condition(synth.generate_scene(0), "hail", 0)


def test_identity_augmentation():
    s = synth.generate_scene(2)
    img, lab = synth.resample(s.image, s.label_map, synth.identity_record(64))
    np.testing.assert_allclose(img, s.image, atol=1e-12)
    np.testing.assert_array_equal(lab, s.label_map)


def test_augmentation_label_closure_and_replay():
    s = synth.generate_scene(3)
    before = set(np.unique(s.label_map)) | {synth.VOID}
    for seed in range(10):
        img, lab, rec = synth.augment_view(s, seed)
        assert set(np.unique(lab)) <= before
        _, _, rec2 = synth.augment_view(s, seed)
        assert rec == rec2
        assert 0.5 <= rec.scale <= 2.0


def test_crop_too_large():
    with pytest.raises(synth.SynthError, match="crop"):
        synth.augment_view(synth.generate_scene(0, synth.GeometryConfig(height=32, width=32)), 0, crop=48)


def test_multiview_batch():
    scenes = [synth.generate_scene(k) for k in range(3)]
    one = synth.build_multiview_batch(scenes[:1], 0)
    assert one.images.shape[0] == 2 and one.pairing.tolist() == [1, 0]
    for n in range(1, 9):
        p = synth.build_multiview_batch([scenes[0]] * n, 0, out_size=16).pairing
        assert np.all(p[p] == np.arange(2 * n)) and np.all(p != np.arange(2 * n))
    a = synth.build_multiview_batch(scenes, 4)
    b = synth.build_multiview_batch(scenes, 4)
    assert a.images.tobytes() == b.images.tobytes() and a.records == b.records
    assert a.source_ids[0] == a.source_ids[1]


def test_netpbm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, size=(4, 3), dtype=np.uint8)
    netpbm.write_ppm(tmp_path / "a.ppm", rgb)
    netpbm.write_pgm(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(netpbm.read_ppm(tmp_path / "a.ppm"), rgb)
    np.testing.assert_array_equal(netpbm.read_pgm(tmp_path / "a.pgm"), gray)


def test_netpbm_header_comments_and_errors():
    buf = b"P5\n# made by hand\n2 1\n255\n\x01\x02"
    np.testing.assert_array_equal(netpbm.decode(buf), [[1, 2]])
    with pytest.raises(netpbm.NetpbmError):
        netpbm.decode(b"P5\n2 1\n255\n\x01")
    with pytest.raises(netpbm.NetpbmError):
        netpbm.decode(b"P3\n1 1\n255\n1 2 3")


def test_dataset_round_trip(tmp_path):
    scenes = synth.generate_dataset(1, {"train": 2, "val": 1}, resolution=32)
    assert len(scenes) == 12
    synth.write_dataset(tmp_path, scenes)
    ds = synth.read_dataset(tmp_path)
    assert [s.sample_id for s in ds.scenes] == [s.sample_id for s in scenes]
    for a, b in zip(scenes, ds.scenes):
        assert a.label_map.tobytes() == b.label_map.tobytes()
        assert np.abs(a.image - b.image).max() <= 1 / 510 + 1e-12
        assert a.condition == b.condition and a.split == b.split
    assert len(ds.split("val")) == 4


def test_dataset_errors(tmp_path):
    with pytest.raises(synth.DatasetError, match="no manifest"):
        synth.read_dataset(tmp_path)
    scenes = synth.generate_dataset(0, {"train": 1, "val": 0}, resolution=16)
    synth.write_dataset(tmp_path, scenes)
    (tmp_path / "labels" / "train_00002.pgm").unlink()
    with pytest.raises(synth.DatasetError, match="train_00002.pgm"):
        synth.read_dataset(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["height"] = 20
    manifest["samples"] = manifest["samples"][:1]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(synth.DatasetError, match="dimension mismatch"):
        synth.read_dataset(tmp_path)


def test_dataset_digest_deterministic(tmp_path):
    for name in ("a", "b"):
        synth.write_dataset(tmp_path / name, synth.generate_dataset(3, {"train": 1, "val": 1}, resolution=16))
    assert synth.directory_digest(tmp_path / "a") == synth.directory_digest(tmp_path / "b")

import numpy as np
import pytest

from kdseg.data import (
    SyntheticSpec,
    class_names,
    decode_checkpoint,
    encode_checkpoint,
    encode_pgm,
    encode_ppm,
    generate,
    generate_arrays,
    load_checkpoint,
    load_sample,
    presence_mask,
    read_manifest,
    read_pgm,
    read_ppm,
    render_sample,
    save_checkpoint,
    shape_mask,
)
from kdseg.errors import (
    BadMagicError,
    CheckpointError,
    DataError,
    ParameterError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from kdseg.segnet import SegModel


def test_hand_written_pgm_fixture(tmp_path):
    path = tmp_path / "l.pgm"
    path.write_bytes(b"P5\n# two by two\n2 2\n255\n" + bytes([0, 3, 255, 1]))
    np.testing.assert_array_equal(read_pgm(path), [[0, 3], [255, 1]])


def test_hand_written_ppm_fixture(tmp_path):
    path = tmp_path / "i.ppm"
    path.write_bytes(b"P6 1 2 255\n" + bytes([10, 20, 30, 40, 50, 60]))
    np.testing.assert_array_equal(read_ppm(path), [[[10, 20, 30]], [[40, 50, 60]]])


def test_netpbm_round_trip_and_errors(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    (tmp_path / "a.ppm").write_bytes(encode_ppm(img))
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    lab = np.arange(12, dtype=np.uint8).reshape(3, 4)
    (tmp_path / "a.pgm").write_bytes(encode_pgm(lab))
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), lab)
    with pytest.raises(DataError, match="a.pgm"):
        read_ppm(tmp_path / "a.pgm")
    (tmp_path / "short.pgm").write_bytes(encode_pgm(lab)[:-3])
    with pytest.raises(DataError, match="short.pgm"):
        read_pgm(tmp_path / "short.pgm")
    with pytest.raises(DataError, match="missing"):
        read_pgm(tmp_path / "missing.pgm")


def test_generation_is_byte_deterministic(tmp_path):
    spec = SyntheticSpec(num_classes=5, images=12, size=32, seed=4)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 * 12 + 2
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_zero_images_gives_empty_manifest(tmp_path):
    m = generate(SyntheticSpec(images=0, size=32), tmp_path)
    assert len(m) == 0
    assert len(read_manifest(tmp_path)) == 0


def test_spec_validation():
    with pytest.raises(ParameterError):
        SyntheticSpec(size=30).validate()
    with pytest.raises(ParameterError):
        SyntheticSpec(class_frequency_skew=1.0).validate()


def test_skew_orders_pixel_counts():
    samples = generate_arrays(SyntheticSpec(num_classes=6, images=500, size=64, seed=0, class_frequency_skew=0.5))
    counts = np.bincount(np.concatenate([lab.ravel() for _, lab in samples]), minlength=6)
    assert all(a > b for a, b in zip(counts[1:], counts[2:]))


def test_labels_follow_shape_geometry():
    spec = SyntheticSpec(num_classes=6, size=32)
    for seed in range(20):
        _, labels, shapes = render_sample(spec, np.random.default_rng(seed))
        expect = np.zeros_like(labels)
        for s in shapes:
            expect[shape_mask(s, spec.size)] = s.cls
        np.testing.assert_array_equal(labels, expect)


def test_manifest_round_trip(small_dataset, small_arrays):
    m = read_manifest(small_dataset.root, strict=True)
    assert m.ids == small_dataset.ids
    assert m.class_names == class_names(6)
    img, lab = load_sample(m, m.ids[0])
    assert img.dtype == np.float32 and 0 <= img.min() and img.max() <= 1
    assert set(np.unique(lab).tolist()) <= set(range(6)) | {255}
    assert presence_mask(lab) == m.record(m.ids[0]).mask


def test_manifest_strict_detects_bad_mask(tmp_path):
    generate(SyntheticSpec(num_classes=4, images=3, size=16, seed=1), tmp_path)
    path = tmp_path / "manifest.tsv"
    lines = path.read_text().splitlines()
    sid, img, lab, _ = lines[0].split("\t")
    lines[0] = "\t".join([sid, img, lab, "ff"])
    path.write_text("\n".join(lines) + "\n")
    read_manifest(tmp_path)
    with pytest.raises(DataError, match=sid):
        read_manifest(tmp_path, strict=True)


def test_load_matches_in_memory(tmp_path):
    spec = SyntheticSpec(num_classes=4, images=4, size=16, seed=2)
    m = generate(spec, tmp_path)
    for sid, (image, labels) in zip(m.ids, generate_arrays(spec)):
        img, lab = load_sample(m, sid)
        np.testing.assert_array_equal(lab, labels)
        np.testing.assert_array_equal(img, image.astype(np.float32) / np.float32(255))


def test_checkpoint_round_trip(tmp_path):
    model = SegModel(4, seed=3)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert list(loaded.params) == list(model.params)
    for name, t in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, t.data)


def test_checkpoint_errors(tmp_path):
    buf = encode_checkpoint(SegModel(2, seed=1))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(TruncatedCheckpointError):
        decode_checkpoint(buf[:-5])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")

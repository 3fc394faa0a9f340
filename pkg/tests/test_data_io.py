import os
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdseunet.data_io import (
    EdgeParams,
    Manifest,
    ManifestEntry,
    SyntheticSpec,
    cache_edges,
    checkpoint_bytes,
    checkpoint_records,
    generate_synthetic,
    load_checkpoint,
    load_manifest,
    load_samples,
    model_from_checkpoint_bytes,
    parse_pgm,
    read_mask,
    read_pgm,
    save_checkpoint,
    split,
    synthesize,
    write_mask,
    write_pgm,
)
from cdseunet.edges import canny
from cdseunet.errors import ConfigError, LoadError, ParseError
from cdseunet.model import ModelConfig, build
from cdseunet.tensor import Tensor


# ---- PGM


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (32, 32), dtype=np.uint8)
    write_pgm(img, tmp_path / "a.pgm")
    back = read_pgm(tmp_path / "a.pgm")
    assert back.dtype == np.uint8 and back.tobytes() == img.tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_bytes_round_trip(img):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        write_pgm(img, os.path.join(d, "x.pgm"))
        np.testing.assert_array_equal(read_pgm(os.path.join(d, "x.pgm")), img)


def test_pgm_exact_serialization(tmp_path):
    img = np.array([[0, 128, 255], [1, 2, 3]], dtype=np.uint8)
    write_pgm(img, tmp_path / "s.pgm")
    data = (tmp_path / "s.pgm").read_bytes()
    header = b"P5\n3 2\n255\n"
    assert len(header) == 11
    assert data == header + bytes([0, 128, 255, 1, 2, 3])
    assert len(data) == 17


@pytest.mark.parametrize(
    "blob,offset",
    [
        (b"P2\n3 2\n255\n" + bytes(6), 0),
        (b"P5\n3 2\n65535\n" + bytes(12), None),
        (b"P5\n3 2\n255\n" + bytes(5), None),
        (b"P5\n3", None),
    ],
)
def test_pgm_parse_errors(blob, offset):
    with pytest.raises(ParseError) as err:
        parse_pgm(blob)
    assert "at byte" in str(err.value)
    if offset is not None:
        assert err.value.offset == offset


def test_pgm_tolerates_comments():
    img = parse_pgm(b"P5\n# made by hand\n2 1\n255\n\x05\x06")
    assert img.tolist() == [[5, 6]]


def test_mask_io(tmp_path):
    mask = np.array([[0, 1], [1, 0]], np.uint8)
    write_mask(mask, tmp_path / "m.pgm")
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 255], [255, 0]]
    np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), mask)


# ---- manifest and split


def _dataset(tmp_path, count=4, size=16):
    return generate_synthetic(SyntheticSpec(count=count, size=size, seed=3), tmp_path / "data")


def test_manifest_round_trip(tmp_path):
    m = _dataset(tmp_path)
    first = load_manifest(tmp_path / "data" / "manifest.tsv")
    assert first.entries == m.entries
    first.save(tmp_path / "data" / "copy.tsv")
    again = load_manifest(tmp_path / "data" / "copy.tsv")
    assert again.entries == first.entries
    assert (tmp_path / "data" / "copy.tsv").read_bytes() == (tmp_path / "data" / "manifest.tsv").read_bytes()


def test_manifest_missing_file(tmp_path):
    m = _dataset(tmp_path, count=2)
    os.remove(m.resolve(m.entries[1].mask))
    with pytest.raises(LoadError, match="img_0001"):
        load_manifest(tmp_path / "data" / "manifest.tsv")


def test_manifest_dimension_mismatch(tmp_path):
    m = _dataset(tmp_path, count=2)
    write_mask(np.zeros((8, 8), np.uint8), m.resolve(m.entries[0].mask))
    with pytest.raises(LoadError, match="dimension"):
        load_manifest(tmp_path / "data" / "manifest.tsv")


def test_split_788_train_90_test():
    entries = list(range(878))
    train, test = split(entries, 788 / 878, seed=0)
    assert (len(train), len(test)) == (788, 90)
    assert sorted(train + test) == entries
    assert split(entries, 788 / 878, seed=0) == (train, test)
    assert split(entries, 788 / 878, seed=1) != (train, test)


def test_split_full_train_warns():
    with pytest.warns(UserWarning, match="empty test"):
        train, test = split(list(range(5)), 1.0, seed=0)
    assert len(train) == 5 and test == []


def test_split_bad_fraction():
    with pytest.raises(ConfigError):
        split([1, 2], 0.0, 0)


# ---- synthetic data


def test_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(count=3, size=32, seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for sub in ("images", "masks"):
        for name in sorted(os.listdir(tmp_path / "a" / sub)):
            assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()


@pytest.mark.parametrize("index", range(6))
def test_synthetic_lesions_inside_lungs(index):
    img, mask, lungs = synthesize(SyntheticSpec(size=64, seed=11), index)
    assert mask.any()
    assert np.all(lungs[mask.astype(bool)] == 1)


def test_synthetic_intensity_ordering():
    spec = SyntheticSpec(size=64, seed=2)
    lesion, lung, bg = [], [], []
    for i in range(8):
        img, mask, lungs = synthesize(spec, i)
        m, l = mask.astype(bool), lungs.astype(bool)
        lesion.append(img[m].mean())
        lung.append(img[l & ~m].mean())
        bg.append(img[~l].mean())
    assert np.mean(bg) < np.mean(lesion) < np.mean(lung)


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(size=40).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(count=0).validate()


# ---- edge cache


def test_cache_idempotent_and_exact(tmp_path):
    m = _dataset(tmp_path, count=3)
    cached, hits = cache_edges(m)
    assert hits == 0
    again, hits = cache_edges(m)
    assert hits == 3 and again.entries == cached.entries
    for e in cached.entries:
        np.testing.assert_array_equal(read_mask(cached.resolve(e.edge)), canny(read_pgm(cached.resolve(e.image))))


def test_cache_invalidated_by_params(tmp_path):
    m = _dataset(tmp_path, count=2)
    a, _ = cache_edges(m, EdgeParams(sigma=1.4))
    b, hits = cache_edges(m, EdgeParams(sigma=2.0))
    assert hits == 0
    assert all(x.edge != y.edge for x, y in zip(a.entries, b.entries))


def test_cache_invalidated_by_newer_image(tmp_path):
    m = _dataset(tmp_path, count=2)
    cache_edges(m)
    src = m.resolve(m.entries[0].image)
    st_ = os.stat(src)
    os.utime(src, ns=(st_.st_atime_ns, st_.st_mtime_ns + 10**10))
    _, hits = cache_edges(m)
    assert hits == 1


def test_load_samples_normalized(tmp_path):
    m = _dataset(tmp_path, count=2)
    cached, _ = cache_edges(m)
    samples = load_samples(cached)
    for s in samples:
        assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.edge)) <= {0.0, 1.0}
    fresh = load_samples(m)
    for a, b in zip(samples, fresh):
        np.testing.assert_array_equal(a.edge, b.edge)
        np.testing.assert_array_equal(a.image * 255, read_pgm(m.resolve(a.name)))


# ---- checkpoints


def toy(seed=0, **kw):
    return build(ModelConfig(base_width=4, input_size=16, senet_reduction=2, **kw), seed=seed)


def test_checkpoint_forward_identical(tmp_path):
    model = toy(seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    model.set_training(False)
    loaded.set_training(False)
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = Tensor(rng.random((1, 1, 16, 16)).astype(np.float32))
        e = Tensor((rng.random((1, 1, 16, 16)) > 0.5).astype(np.float32))
        assert model(x, e).data.tobytes() == loaded(x, e).data.tobytes()
    assert loaded.config == model.config


def test_checkpoint_keeps_running_stats(tmp_path):
    model = toy(seed=2)
    x = Tensor(np.random.default_rng(1).random((2, 1, 16, 16)).astype(np.float32))
    model(x, x)  # training-mode forward updates the running statistics
    loaded = model_from_checkpoint_bytes(checkpoint_bytes(model))
    for (na, a), (nb, b) in zip(model.named_buffers(), loaded.named_buffers()):
        assert na == nb and a.tobytes() == b.tobytes()


def test_checkpoint_size_formula():
    model = toy()
    config = model.config.to_text().encode()
    expected = 4 + 4 + 4 + len(config) + 4
    for name, arr in checkpoint_records(model):
        expected += 4 + len(name.encode()) + 4 + 4 * arr.ndim + 4 * arr.size
    assert len(checkpoint_bytes(model)) == expected
    assert checkpoint_bytes(model)[:4] == b"CDSE"
    assert struct.unpack("<I", checkpoint_bytes(model)[4:8]) == (1,)


def test_checkpoint_deterministic():
    assert checkpoint_bytes(toy(seed=7)) == checkpoint_bytes(toy(seed=7))


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-3], "truncat"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_checkpoint_corruption(tmp_path, mutate, match):
    data = mutate(checkpoint_bytes(toy()))
    (tmp_path / "bad.ckpt").write_bytes(data)
    with pytest.raises(LoadError, match=match):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_unknown_name():
    model = toy()
    data = checkpoint_bytes(model)
    name = next(iter(model.named_parameters()))[0].encode()
    bad = data.replace(name, b"x" * len(name), 1)
    with pytest.raises(LoadError, match="unknown"):
        model_from_checkpoint_bytes(bad)

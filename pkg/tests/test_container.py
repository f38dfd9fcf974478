import struct

import numpy as np
import pytest

from codequant.container import (DTYPE_F32, DTYPE_INT8, DTYPE_NIBBLE, MAGIC,
                                 load_model, read_container, save_model,
                                 write_container)
from codequant.errors import FormatError
from codequant.linalg import RngState
from codequant.model import ModelConfig, codebook_to_dense, generate_synthetic_model


def make_model(seed=11):
    cfg = ModelConfig(d_model=16, n_heads=2, d_ff=24, n_experts=2, top_k=1,
                      n_layers=2, n_calib=8, seed=seed)
    return generate_synthetic_model(cfg, outlier_channels=2)


def test_codebook_to_dense_hand_example():
    centroids = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    ids = np.array([[0, 1, 1, 0]], dtype=np.uint8)
    dense = codebook_to_dense(centroids, ids, group_size=2)
    assert dense.shape == (4, 1)
    assert dense[:, 0].tolist() == [1.0, 2.0, 4.0, 3.0]


def test_round_trip_preserves_weights(tmp_path):
    w = make_model()
    w.metadata["stage.rotated"] = "1"
    p = tmp_path / "m.cqm"
    save_model(w, str(p))
    loaded = load_model(str(p))
    assert loaded.config == w.config
    assert loaded.metadata == w.metadata
    assert loaded.dtype == np.float64
    # values survive modulo the float32 store
    assert np.array_equal(loaded.layers[0].w_q,
                          w.layers[0].w_q.astype(np.float32).astype(np.float64))
    assert np.array_equal(loaded.layers[1].w_down[1],
                          w.layers[1].w_down[1].astype(np.float32).astype(np.float64))

    p2 = tmp_path / "again.cqm"
    save_model(loaded, str(p2))
    assert p.read_bytes() == p2.read_bytes()


def test_same_seed_same_bytes(tmp_path):
    p1, p2 = tmp_path / "a.cqm", tmp_path / "b.cqm"
    save_model(make_model(7), str(p1))
    save_model(make_model(7), str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    p3 = tmp_path / "c.cqm"
    save_model(make_model(8), str(p3))
    assert p1.read_bytes() != p3.read_bytes()


def test_clustered_site_round_trip(tmp_path):
    w = make_model()
    rng = RngState(3)
    centroids = rng.stream("c").standard_normal((16, 2, 4)).astype(np.float32)
    ids = rng.stream("i").integers(0, 4, size=(16, 16)).astype(np.uint8)
    w.codebooks["layer0.q"] = (centroids, ids, 8)
    w.layers[0].w_q = codebook_to_dense(centroids, ids, 8).astype(np.float64)
    p = tmp_path / "m.cqm"
    save_model(w, str(p))

    _, tensors = read_container(str(p))
    assert "layer0.q" not in tensors
    assert tensors["layer0.q.centroids"][0] == DTYPE_F32
    assert tensors["layer0.q.ids"][0] == DTYPE_NIBBLE

    loaded = load_model(str(p))
    lc, li, lg = loaded.codebooks["layer0.q"]
    assert np.array_equal(lc, centroids)
    assert np.array_equal(li, ids)
    assert lg == 8
    assert np.array_equal(loaded.layers[0].w_q.astype(np.float32),
                          codebook_to_dense(centroids, ids, 8))
    p2 = tmp_path / "again.cqm"
    save_model(loaded, str(p2))
    assert p.read_bytes() == p2.read_bytes()


def test_low_level_tensor_round_trip(tmp_path):
    p = tmp_path / "t.cqm"
    rng = RngState(5)
    f = rng.stream("f").standard_normal((3, 5)).astype(np.float32)
    ids = rng.stream("n").integers(0, 16, size=(4, 7)).astype(np.uint8)
    q = rng.stream("q").integers(-8, 8, size=(2, 9)).astype(np.int8)
    write_container(str(p), {"alpha": "1", "beta": "x y"},
                    {"f": (DTYPE_F32, f), "n": (DTYPE_NIBBLE, ids),
                     "q": (DTYPE_INT8, q)})
    config, tensors = read_container(str(p))
    assert config == {"alpha": "1", "beta": "x y"}
    assert np.array_equal(tensors["f"][1], f)
    assert np.array_equal(tensors["n"][1], ids)
    assert np.array_equal(tensors["q"][1], q)
    assert tensors["q"][0] == DTYPE_INT8


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "m.cqm"
    save_model(make_model(), str(p))
    data = bytearray(p.read_bytes())
    data[:4] = b"NOPE"
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_container(str(p))


def test_unsupported_version_rejected(tmp_path):
    p = tmp_path / "m.cqm"
    save_model(make_model(), str(p))
    data = bytearray(p.read_bytes())
    data[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version 9"):
        read_container(str(p))


def test_truncated_payload_names_tensor(tmp_path):
    p = tmp_path / "m.cqm"
    save_model(make_model(), str(p))
    data = p.read_bytes()
    p.write_bytes(data[:-6])
    with pytest.raises(FormatError, match="truncated"):
        read_container(str(p))


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "m.cqm"
    save_model(make_model(), str(p))
    p.write_bytes(p.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_container(str(p))


def test_missing_tensor_named_in_error(tmp_path):
    p = tmp_path / "m.cqm"
    w = make_model()
    save_model(w, str(p))
    config, tensors = read_container(str(p))
    tensors.pop("layer0.k")
    write_container(str(p), config, tensors)
    with pytest.raises(FormatError, match="layer0.k"):
        load_model(str(p))


def test_unexpected_tensor_rejected(tmp_path):
    p = tmp_path / "m.cqm"
    save_model(make_model(), str(p))
    config, tensors = read_container(str(p))
    tensors["mystery"] = (DTYPE_F32, np.zeros((2, 2), dtype=np.float32))
    write_container(str(p), config, tensors)
    with pytest.raises(FormatError, match="mystery"):
        load_model(str(p))


def test_unknown_config_key_rejected(tmp_path):
    p = tmp_path / "m.cqm"
    save_model(make_model(), str(p))
    config, tensors = read_container(str(p))
    config["wobble"] = "3"
    write_container(str(p), config, tensors)
    with pytest.raises(FormatError, match="wobble"):
        load_model(str(p))


def test_duplicate_tensor_rejected(tmp_path):
    from codequant.container import _encode_tensor

    arr = np.zeros((2,), dtype=np.float32)
    body = _encode_tensor("dup", DTYPE_F32, arr) * 2
    blob = MAGIC + struct.pack("<I", 1) + struct.pack("<Q", 0)
    blob += struct.pack("<I", 2) + body
    p = tmp_path / "dup.cqm"
    p.write_bytes(blob)
    with pytest.raises(FormatError, match="duplicate tensor"):
        read_container(str(p))


def test_forward_works_on_loaded_model(tmp_path):
    from codequant.model import forward

    w = make_model()
    p = tmp_path / "m.cqm"
    save_model(w, str(p))
    loaded = load_model(str(p))
    x = RngState(6).stream("x").standard_normal((4, 16))
    out, _ = forward(loaded, x)
    assert out.shape == (4, 16)
    assert np.isfinite(out).all()

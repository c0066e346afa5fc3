import hashlib
import re
import struct

import numpy as np
import pytest

from reoi import io, sim, trustregion as tr, wm


@pytest.fixture(scope="module")
def episode(small_data):
    return small_data[0]


# ---------------------------------------------------------------- episodes

def test_episode_round_trip_is_bit_exact(tmp_path, episode):
    p = tmp_path / "e.rwmd"
    io.save_episode(p, episode)
    back = io.load_episode(p)
    assert np.array_equal(back.frames, episode.frames) and back.frames.dtype == np.float32
    assert np.array_equal(back.actions, episode.actions)
    assert io.canonical_json(back.metadata) == io.canonical_json(episode.metadata)
    io.save_episode(tmp_path / "f.rwmd", back)
    assert (tmp_path / "f.rwmd").read_bytes() == p.read_bytes()


def test_episode_length_is_fixed_by_header(episode):
    data = io.episode_bytes(episode)
    t, a = len(episode.actions), episode.actions.shape[1]
    meta = io.canonical_json(episode.metadata)
    assert len(data) == 4 + 6 * 4 + (t + 1) * 64 * 64 * 3 * 4 + t * a * 4 + 4 + len(meta)
    assert data[:4] == b"RWMD" and struct.unpack("<6I", data[4:28]) == (1, 64, 64, 3, t, a)


def test_episode_errors(episode):
    data = io.episode_bytes(episode)
    with pytest.raises(io.BadMagicError):
        io.episode_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(io.VersionError):
        io.episode_from_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(io.TruncatedError):
        io.episode_from_bytes(data[:-10])
    # a header claiming one more step than the payload holds
    longer = data[:20] + struct.pack("<I", len(episode.actions) + 1) + data[24:]
    with pytest.raises(io.TruncatedError):
        io.episode_from_bytes(longer)
    with pytest.raises(io.TruncatedError):
        io.episode_from_bytes(data + b"\0")
    assert len({io.BadMagicError, io.VersionError, io.TruncatedError}) == 3


# ---------------------------------------------------------------- dataset hashing

def test_dataset_hash(tmp_path, small_data):
    d = tmp_path / "d"
    digest = io.save_dataset(d, small_data[:3], {"note": "x"})
    assert re.fullmatch(r"[0-9a-f]{64}", digest)
    assert io.hash_dataset(d) == digest == io.hash_dataset(d)
    assert len(io.load_dataset(d)) == 3


def test_dataset_hash_ignores_write_order(tmp_path, small_data):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for i in range(3):
        io.save_episode(a / f"episode_{i:05d}.rwmd", small_data[i])
    for i in reversed(range(3)):
        io.save_episode(b / f"episode_{i:05d}.rwmd", small_data[i])
    assert io.hash_dataset(a) == io.hash_dataset(b)


def test_dataset_hash_covers_names_and_bytes(tmp_path, small_data):
    d = tmp_path / "d"
    digest = io.save_dataset(d, small_data[:2])
    p = d / "episode_00001.rwmd"
    p.rename(d / "episode_00007.rwmd")
    assert io.hash_dataset(d) != digest
    (d / "episode_00007.rwmd").rename(p)
    assert io.hash_dataset(d) == digest
    raw = bytearray(p.read_bytes())
    raw[1000] ^= 1
    p.write_bytes(bytes(raw))
    assert io.hash_dataset(d) != digest


def test_dataset_hash_oracle(tmp_path, small_data):
    d = tmp_path / "d"
    digest = io.save_dataset(d, small_data[:2])
    h = hashlib.sha256()
    for p in sorted(d.glob("*.rwmd")):
        data, name = p.read_bytes(), p.name.encode()
        h.update(struct.pack("<I", len(name)) + name + struct.pack("<Q", len(data)) + data)
    assert h.hexdigest() == digest


def test_empty_dataset_is_an_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.load_dataset(tmp_path)


# ---------------------------------------------------------------- models and regions

def test_linear_model_round_trip(tmp_path, small_data):
    m = wm.train(small_data, config=wm.TrainConfig(kind="linear"))
    io.save_model(tmp_path / "m.bin", m)
    back = io.load_model(tmp_path / "m.bin")
    assert isinstance(back, wm.LinearWorldModel)
    assert io.model_bytes(back) == (tmp_path / "m.bin").read_bytes()
    assert back.ridge_lambda == m.ridge_lambda


def test_conv_model_round_trip(tmp_path, model, gray):
    data = io.model_bytes(model)
    back = io.model_from_bytes(data)
    assert io.model_bytes(back) == data
    plan = np.zeros((3, 3))
    assert all(np.array_equal(a, b) for a, b in zip(wm.rollout(model, gray, plan),
                                                   wm.rollout(back, gray, plan)))


def test_model_errors(model):
    data = io.model_bytes(model)
    with pytest.raises(io.BadMagicError):
        io.model_from_bytes(b"RWMD" + data[4:])
    with pytest.raises(io.VersionError):
        io.model_from_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    with pytest.raises(io.TruncatedError):
        io.model_from_bytes(data[: len(data) // 2])
    with pytest.raises(io.FormatError):
        io.model_from_bytes(data[:8] + struct.pack("<I", 99) + data[12:])


def test_region_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x, e = rng.normal(size=(30, 5)), rng.random(30)
    reg = tr.expand(tr.build(x, e), x, e)
    io.save_region(tmp_path / "r.bin", reg)
    back = io.load_region(tmp_path / "r.bin")
    assert io.region_bytes(back) == (tmp_path / "r.bin").read_bytes()
    assert back.radius == reg.radius and back.bound == reg.bound
    assert np.array_equal(back.indices, reg.indices)
    with pytest.raises(io.BadMagicError):
        io.region_from_bytes(b"RWMM" + io.region_bytes(reg)[4:])


# ---------------------------------------------------------------- images

def test_ppm_round_trip(tmp_path):
    frame = sim.render(sim.init_scene(sim.SceneConfig(n_novel=1), 3)).frame
    io.write_ppm(tmp_path / "f.ppm", frame)
    raw = (tmp_path / "f.ppm").read_bytes()
    assert raw.startswith(b"P6\n64 64\n255\n") and len(raw) == 13 + 64 * 64 * 3
    back = io.read_ppm(tmp_path / "f.ppm")
    assert np.abs(back - frame).max() <= 0.5 / 255 + 1e-12
    with pytest.raises(ValueError):
        io.frame_to_ppm(np.zeros((4, 4)))


def test_pbm_bits():
    m = np.zeros((2, 10), bool)
    m[0, 0] = m[1, 9] = True
    assert io.mask_to_pbm(m) == b"P4\n10 2\n" + bytes([0x80, 0x00, 0x00, 0x40])


def test_filmstrip_layout():
    frames = [np.full((4, 3, 3), v) for v in (0.1, 0.2, 0.3)]
    strip = io.filmstrip(frames)
    assert strip.shape == (4, 11, 3)
    assert np.all(strip[:, 3] == 1.0) and np.all(strip[:, 4:7] == 0.2)

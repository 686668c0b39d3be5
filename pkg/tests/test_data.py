"""Scene generator, dataset files, checkpoints."""

import struct
import zlib
from collections import deque

import numpy as np
import pytest

from serankdet.data import (BadMagicError, ChecksumError, FormatError,
                            MissingEntryError, PairShapeMismatchError,
                            Sample, SynthParams, TruncatedError,
                            UnknownTensorError, VersionError, load_checkpoint,
                            read_dataset, save_checkpoint, synth_dataset,
                            synth_scene, write_dataset)
from serankdet.network import Model, NetConfig
from serankdet.tensor import Tensor

MICRO = NetConfig(channels=(8, 16, 32, 64, 128))


def components(mask):
    """4-connected component sizes of a binary map (plain BFS oracle)."""
    seen = np.zeros_like(mask, dtype=bool)
    sizes = []
    h, w = mask.shape
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and not seen[si, sj]:
                size = 0
                queue = deque([(si, sj)])
                seen[si, sj] = True
                while queue:
                    i, j = queue.popleft()
                    size += 1
                    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ni, nj = i + di, j + dj
                        if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not seen[ni, nj]:
                            seen[ni, nj] = True
                            queue.append((ni, nj))
                sizes.append(size)
    return sizes


class TestSynthScene:
    def test_deterministic_per_seed_index(self):
        p = SynthParams(seed=5, size=64)
        a = synth_scene(p, 3)
        b = synth_scene(p, 3)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        c = synth_scene(p, 4)
        assert not np.array_equal(a.image, c.image)

    def test_images_in_unit_interval(self):
        for i in range(5):
            s = synth_scene(SynthParams(seed=1, noise_sigma=30.0), i)
            assert np.all(s.image >= 0.0) and np.all(s.image <= 1.0)
            assert set(np.unique(s.mask)) <= {0, 1}

    def test_masks_nonempty_and_small(self):
        for size in (64, 128):
            p = SynthParams(seed=2, size=size)
            for i in range(20):
                mask = synth_scene(p, i).mask[0]
                assert mask.sum() > 0
                for area in components(mask):
                    assert area <= 0.0015 * size * size

    def test_zero_noise_is_identity(self):
        a = synth_scene(SynthParams(seed=3, noise_sigma=0.0), 0)
        b = synth_scene(SynthParams(seed=3), 0)
        np.testing.assert_array_equal(a.image, b.image)

    def test_noise_std_matches_request(self):
        clean = synth_scene(SynthParams(seed=4, size=256, noise_sigma=0.0), 0)
        noisy = synth_scene(SynthParams(seed=4, size=256, noise_sigma=30.0), 0)
        measured = (noisy.image.astype(np.float64) - clean.image.astype(np.float64)).std() * 255.0
        assert abs(measured - 30.0) / 30.0 < 0.05

    def test_flat_background_single_target_mask_is_disc(self):
        p = SynthParams(seed=6, size=64, background=0.0, targets_min=1, targets_max=1)
        s = synth_scene(p, 0)
        sizes = components(s.mask[0])
        assert len(sizes) == 1

    def test_size_divisibility(self):
        with pytest.raises(ValueError):
            synth_scene(SynthParams(size=100), 0)


class TestDatasetRoundTrip:
    def test_bit_exact(self, tmp_path):
        samples = synth_dataset(SynthParams(count=5, size=64, seed=7, noise_sigma=10.0))
        write_dataset(str(tmp_path), samples)
        back = read_dataset(str(tmp_path))
        assert len(back) == 5
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_missing_entry_names_path(self, tmp_path):
        write_dataset(str(tmp_path), synth_dataset(SynthParams(count=1, seed=0)))
        (tmp_path / "00000.msk").unlink()
        with pytest.raises(MissingEntryError, match="00000.msk"):
            read_dataset(str(tmp_path))

    def test_pair_shape_mismatch(self, tmp_path):
        s = synth_dataset(SynthParams(count=1, seed=0, size=64))[0]
        small = synth_dataset(SynthParams(count=1, seed=0, size=32))[0]
        write_dataset(str(tmp_path), [s])
        from serankdet.data import _write_mask
        _write_mask(str(tmp_path / "00000.msk"), small.mask)
        with pytest.raises(PairShapeMismatchError, match="pair shape mismatch"):
            read_dataset(str(tmp_path))

    def test_bad_magic(self, tmp_path):
        write_dataset(str(tmp_path), synth_dataset(SynthParams(count=1, seed=0)))
        img = tmp_path / "00000.img"
        data = bytearray(img.read_bytes())
        data[:4] = b"XXXX"
        img.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            read_dataset(str(tmp_path))

    def test_truncated_payload(self, tmp_path):
        write_dataset(str(tmp_path), synth_dataset(SynthParams(count=1, seed=0)))
        img = tmp_path / "00000.img"
        img.write_bytes(img.read_bytes()[:-10])
        with pytest.raises(TruncatedError, match="unexpected end"):
            read_dataset(str(tmp_path))

    def test_size_overflow_guard(self, tmp_path):
        path = tmp_path / "big.img"
        path.write_bytes(b"IRS1" + struct.pack("<II", 2 ** 16, 2 ** 16))
        from serankdet.data import SizeOverflowError, _read_image
        with pytest.raises(SizeOverflowError):
            _read_image(str(path))


@pytest.fixture(scope="module")
def model():
    m = Model(MICRO, seed=13)
    # move running stats off their init so the round trip is non-trivial
    x = Tensor(np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32))
    m.set_training(True)
    m.forward(x)
    m.set_training(False)
    m.global_step = 17
    return m


class TestCheckpointRoundTrip:
    def test_forward_bit_identical_after_reload(self, model, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        clone = load_checkpoint(path)
        assert clone.global_step == 17
        assert clone.cfg == model.cfg
        x = Tensor(np.random.default_rng(1).random((1, 1, 64, 64)).astype(np.float32))
        np.testing.assert_array_equal(model.predict(x).data, clone.predict(x).data)

    def test_bad_magic(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_checkpoint(str(path))

    def test_truncation(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises((TruncatedError, ChecksumError)):
            load_checkpoint(str(path))

    def test_checksum_failure(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        blob = bytearray(path.read_bytes())
        blob[50] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError, match="checksum"):
            load_checkpoint(str(path))

    def test_version_mismatch(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        blob = bytearray(path.read_bytes())
        body = bytearray(blob[4:-4])
        body[:4] = struct.pack("<I", 9)
        crc = struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        path.write_bytes(blob[:4] + bytes(body) + crc)
        with pytest.raises(VersionError, match="version"):
            load_checkpoint(str(path))

    def test_unknown_tensor_name(self, model, tmp_path):
        # re-encode with one renamed entry and a fixed-up checksum
        from serankdet.data import (CKPT_MAGIC, CKPT_VERSION, _encode_tensor,
                                    _meta_tensors, _model_tensors)
        tensors = {**_meta_tensors(model), **_model_tensors(model)}
        victim = sorted(k for k in tensors if not k.startswith("meta/"))[0]
        tensors["not/a/real/tensor"] = tensors.pop(victim)
        body = [struct.pack("<II", CKPT_VERSION, len(tensors))]
        for name in sorted(tensors):
            body.append(_encode_tensor(name, tensors[name]))
        blob = b"".join(body)
        path = tmp_path / "m.ckpt"
        path.write_bytes(CKPT_MAGIC + blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))
        with pytest.raises(UnknownTensorError, match="not/a/real/tensor"):
            load_checkpoint(str(path))

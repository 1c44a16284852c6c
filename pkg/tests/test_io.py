"""Format round trips, golden files, error codes, and throughput."""

import time

import numpy as np
import pytest

from evsharp import event, geom, io


class TestPpm:
    GOLDEN = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 8, 7])

    def test_golden_file(self, tmp_path):
        p = tmp_path / "g.ppm"
        p.write_bytes(self.GOLDEN)
        img = io.read_ppm(p)
        assert img.shape == (2, 2, 3)
        assert img[0, 0].tolist() == [255, 0, 0]
        assert img[1, 1].tolist() == [9, 8, 7]

    def test_header_comment_allowed(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03")
        assert io.read_ppm(p)[0, 0].tolist() == [1, 2, 3]

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        io.write_ppm(tmp_path / "r.ppm", img)
        assert np.array_equal(io.read_ppm(tmp_path / "r.ppm"), img)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(io.FormatError) as e:
            io.read_ppm(p)
        assert e.value.code == "BAD_MAGIC"

    def test_truncated_pixels(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(io.FormatError) as e:
            io.read_ppm(p)
        assert e.value.code == "TRUNCATED"


class TestGammaCoding:
    def test_round_trip_accuracy(self):
        lin = np.linspace(0, 1, 256) ** 2
        back = io.decode_gamma(io.encode_gamma(lin))
        assert np.abs(back - lin).max() < 0.01

    def test_hdr_clip_point(self):
        img = np.full((2, 2, 3), 37937, dtype=np.int64)
        assert np.all(io.hdr_to_ldr(img, k=2.2, b=37937) == 255)

    def test_hdr_zero(self):
        assert np.all(io.hdr_to_ldr(np.zeros((2, 2, 3)), 2.2, 1000.0) == 0)

    def test_hdr_above_clip_saturates(self):
        img = np.full((1, 1, 3), 65535)
        assert np.all(io.hdr_to_ldr(img, 1.0, 37937) == 255)

    def test_hdr_midpoint(self):
        val = io.hdr_to_ldr(np.array([[[1000.0]]]), 2.0, 4000.0)
        assert val[0, 0, 0] == round(255 * 0.5)


class TestPoses:
    def test_round_trip_precision(self, tmp_path):
        rng = np.random.default_rng(1)
        poses = []
        for i in range(5):
            q = rng.normal(size=4)
            poses.append(geom.Pose(q / np.linalg.norm(q), rng.normal(size=3),
                                   time=float(rng.uniform(0, 10))))
        io.write_poses(tmp_path / "p.txt", poses)
        back = io.read_poses(tmp_path / "p.txt")
        for a, b in zip(poses, back):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)
            assert a.time == b.time

    def test_comments_and_blanks(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("# header\n\n0.5 1 0 0 0 1 2 3  # inline\n")
        back = io.read_poses(p)
        assert len(back) == 1 and back[0].time == 0.5

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("1 2 3\n")
        with pytest.raises(io.FormatError) as e:
            io.read_poses(p)
        assert e.value.code == "BAD_HEADER"


def random_sorted_events(rng, n, w=640, h=480):
    ev = event.make_events(
        np.sort(rng.integers(0, 10_000_000, size=n).astype(np.uint64)),
        rng.integers(0, w, size=n), rng.integers(0, h, size=n),
        rng.choice([-1, 1], size=n).astype(np.int8))
    return event.sort_events(ev)


class TestEventFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        ev = random_sorted_events(rng, 10_000)
        io.write_events(tmp_path / "e.evs", ev, 640, 480)
        (w, h), back = io.read_events(tmp_path / "e.evs")
        assert (w, h) == (640, 480)
        assert np.array_equal(back, ev)

    def test_empty_stream(self, tmp_path):
        io.write_events(tmp_path / "e.evs", np.empty(0, dtype=event.EVENT_DTYPE),
                        32, 24)
        (w, h), back = io.read_events(tmp_path / "e.evs")
        assert (w, h) == (32, 24) and len(back) == 0

    def test_truncation_detected(self, tmp_path):
        rng = np.random.default_rng(3)
        ev = random_sorted_events(rng, 100)
        io.write_events(tmp_path / "e.evs", ev, 640, 480)
        data = (tmp_path / "e.evs").read_bytes()
        (tmp_path / "cut.evs").write_bytes(data[:-7])
        with pytest.raises(io.FormatError) as e:
            io.read_events(tmp_path / "cut.evs")
        assert e.value.code == "TRUNCATED"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.evs").write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(io.FormatError) as e:
            io.read_events(tmp_path / "bad.evs")
        assert e.value.code == "BAD_MAGIC"

    def test_unsorted_detected(self, tmp_path):
        ev = event.make_events([100, 50], [0, 1], [0, 1], [1, -1])
        with pytest.raises(io.FormatError) as e:
            io.write_events(tmp_path / "u.evs", ev, 4, 4)
        assert e.value.code == "UNSORTED"
        # forge an unsorted file on disk and make the reader catch it
        good = event.sort_events(ev)
        io.write_events(tmp_path / "g.evs", good, 4, 4)
        raw = bytearray((tmp_path / "g.evs").read_bytes())
        rec = np.frombuffer(bytes(raw[20:]), dtype=io.FILE_DTYPE).copy()
        rec = rec[::-1].copy()
        (tmp_path / "forged.evs").write_bytes(bytes(raw[:20]) + rec.tobytes())
        with pytest.raises(io.FormatError) as e:
            io.read_events(tmp_path / "forged.evs")
        assert e.value.code == "UNSORTED"

    def test_out_of_plane_detected(self, tmp_path):
        ev = event.make_events([10], [5], [2], [1])
        io.write_events(tmp_path / "e.evs", ev, 8, 8)
        raw = bytearray((tmp_path / "e.evs").read_bytes())
        rec = np.frombuffer(bytes(raw[20:]), dtype=io.FILE_DTYPE).copy()
        rec["x"] = 99
        (tmp_path / "oop.evs").write_bytes(bytes(raw[:20]) + rec.tobytes())
        with pytest.raises(io.FormatError) as e:
            io.read_events(tmp_path / "oop.evs")
        assert e.value.code == "OUT_OF_PLANE"

    def test_streaming_chunks(self, tmp_path):
        rng = np.random.default_rng(4)
        ev = random_sorted_events(rng, 5000)
        io.write_events(tmp_path / "e.evs", ev, 640, 480)
        got = [c for _, c in io.iter_events(tmp_path / "e.evs", chunk_size=777)]
        assert np.array_equal(np.concatenate(got), ev)

    def test_throughput_10m_records_per_second(self, tmp_path):
        rng = np.random.default_rng(5)
        ev = random_sorted_events(rng, 1_000_000)
        io.write_events(tmp_path / "big.evs", ev, 640, 480)
        io.read_events(tmp_path / "big.evs")  # warm the page cache
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            _, back = io.read_events(tmp_path / "big.evs")
            best = min(best, time.perf_counter() - t0)
        assert len(back) == 1_000_000
        rate = len(back) / best
        assert rate >= 1e7, f"parsed at {rate:.2e} rec/s"


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7),
                  "scalar": np.array(2.5), "cube": rng.normal(size=(2, 3, 4))}
        io.save_checkpoint(tmp_path / "c.ckpt", arrays)
        back = io.load_checkpoint(tmp_path / "c.ckpt")
        assert set(back) == set(arrays)
        for k in arrays:
            assert np.array_equal(back[k], np.asarray(arrays[k], dtype=np.float64))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(io.FormatError) as e:
            io.load_checkpoint(tmp_path / "x.ckpt")
        assert e.value.code == "BAD_MAGIC"


class TestRunConfig:
    def test_defaults_valid_and_idempotent(self):
        cfg = io.RunConfig.default()
        text = cfg.serialize()
        again = io.RunConfig.parse(text)
        assert again.values == cfg.values
        assert again.serialize() == text

    def test_override_and_type(self):
        cfg = io.RunConfig.parse("[train]\nsteps = 500\nlambda_evs = 0.0\n")
        assert cfg.get("train", "steps") == 500
        assert cfg.get("train", "lambda_evs") == 0.0
        assert isinstance(cfg.get("train", "steps"), int)

    def test_unknown_key_rejected(self):
        with pytest.raises(io.FormatError) as e:
            io.RunConfig.parse("[train]\nbogus = 1\n")
        assert e.value.code == "UNKNOWN_KEY"

    def test_unknown_section_rejected(self):
        with pytest.raises(io.FormatError) as e:
            io.RunConfig.parse("[nope]\nx = 1\n")
        assert e.value.code == "UNKNOWN_KEY"

    def test_bad_value_type(self):
        with pytest.raises(io.FormatError) as e:
            io.RunConfig.parse("[train]\nsteps = soon\n")
        assert e.value.code == "BAD_VALUE"

import struct
import threading
import time

import numpy as np
import pytest

from brachyplan.igtlink import (
    HEADER_SIZE,
    EncodeError,
    IgtlConnection,
    Image,
    IntegrityError,
    Message,
    OversizeError,
    ProtocolError,
    Status,
    StreamDecoder,
    Transform,
    Unknown,
    crc64,
    decode_frame,
    encode,
    push_volume,
    serve,
    volume_from_image,
)

from conftest import make_volume

IDENTITY_ROWS = (1.0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0)


def f32(values):
    return tuple(float(np.float32(v)) for v in values)


class TestCrc64:
    def test_check_vector(self):
        assert crc64(b"123456789") == 0x6C40DF5F0B497347

    def test_empty(self):
        assert crc64(b"") == 0


class TestEncode:
    def test_identity_transform_length(self):
        data = encode(Transform(IDENTITY_ROWS), "workstation")
        assert len(data) == HEADER_SIZE + 48
        msg, consumed = decode_frame(data)
        assert consumed == len(data)
        assert msg.body.matrix_rows[:3] == (1.0, 0.0, 0.0)
        assert msg.header.device_name == "workstation"

    def test_status_min_length(self):
        data = encode(Status(code=1, message=""), "dev")
        assert len(data) == HEADER_SIZE + 30

    def test_device_name_too_long(self):
        with pytest.raises(EncodeError):
            encode(Status(code=1), "x" * 21)

    def test_type_name_not_trusted_from_header(self):
        msg = Message(
            header=decode_frame(encode(Status(code=1), "d"))[0].header,
            body=Status(code=2),
        )
        data = encode(msg)
        back, _ = decode_frame(data)
        assert back.body.code == 2
        assert back.header.body_crc == crc64(data[HEADER_SIZE:])

    def test_unknown_requires_type_name(self):
        with pytest.raises(EncodeError):
            encode(Unknown(b"abc"), "dev")
        data = encode(Unknown(b"abc"), "dev", type_name="FUTURETYPE")
        msg, _ = decode_frame(data)
        assert isinstance(msg.body, Unknown)
        assert msg.body.raw == b"abc"


class TestRoundTrip:
    def test_transform(self):
        rows = f32(np.random.default_rng(0).normal(size=12))
        msg, consumed = decode_frame(encode(Transform(rows), "device-1", timestamp=12345))
        assert isinstance(msg.body, Transform)
        assert msg.body.matrix_rows == rows
        assert msg.header.timestamp == 12345

    def test_status(self):
        body = Status(code=3, subcode=-9, error_name="E_FOO", message="needle stalled")
        msg, _ = decode_frame(encode(body, "dev"))
        assert msg.body == body

    def test_image(self):
        payload = np.arange(8, dtype="<f4").tobytes()
        body = Image(dims=(2, 2, 2), spacing=f32((0.5, 0.5, 1.0)), payload=payload)
        data = encode(body, "scanner")
        assert len(data) == HEADER_SIZE + 20 + 32
        msg, _ = decode_frame(data)
        assert msg.body == body

    def test_randomized_round_trips(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            choice = rng.integers(0, 3)
            if choice == 0:
                body = Transform(f32(rng.normal(size=12)))
            elif choice == 1:
                body = Status(
                    code=int(rng.integers(0, 2**16)),
                    subcode=int(rng.integers(-(2**40), 2**40)),
                    error_name="E" + str(rng.integers(0, 10**6)),
                    message="m" * int(rng.integers(0, 50)),
                )
            else:
                dims = tuple(int(d) for d in rng.integers(1, 4, size=3))
                n = dims[0] * dims[1] * dims[2]
                body = Image(
                    dims=dims,
                    spacing=f32(rng.uniform(0.5, 3.0, 3)),
                    payload=rng.bytes(4 * n),
                )
            device = "dev" + str(rng.integers(0, 10**9))
            ts = int(rng.integers(0, 2**63))
            data = encode(body, device, timestamp=ts)
            msg, consumed = decode_frame(data)
            assert consumed == len(data)
            assert msg.body == body
            assert msg.header.device_name == device
            assert msg.header.timestamp == ts


class TestFraming:
    def test_every_prefix_needs_more(self):
        data = encode(Status(code=1, message="hello"), "dev")
        for cut in range(len(data)):
            result, consumed = decode_frame(data[:cut])
            assert result is None
            assert consumed == 0

    def test_unknown_type_keeps_stream_in_sync(self):
        unknown = encode(Unknown(b"\x01" * 10), "dev", type_name="FUTURETYPE")
        normal = encode(Transform(IDENTITY_ROWS), "dev")
        decoder = StreamDecoder()
        messages = decoder.feed(unknown + normal)
        assert len(messages) == 2
        assert isinstance(messages[0].body, Unknown)
        assert isinstance(messages[1].body, Transform)

    def test_crc_mismatch_consumes_frame(self):
        good = bytearray(encode(Status(code=1, message="x"), "dev"))
        good[-1] ^= 0xFF
        with pytest.raises(IntegrityError) as err:
            decode_frame(bytes(good))
        assert err.value.consumed == len(good)
        # stream decoder skips the bad frame and keeps going
        events = []
        decoder = StreamDecoder(on_integrity_error=events.append)
        tail = encode(Transform(IDENTITY_ROWS), "dev")
        messages = decoder.feed(bytes(good) + tail)
        assert len(messages) == 1
        assert isinstance(messages[0].body, Transform)
        assert len(events) == 1

    def test_oversize_protective_reject(self):
        header = struct.pack(
            ">H12s20sQQQ", 1, b"TRANSFORM", b"dev", 0, 1 << 40, 0
        )
        with pytest.raises(OversizeError):
            decode_frame(header)

    def test_env_cap_override(self, monkeypatch):
        monkeypatch.setenv("BRACHY_IGTL_MAX_BODY", "16")
        data = encode(Transform(IDENTITY_ROWS), "dev")
        with pytest.raises(OversizeError):
            decode_frame(data)

    def test_malformed_known_type_becomes_unknown(self):
        # TRANSFORM with a 5-byte body cannot be a transform
        body = b"\x00" * 5
        header = struct.pack(
            ">H12s20sQQQ", 1, b"TRANSFORM", b"dev", 0, len(body), crc64(body)
        )
        msg, consumed = decode_frame(header + body)
        assert isinstance(msg.body, Unknown)
        assert consumed == HEADER_SIZE + 5

    def test_fuzz_never_crashes(self):
        rng = np.random.default_rng(7)
        for _ in range(5000):
            buf = rng.bytes(int(rng.integers(0, 120)))
            try:
                decode_frame(buf)
            except ProtocolError:
                pass

    def test_decoder_never_reads_past_body(self):
        a = encode(Status(code=1), "dev")
        b = encode(Status(code=2), "dev")
        msg, consumed = decode_frame(a + b)
        assert consumed == len(a)
        assert msg.body.code == 1


class TestServer:
    def test_in_order_delivery(self):
        got = []
        done = threading.Event()

        def handler(peer, msg):
            got.append(msg)
            if len(got) == 3:
                done.set()

        server = serve(handler, port=0)
        try:
            conn = IgtlConnection.open("127.0.0.1", server.port)
            for code in (1, 2, 3):
                conn.send(Status(code=code), "dev")
            assert done.wait(5)
            assert [m.body.code for m in got] == [1, 2, 3]
            conn.close()
        finally:
            server.stop()

    def test_two_clients_per_connection_order(self):
        got = {}
        lock = threading.Lock()
        hits = threading.Semaphore(0)

        def handler(peer, msg):
            with lock:
                got.setdefault(msg.header.device_name, []).append(msg.body.code)
            hits.release()

        server = serve(handler, port=0)
        try:
            c1 = IgtlConnection.open("127.0.0.1", server.port)
            c2 = IgtlConnection.open("127.0.0.1", server.port)
            for i in range(5):
                c1.send(Status(code=i), "client-a")
                c2.send(Status(code=10 + i), "client-b")
            for _ in range(10):
                assert hits.acquire(timeout=5)
            assert got["client-a"] == list(range(5))
            assert got["client-b"] == list(range(10, 15))
            c1.close()
            c2.close()
        finally:
            server.stop()

    def test_garbage_closes_only_that_connection(self):
        got = []
        hit = threading.Event()

        def handler(peer, msg):
            got.append(msg)
            hit.set()

        server = serve(handler, port=0)
        try:
            bad = IgtlConnection.open("127.0.0.1", server.port)
            bad.send_raw(struct.pack(">H12s20sQQQ", 1, b"X", b"x", 0, 1 << 50, 0))
            time.sleep(0.2)
            good = IgtlConnection.open("127.0.0.1", server.port)
            good.send(Status(code=9), "dev")
            assert hit.wait(5)
            assert got[0].body.code == 9
            good.close()
            bad.close()
        finally:
            server.stop()


class TestPushVolume:
    def test_loopback_round_trip(self):
        vol = make_volume(
            np.arange(8, dtype=np.float32).reshape(2, 2, 2),
            spacing=(0.5, 0.5, 1.0),
            origin=(1.0, 2.0, 3.0),
        )
        received = []
        done = threading.Event()

        def handler(peer, msg):
            received.append(msg)
            if len(received) == 2:
                done.set()

        server = serve(handler, port=0)
        try:
            conn = IgtlConnection.open("127.0.0.1", server.port)
            push_volume(conn, vol, "case-1")
            assert done.wait(5)
            image_msg = next(m for m in received if isinstance(m.body, Image))
            tf_msg = next(m for m in received if isinstance(m.body, Transform))
            assert image_msg.header.device_name == "case-1"
            rows = np.array(tf_msg.body.matrix_rows).reshape(3, 4)
            back = volume_from_image(image_msg.body, origin=rows[:, 3], orientation=rows[:, :3])
            assert back.dims == vol.dims
            assert back.spacing == vol.spacing
            np.testing.assert_array_equal(back.voxels, vol.voxels)
            conn.close()
        finally:
            server.stop()

    def test_dims_overflow(self):
        vol = make_volume(np.zeros((2, 2, 2), dtype=np.float32))
        big = Image(dims=(70000, 1, 1), spacing=(1.0, 1.0, 1.0), payload=b"")
        with pytest.raises(EncodeError):
            encode(big, "dev")

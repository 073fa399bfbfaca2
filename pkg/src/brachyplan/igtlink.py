"""Framed TCP message protocol for intraoperative exchange.

Every message starts with a 58-byte big-endian header (version u16,
type name 12 bytes, device name 20 bytes, timestamp u64, body size u64,
body CRC u64) followed by the body. Receivers that know only the header can
skip bodies of unknown type, so mixed-version peers never desynchronize.

Typed bodies:
    TRANSFORM  12 float32, row-major 3x4 rigid transform
    STATUS     code u16, subcode i64, error name 20 bytes, message text
    IMAGE      dims 3xu16, spacing 3xf32, dtype u8, pad u8, raw voxels
               (little-endian, x-fastest; origin/orientation travel in a
               companion TRANSFORM under the same device name)

The body checksum is CRC-64/ECMA-182 (poly 0x42F0E1EBA9EA3693, init 0,
no reflection, no final xor).
"""

from __future__ import annotations

import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 58
HEADER_STRUCT = struct.Struct(">H12s20sQQQ")
PROTOCOL_VERSION = 1
DEFAULT_PORT = 18944
MAX_BODY_ENV = "BRACHY_IGTL_MAX_BODY"
DEFAULT_MAX_BODY = 1 << 30  # 1 GiB protective cap

IMAGE_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<i2"), 2: np.dtype("<f4")}
IMAGE_DTYPE_CODES = {v: k for k, v in IMAGE_DTYPES.items()}


class ProtocolError(Exception):
    """Base for all wire-protocol failures."""


class EncodeError(ProtocolError, ValueError):
    """Message fields cannot be represented on the wire."""


class IntegrityError(ProtocolError):
    """Body checksum mismatch; the frame itself stayed in sync."""

    def __init__(self, message: str, consumed: int):
        super().__init__(message)
        self.consumed = consumed


class OversizeError(ProtocolError):
    """Declared body size exceeds the configured maximum."""


# --- CRC-64/ECMA-182 --------------------------------------------------------

_CRC_POLY = 0x42F0E1EBA9EA3693
_CRC_MASK = (1 << 64) - 1


def _make_crc_table() -> list[int]:
    table = []
    for i in range(256):
        c = i << 56
        for _ in range(8):
            c = ((c << 1) ^ _CRC_POLY if c & (1 << 63) else c << 1) & _CRC_MASK
        table.append(c)
    return table


_CRC_TABLE = _make_crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/ECMA-182; crc64(b"123456789") == 0x6C40DF5F0B497347."""
    table = _CRC_TABLE
    for b in data:
        crc = (table[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)) & _CRC_MASK
    return crc


# --- message model ----------------------------------------------------------

@dataclass(frozen=True)
class MessageHeader:
    type_name: str
    device_name: str
    timestamp: int = 0
    body_size: int = 0
    body_crc: int = 0
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Transform:
    matrix_rows: tuple[float, ...]  # 12 numbers, row-major 3x4

    def __post_init__(self):
        rows = tuple(float(x) for x in self.matrix_rows)
        if len(rows) != 12:
            raise ValueError("transform body needs exactly 12 numbers")
        object.__setattr__(self, "matrix_rows", rows)


@dataclass(frozen=True)
class Status:
    code: int = 1
    subcode: int = 0
    error_name: str = ""
    message: str = ""


@dataclass(frozen=True)
class Image:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    payload: bytes
    dtype_code: int = 2


@dataclass(frozen=True)
class Unknown:
    raw: bytes


Body = Transform | Status | Image | Unknown


@dataclass(frozen=True)
class Message:
    header: MessageHeader
    body: Body


def _pack_name(value: str, width: int, what: str) -> bytes:
    try:
        raw = value.encode("ascii", "strict") if value else b""
    except UnicodeEncodeError as e:
        raise EncodeError(f"{what} {value!r} is not ASCII") from e
    if len(raw) > width:
        raise EncodeError(f"{what} {value!r} exceeds {width} bytes")
    return raw.ljust(width, b"\0")


def _unpack_name(raw: bytes) -> str:
    return raw.split(b"\0", 1)[0].decode("ascii", "replace")


def _encode_body(body: Body) -> tuple[str, bytes]:
    try:
        return _encode_body_inner(body)
    except struct.error as e:
        raise EncodeError(f"body field out of range: {e}") from e


def _encode_body_inner(body: Body) -> tuple[str, bytes]:
    if isinstance(body, Transform):
        return "TRANSFORM", struct.pack(">12f", *body.matrix_rows)
    if isinstance(body, Status):
        name = _pack_name(body.error_name, 20, "status error name")
        text = body.message.encode("utf-8")
        return "STATUS", struct.pack(">Hq", body.code, body.subcode) + name + text
    if isinstance(body, Image):
        dims = body.dims
        if any(not 0 < d <= 0xFFFF for d in dims):
            raise EncodeError(f"image dims {dims} do not fit u16")
        dtype = IMAGE_DTYPES.get(body.dtype_code)
        if dtype is None:
            raise EncodeError(f"unknown image dtype code {body.dtype_code}")
        expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
        if len(body.payload) != expected:
            raise EncodeError(
                f"image payload is {len(body.payload)} bytes, expected {expected}"
            )
        sub = struct.pack(">3H3fBB", *dims, *body.spacing, body.dtype_code, 0)
        return "IMAGE", sub + body.payload
    if isinstance(body, Unknown):
        raise EncodeError("unknown-typed bodies need an explicit type name")
    raise EncodeError(f"unsupported body {type(body).__name__}")


def encode(msg_or_body, device_name: str | None = None, *,
           type_name: str | None = None, timestamp: int = 0) -> bytes:
    """Serialize a Message (or a bare body + device name) to wire bytes.

    body_size and body_crc are always computed here, never trusted from the
    caller; the emitted header is exactly 58 bytes.
    """
    if isinstance(msg_or_body, Message):
        header = msg_or_body.header
        body = msg_or_body.body
        device_name = header.device_name
        timestamp = header.timestamp
        version = header.version
        declared_type = header.type_name
    else:
        body = msg_or_body
        if device_name is None:
            raise EncodeError("device_name required when encoding a bare body")
        version = PROTOCOL_VERSION
        declared_type = type_name
    if isinstance(body, Unknown):
        if not declared_type:
            raise EncodeError("unknown-typed bodies need an explicit type name")
        wire_type, payload = declared_type, body.raw
    else:
        wire_type, payload = _encode_body(body)
        if declared_type and declared_type != wire_type:
            raise EncodeError(
                f"type name {declared_type!r} does not match body type {wire_type!r}"
            )
    header_bytes = HEADER_STRUCT.pack(
        version,
        _pack_name(wire_type, 12, "type name"),
        _pack_name(device_name, 20, "device name"),
        timestamp,
        len(payload),
        crc64(payload),
    )
    assert len(header_bytes) == HEADER_SIZE
    return header_bytes + payload


def max_body_size() -> int:
    value = os.environ.get(MAX_BODY_ENV)
    if value:
        try:
            return int(value)
        except ValueError:
            pass
    return DEFAULT_MAX_BODY


def _decode_body(type_name: str, body: bytes) -> Body:
    try:
        if type_name == "TRANSFORM" and len(body) == 48:
            return Transform(matrix_rows=struct.unpack(">12f", body))
        if type_name == "STATUS" and len(body) >= 30:
            code, subcode = struct.unpack_from(">Hq", body, 0)
            error_name = _unpack_name(body[10:30])
            message = body[30:].decode("utf-8", "replace")
            return Status(code=code, subcode=subcode, error_name=error_name, message=message)
        if type_name == "IMAGE" and len(body) >= 20:
            dims = struct.unpack_from(">3H", body, 0)
            spacing = struct.unpack_from(">3f", body, 6)
            dtype_code = body[18]
            dtype = IMAGE_DTYPES.get(dtype_code)
            if dtype is not None:
                expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
                if len(body) == 20 + expected and all(d > 0 for d in dims):
                    return Image(
                        dims=dims,
                        spacing=tuple(float(s) for s in spacing),
                        payload=body[20:],
                        dtype_code=dtype_code,
                    )
    except struct.error:
        pass
    # unknown type, or a known type with a body we cannot interpret: keep
    # the raw bytes rather than dropping the frame
    return Unknown(raw=body)


def decode_frame(buffer: bytes | bytearray | memoryview, *,
                 max_body: int | None = None) -> tuple[Message | None, int]:
    """Decode one message from the front of a byte buffer.

    Returns (message, consumed_bytes), or (None, 0) when more bytes are
    needed. Raises OversizeError for hostile body sizes and IntegrityError
    (carrying the frame length) on checksum mismatch; both leave the caller
    able to keep the stream framed. Never raises anything else, whatever
    the input bytes.
    """
    if len(buffer) < HEADER_SIZE:
        return None, 0
    version, type_raw, device_raw, timestamp, body_size, body_crc = HEADER_STRUCT.unpack_from(
        buffer, 0
    )
    limit = max_body_size() if max_body is None else max_body
    if body_size > limit:
        raise OversizeError(f"declared body of {body_size} bytes exceeds cap {limit}")
    total = HEADER_SIZE + body_size
    if len(buffer) < total:
        return None, 0
    body = bytes(buffer[HEADER_SIZE:total])
    if crc64(body) != body_crc:
        raise IntegrityError("body checksum mismatch", consumed=total)
    type_name = _unpack_name(type_raw)
    header = MessageHeader(
        type_name=type_name,
        device_name=_unpack_name(device_raw),
        timestamp=timestamp,
        body_size=body_size,
        body_crc=body_crc,
        version=version,
    )
    return Message(header=header, body=_decode_body(type_name, body)), total


class StreamDecoder:
    """Incremental decoder: feed bytes, iterate complete messages.

    Checksum failures are reported through on_integrity_error (default:
    silently skip the frame); the stream stays synchronized either way.
    """

    def __init__(self, max_body: int | None = None, on_integrity_error=None):
        self._buf = bytearray()
        self._max_body = max_body
        self._on_integrity_error = on_integrity_error

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg, consumed = decode_frame(self._buf, max_body=self._max_body)
            except IntegrityError as e:
                del self._buf[: e.consumed]
                if self._on_integrity_error is not None:
                    self._on_integrity_error(e)
                continue
            if msg is None:
                return out
            del self._buf[:consumed]
            out.append(msg)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# --- transport --------------------------------------------------------------

class IgtlConnection:
    """Client-side connection; one writer per connection."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()
        self._decoder = StreamDecoder()
        self._pending: list[Message] = []

    @classmethod
    def open(cls, host: str, port: int, timeout: float = 10.0) -> "IgtlConnection":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, body_or_message, device_name: str | None = None, **kw) -> None:
        data = encode(body_or_message, device_name, **kw)
        with self._lock:
            self._sock.sendall(data)

    def send_raw(self, data: bytes) -> None:
        with self._lock:
            self._sock.sendall(data)

    def recv_message(self, timeout: float | None = None) -> Message | None:
        """Block for the next message; None when the peer closes."""
        self._sock.settimeout(timeout)
        while True:
            if self._pending:
                return self._pending.pop(0)
            chunk = self._sock.recv(65536)
            if not chunk:
                return None
            self._pending.extend(self._decoder.feed(chunk))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def push_volume(conn: IgtlConnection, vol, device_name: str) -> None:
    """Send a volume as an IMAGE plus a companion TRANSFORM.

    The IMAGE carries dims/spacing/voxels; the TRANSFORM under the same
    device name carries origin and orientation so the receiver can rebuild
    the full grid geometry.
    """
    from .volume import DTYPES as SVOL_DTYPES

    dims = vol.dims
    if any(d > 0xFFFF for d in dims):
        raise EncodeError(f"volume dims {dims} do not fit the u16 wire field")
    dtype = vol.voxels.dtype
    wire_dtype = None
    for code, dt in IMAGE_DTYPES.items():
        if dt == dtype:
            wire_dtype = code
    if wire_dtype is None:
        wire_dtype = 2
        payload = np.ascontiguousarray(
            vol.voxels.ravel(order="F"), SVOL_DTYPES["float32"]
        ).tobytes()
    else:
        payload = np.ascontiguousarray(vol.voxels.ravel(order="F"), dtype).tobytes()
    image = Image(dims=dims, spacing=vol.spacing, payload=payload, dtype_code=wire_dtype)
    rows = list(np.hstack([vol.orientation, np.asarray(vol.origin).reshape(3, 1)]).ravel())
    conn.send(image, device_name)
    conn.send(Transform(matrix_rows=tuple(float(r) for r in rows)), device_name)


def volume_from_image(image: Image, origin=(0.0, 0.0, 0.0), orientation=None):
    """Rebuild a ScalarVolume from an IMAGE body (plus optional geometry)."""
    from .volume import ScalarVolume

    dtype = IMAGE_DTYPES[image.dtype_code]
    voxels = np.frombuffer(image.payload, dtype=dtype).reshape(image.dims, order="F")
    return ScalarVolume(
        dims=image.dims,
        spacing=image.spacing,
        origin=origin,
        orientation=np.eye(3) if orientation is None else orientation,
        voxels=voxels,
        modality_tag="IGTL",
    )


class IgtlServer:
    """Threaded TCP listener delivering decoded messages to a handler.

    handler(peer, message) runs on the connection's thread, so per-
    connection delivery order matches wire order. Unknown-typed messages
    are delivered, not dropped. A connection that oversteps the body cap
    or garbles a frame beyond recovery is closed without disturbing the
    others. stop() unblocks every connection and joins its thread, so
    messages already received are handled before it returns.
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 max_body: int | None = None):
        self.handler = handler
        self._max_body = max_body
        self._conn_lock = threading.Lock()
        self._conn_sockets: set[socket.socket] = set()
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def setup(self):
                with outer._conn_lock:
                    outer._conn_sockets.add(self.request)

            def finish(self):
                with outer._conn_lock:
                    outer._conn_sockets.discard(self.request)

            def handle(self):
                decoder = StreamDecoder(max_body=outer._max_body)
                peer = self.client_address
                while True:
                    try:
                        chunk = self.request.recv(65536)
                    except OSError:
                        return
                    if not chunk:
                        return
                    try:
                        messages = decoder.feed(chunk)
                    except OversizeError:
                        return  # close just this connection
                    for msg in messages:
                        try:
                            outer.handler(peer, msg)
                        except Exception:
                            return  # handler fault: close this connection only

        class _Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            block_on_close = True
            allow_reuse_address = True

        self._server = _Server((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> "IgtlServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        # unblock handler reads so their threads can finish delivering what
        # they already received, then join them via server_close
        with self._conn_lock:
            for sock in list(self._conn_sockets):
                try:
                    sock.shutdown(socket.SHUT_RD)
                except OSError:
                    pass
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve(handler, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
          max_body: int | None = None) -> IgtlServer:
    """Start a listener; returns the running server handle."""
    return IgtlServer(handler, host=host, port=port, max_body=max_body).start()

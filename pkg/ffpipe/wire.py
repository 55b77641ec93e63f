# ffpipe/wire.py
"""
Binary wire protocol.

Every message is one little-endian frame:

    magic 0xFF50 u16 | version u8 | msg_type u8 | payload_len u32 | payload | crc64 u64

The CRC (CRC-64/WE, via crcmod) covers header and payload. The same
LayerSnapshot encoding is used on the TCP transport and in model files.
"""
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple

import crcmod.predefined
import numpy as np

from .classify import SoftmaxHead, scored_layers
from .exceptions import ChecksumError, ProtocolError
from .layers import DEFAULT_THETA, FFLayer
from .perfopt import PerLayerHead
from .tensor import AdamState

MAGIC = 0xFF50
VERSION = 1

HEADER = struct.Struct('<HBBI')
TRAILER = struct.Struct('<Q')
SNAPSHOT_HEADER = struct.Struct('<HHIIBB')
NEGATIVES_HEADER = struct.Struct('<HHI')
CONTROL_HEADER = struct.Struct('<BHBHH')
ADAM_STEP = struct.Struct('<Q')

MAX_PAYLOAD = 1 << 31

crc64 = crcmod.predefined.mkPredefinedCrcFun('crc-64-we')


class MsgType(IntEnum):
    LAYER_SNAPSHOT = 0x01
    NEG_LABELS = 0x02
    CONTROL = 0x03
    METRICS = 0x04


class SnapshotKind(IntEnum):
    FF_LAYER = 0
    SOFTMAX_HEAD = 1
    PERFOPT_HEAD = 2


class ControlOp(IntEnum):
    START = 1
    DONE = 2
    ABORT = 3
    GET_SNAPSHOT = 4
    GET_NEGATIVES = 5
    ACK = 6


_DTYPE_FLAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FLAG_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}


def encode_frame(msg_type: MsgType, payload: bytes) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, int(msg_type), len(payload))
    return header + payload + TRAILER.pack(crc64(header + payload))


def parse_header(header: bytes) -> Tuple[MsgType, int]:
    """
    Validate a frame header.

    Returns:
        (msg_type, payload_len)

    Raises:
        ProtocolError: Bad magic, version or message type
    """
    if len(header) != HEADER.size:
        raise ProtocolError(f"Short frame header: {len(header)} bytes")
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"Bad frame magic 0x{magic:04x}")
    if version != VERSION:
        raise ProtocolError(f"Unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"Frame payload too large: {length}")
    try:
        return MsgType(msg_type), length
    except ValueError:
        raise ProtocolError(f"Unknown message type 0x{msg_type:02x}")


def verify_frame(header: bytes, payload: bytes, trailer: bytes) -> None:
    (expected,) = TRAILER.unpack(trailer)
    got = crc64(header + payload)
    if expected != got:
        raise ChecksumError(expected, got)


def decode_frame(frame: bytes) -> Tuple[MsgType, bytes]:
    """
    Split and verify one complete frame.

    Raises:
        ProtocolError: Malformed frame
        ChecksumError: CRC mismatch
    """
    header = frame[:HEADER.size]
    msg_type, length = parse_header(header)
    end = HEADER.size + length
    if len(frame) != end + TRAILER.size:
        raise ProtocolError(f"Frame length {len(frame)} does not match header ({end + TRAILER.size})")
    payload = frame[HEADER.size:end]
    verify_frame(header, payload, frame[end:])
    return msg_type, payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ProtocolError(f"Connection closed with {remaining} of {n} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def read_frame(sock: socket.socket, eof_ok: bool = False) -> Optional[Tuple[MsgType, bytes, int]]:
    """
    Read one frame from a stream socket.

    Args:
        sock: Connected stream socket
        eof_ok: Return None if the peer closed the connection between frames

    Returns:
        (msg_type, payload, frame size in bytes)
    """
    first = sock.recv(HEADER.size)
    if not first:
        if eof_ok:
            return None
        raise ProtocolError("Connection closed before a frame header")
    header = first + recv_exact(sock, HEADER.size - len(first)) if len(first) < HEADER.size else first
    msg_type, length = parse_header(header)
    payload = recv_exact(sock, length)
    trailer = recv_exact(sock, TRAILER.size)
    verify_frame(header, payload, trailer)
    return msg_type, payload, HEADER.size + length + TRAILER.size


def _array_bytes(a: np.ndarray, dtype: np.dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


@dataclass
class LayerSnapshot:
    """Serialized parameters and optimizer state of one layer or head at one chapter."""
    layer_index: int
    chapter: int
    weights: np.ndarray
    bias: np.ndarray
    adam_w: AdamState
    adam_b: AdamState
    kind: SnapshotKind = SnapshotKind.FF_LAYER

    @property
    def key(self) -> Tuple[int, int, int]:
        return int(self.kind), self.layer_index, self.chapter

    @classmethod
    def from_layer(cls, layer: FFLayer, layer_index: int, chapter: int) -> 'LayerSnapshot':
        return cls(layer_index, chapter, layer.weights.copy(), layer.bias.copy(),
                   layer.adam_w.copy(), layer.adam_b.copy(), SnapshotKind.FF_LAYER)

    @classmethod
    def from_softmax_head(cls, head: SoftmaxHead, num_layers: int, chapter: int) -> 'LayerSnapshot':
        return cls(num_layers, chapter, head.weights.copy(), head.bias.copy(),
                   head.adam_w.copy(), head.adam_b.copy(), SnapshotKind.SOFTMAX_HEAD)

    @classmethod
    def from_perfopt_head(cls, head: PerLayerHead, chapter: int) -> 'LayerSnapshot':
        return cls(head.layer_index, chapter, head.weights.copy(), head.bias.copy(),
                   head.adam_w.copy(), head.adam_b.copy(), SnapshotKind.PERFOPT_HEAD)

    def to_layer(self, theta: float = DEFAULT_THETA) -> FFLayer:
        self._expect(SnapshotKind.FF_LAYER)
        return FFLayer(self.weights.copy(), self.bias.copy(), self.adam_w.copy(), self.adam_b.copy(), theta)

    def to_softmax_head(self) -> SoftmaxHead:
        self._expect(SnapshotKind.SOFTMAX_HEAD)
        return SoftmaxHead(self.weights.copy(), self.bias.copy(), self.adam_w.copy(), self.adam_b.copy(),
                           scored_layers(self.layer_index))

    def to_perfopt_head(self) -> PerLayerHead:
        self._expect(SnapshotKind.PERFOPT_HEAD)
        return PerLayerHead(self.weights.copy(), self.bias.copy(), self.adam_w.copy(), self.adam_b.copy(),
                            self.layer_index)

    def _expect(self, kind: SnapshotKind) -> None:
        if self.kind != kind:
            raise ProtocolError(f"Expected a {kind.name} snapshot, got {SnapshotKind(self.kind).name}")

    def copy(self) -> 'LayerSnapshot':
        return LayerSnapshot(self.layer_index, self.chapter, self.weights.copy(), self.bias.copy(),
                             self.adam_w.copy(), self.adam_b.copy(), self.kind)

    def payload_size(self) -> int:
        return SNAPSHOT_HEADER.size + 3 * (self.weights.nbytes + self.bias.nbytes) + 2 * ADAM_STEP.size

    def encode(self) -> bytes:
        """Encode as a LayerSnapshot payload."""
        dtype = np.dtype(self.weights.dtype)
        if dtype not in _DTYPE_FLAGS:
            raise ProtocolError(f"Cannot encode arrays of dtype {dtype}")
        wire_dtype = _FLAG_DTYPES[_DTYPE_FLAGS[dtype]]
        rows, cols = self.weights.shape
        parts = [
            SNAPSHOT_HEADER.pack(self.layer_index, self.chapter, rows, cols, _DTYPE_FLAGS[dtype], int(self.kind)),
            _array_bytes(self.weights, wire_dtype),
            _array_bytes(self.bias, wire_dtype),
            _array_bytes(self.adam_w.m, wire_dtype),
            _array_bytes(self.adam_w.v, wire_dtype),
            ADAM_STEP.pack(self.adam_w.t),
            _array_bytes(self.adam_b.m, wire_dtype),
            _array_bytes(self.adam_b.v, wire_dtype),
            ADAM_STEP.pack(self.adam_b.t),
        ]
        return b''.join(parts)

    @property
    def checksum(self) -> int:
        return crc64(self.encode())

    @classmethod
    def decode(cls, payload: bytes) -> 'LayerSnapshot':
        """
        Decode a LayerSnapshot payload.

        Raises:
            ProtocolError: If the payload is malformed
        """
        if len(payload) < SNAPSHOT_HEADER.size:
            raise ProtocolError("LayerSnapshot payload shorter than its header")
        layer_index, chapter, rows, cols, flag, kind = SNAPSHOT_HEADER.unpack_from(payload)
        if flag not in _FLAG_DTYPES:
            raise ProtocolError(f"Unknown precision flag {flag}")
        try:
            kind = SnapshotKind(kind)
        except ValueError:
            raise ProtocolError(f"Unknown snapshot kind {kind}")
        dtype = _FLAG_DTYPES[flag]
        w_bytes = rows * cols * dtype.itemsize
        b_bytes = cols * dtype.itemsize
        expected = SNAPSHOT_HEADER.size + 3 * (w_bytes + b_bytes) + 2 * ADAM_STEP.size
        if len(payload) != expected:
            raise ProtocolError(f"LayerSnapshot payload is {len(payload)} bytes, expected {expected}")

        offset = SNAPSHOT_HEADER.size

        def take(nbytes: int, shape) -> np.ndarray:
            nonlocal offset
            arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            offset += nbytes
            return arr.reshape(shape).astype(dtype.newbyteorder('='))

        def take_step() -> int:
            nonlocal offset
            (t,) = ADAM_STEP.unpack_from(payload, offset)
            offset += ADAM_STEP.size
            return t

        weights = take(w_bytes, (rows, cols))
        bias = take(b_bytes, (cols,))
        adam_w = AdamState(take(w_bytes, (rows, cols)), take(w_bytes, (rows, cols)), take_step())
        adam_b = AdamState(take(b_bytes, (cols,)), take(b_bytes, (cols,)), take_step())
        return cls(layer_index, chapter, weights, bias, adam_w, adam_b, kind)


def encode_negatives(chapter: int, num_classes: int, labels: np.ndarray) -> bytes:
    return NEGATIVES_HEADER.pack(chapter, num_classes, len(labels)) + _array_bytes(labels, np.dtype('<u2'))


def decode_negatives(payload: bytes) -> Tuple[int, int, np.ndarray]:
    """
    Returns:
        (chapter, num_classes, labels)
    """
    if len(payload) < NEGATIVES_HEADER.size:
        raise ProtocolError("NegLabels payload shorter than its header")
    chapter, num_classes, count = NEGATIVES_HEADER.unpack_from(payload)
    if len(payload) != NEGATIVES_HEADER.size + 2 * count:
        raise ProtocolError(f"NegLabels payload holds {len(payload)} bytes for {count} labels")
    labels = np.frombuffer(payload, dtype='<u2', count=count, offset=NEGATIVES_HEADER.size).astype(np.int64)
    return chapter, num_classes, labels


@dataclass
class ControlMessage:
    """start/done/abort notifications and rendezvous requests."""
    op: ControlOp
    node_id: int = 0
    kind: int = 0
    layer_index: int = 0
    chapter: int = 0
    reason: str = ''

    def encode(self) -> bytes:
        head = CONTROL_HEADER.pack(int(self.op), self.node_id, self.kind, self.layer_index, self.chapter)
        return head + self.reason.encode('utf-8')

    @classmethod
    def decode(cls, payload: bytes) -> 'ControlMessage':
        if len(payload) < CONTROL_HEADER.size:
            raise ProtocolError("Control payload shorter than its header")
        op, node_id, kind, layer_index, chapter = CONTROL_HEADER.unpack_from(payload)
        try:
            op = ControlOp(op)
        except ValueError:
            raise ProtocolError(f"Unknown control op {op}")
        reason = payload[CONTROL_HEADER.size:].decode('utf-8', errors='replace')
        return cls(op, node_id, kind, layer_index, chapter, reason)

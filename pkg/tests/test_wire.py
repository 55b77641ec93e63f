import socket

import numpy as np
import pytest

from ffpipe.classify import SoftmaxHead
from ffpipe.exceptions import ChecksumError, ProtocolError
from ffpipe.layers import ff_batch_update
from ffpipe.wire import (
    HEADER,
    ControlMessage,
    ControlOp,
    LayerSnapshot,
    MsgType,
    SnapshotKind,
    crc64,
    decode_frame,
    decode_negatives,
    encode_frame,
    encode_negatives,
    read_frame,
)


@pytest.fixture
def trained_layer(random_layer, rng):
    layer = random_layer(6, 5)
    x = rng.uniform(size=(4, 6))
    for _ in range(3):
        ff_batch_update(layer, x, x[::-1].copy(), lr=0.01)
    return layer


class TestFrames:
    def test_crc_is_crc64_we(self):
        assert crc64(b'123456789') == 0x62EC59E3F1A4F00A

    def test_frame_layout(self):
        frame = encode_frame(MsgType.CONTROL, b'hello')
        assert frame[:2] == b'\x50\xff'
        assert len(frame) == HEADER.size + 5 + 8
        assert decode_frame(frame) == (MsgType.CONTROL, b'hello')

    def test_corrupt_payload(self):
        frame = bytearray(encode_frame(MsgType.CONTROL, b'hello'))
        frame[HEADER.size + 1] ^= 0x01
        with pytest.raises(ChecksumError):
            decode_frame(bytes(frame))

    def test_corrupt_header_is_caught_by_crc(self):
        frame = bytearray(encode_frame(MsgType.CONTROL, b'hello'))
        frame[3] = MsgType.METRICS
        with pytest.raises(ChecksumError):
            decode_frame(bytes(frame))

    @pytest.mark.parametrize('offset,value', [(0, 0x00), (2, 0x02), (3, 0x09)])
    def test_bad_header_fields(self, offset, value):
        frame = bytearray(encode_frame(MsgType.CONTROL, b'x'))
        frame[offset] = value
        with pytest.raises(ProtocolError):
            decode_frame(bytes(frame))

    def test_length_mismatch(self):
        with pytest.raises(ProtocolError):
            decode_frame(encode_frame(MsgType.CONTROL, b'hello')[:-1])


class TestSocketFrames:
    def test_read_frame(self):
        a, b = socket.socketpair()
        with a, b:
            a.sendall(encode_frame(MsgType.NEG_LABELS, b'abc'))
            msg_type, payload, size = read_frame(b)
            assert (msg_type, payload, size) == (MsgType.NEG_LABELS, b'abc', HEADER.size + 3 + 8)

    def test_corrupted_in_transit(self):
        a, b = socket.socketpair()
        with a, b:
            frame = bytearray(encode_frame(MsgType.LAYER_SNAPSHOT, bytes(64)))
            frame[HEADER.size + 10] ^= 0xFF
            a.sendall(bytes(frame))
            with pytest.raises(ChecksumError):
                read_frame(b)

    def test_clean_close(self):
        a, b = socket.socketpair()
        with b:
            a.close()
            assert read_frame(b, eof_ok=True) is None

    def test_close_without_eof_ok(self):
        a, b = socket.socketpair()
        with b:
            a.close()
            with pytest.raises(ProtocolError):
                read_frame(b)

    def test_close_mid_frame(self):
        a, b = socket.socketpair()
        with b:
            a.sendall(encode_frame(MsgType.CONTROL, b'hello')[:-3])
            a.close()
            with pytest.raises(ProtocolError):
                read_frame(b, eof_ok=True)


class TestLayerSnapshot:
    @pytest.mark.parametrize('dtype', [np.float64, np.float32])
    def test_encoding_is_lossless(self, random_layer, rng, dtype):
        layer = random_layer(6, 5, dtype=dtype)
        x = rng.uniform(size=(4, 6)).astype(dtype)
        ff_batch_update(layer, x, x[::-1].copy(), lr=0.01)
        snap = LayerSnapshot.from_layer(layer, 2, 7)
        decoded = LayerSnapshot.decode(snap.encode())
        restored = decoded.to_layer(layer.theta)
        assert decoded.key == (SnapshotKind.FF_LAYER, 2, 7)
        assert restored.weights.dtype == dtype
        assert np.array_equal(restored.weights, layer.weights)
        assert np.array_equal(restored.adam_w.v, layer.adam_w.v)
        assert restored.adam_w.t == restored.adam_b.t == 1
        assert len(snap.encode()) == snap.payload_size()

    def test_snapshot_is_independent_of_layer(self, trained_layer):
        snap = LayerSnapshot.from_layer(trained_layer, 0, 1)
        trained_layer.weights[0, 0] += 1.0
        assert snap.weights[0, 0] != trained_layer.weights[0, 0]

    def test_softmax_head_kind(self):
        head = SoftmaxHead.create([8, 8, 8], 4, rng_seed=0)
        snap = LayerSnapshot.decode(LayerSnapshot.from_softmax_head(head, 3, 2).encode())
        assert snap.kind == SnapshotKind.SOFTMAX_HEAD
        assert snap.to_softmax_head().input_layers == (1, 2)
        with pytest.raises(ProtocolError):
            snap.to_layer()

    def test_wrong_length(self, trained_layer):
        payload = LayerSnapshot.from_layer(trained_layer, 0, 1).encode()
        with pytest.raises(ProtocolError):
            LayerSnapshot.decode(payload[:-1])
        with pytest.raises(ProtocolError):
            LayerSnapshot.decode(payload[:4])

    def test_checksum_tracks_content(self, trained_layer):
        snap = LayerSnapshot.from_layer(trained_layer, 0, 1)
        before = snap.checksum
        snap.weights[0, 0] += 1e-12
        assert snap.checksum != before


class TestMessages:
    def test_negatives(self):
        labels = np.array([3, 0, 9, 9, 1])
        chapter, num_classes, decoded = decode_negatives(encode_negatives(4, 10, labels))
        assert (chapter, num_classes) == (4, 10)
        assert np.array_equal(decoded, labels)

    def test_negatives_length_checked(self):
        with pytest.raises(ProtocolError):
            decode_negatives(encode_negatives(1, 10, np.array([1, 2]))[:-1])

    def test_control(self):
        message = ControlMessage(ControlOp.GET_SNAPSHOT, node_id=3, kind=1, layer_index=4, chapter=12,
                                 reason='2.5')
        assert ControlMessage.decode(message.encode()) == message

    def test_unknown_control_op(self):
        payload = bytearray(ControlMessage(ControlOp.ACK).encode())
        payload[0] = 99
        with pytest.raises(ProtocolError):
            ControlMessage.decode(bytes(payload))

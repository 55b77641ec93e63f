# ffpipe/transport/tcp.py
"""
TCP transport.

One BoardServer holds the rendezvous board; every node connects to it with
a TcpTransport and exchanges frames over a single connection. A get is a
Control request answered by the requested frame, by an ACK carrying
"timeout", or by an ABORT.
"""
import logging
import socket
import socketserver
import threading
import time
from typing import Optional, Tuple

import numpy as np

from ..exceptions import ChecksumError, PipelineAbortedError, ProtocolError, TransportError
from ..metrics import MetricsRecord
from ..schedule import TrainingPlan, negatives_readers, snapshot_readers
from ..wire import (
    NEGATIVES_HEADER,
    SNAPSHOT_HEADER,
    ControlMessage,
    ControlOp,
    LayerSnapshot,
    MsgType,
    decode_negatives,
    encode_frame,
    encode_negatives,
    read_frame,
)
from .base import DEFAULT_TIMEOUT, BaseTransport
from .board import Board

logger = logging.getLogger(__name__)

TIMEOUT_REPLY = 'timeout'
ORCHESTRATOR_ID = 0xFFFF
CONNECT_RETRY_SECONDS = 0.2


def _wire_id(node_id: Optional[int]) -> int:
    return node_id if node_id is not None else ORCHESTRATOR_ID


def _node_from_wire(wire_id: int) -> Optional[int]:
    return None if wire_id == ORCHESTRATOR_ID else wire_id


def _peer_name(wire_id: Optional[int]) -> str:
    if wire_id is None:
        return 'unidentified peer'
    return 'orchestrator' if wire_id == ORCHESTRATOR_ID else f"node {wire_id}"


class _BoardHandler(socketserver.BaseRequestHandler):
    """Serves one node connection until it closes."""

    def handle(self):
        server: 'BoardServer' = self.server.owner
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        node_id = None
        peer = _peer_name(None)
        while True:
            try:
                frame = read_frame(sock, eof_ok=True)
            except ChecksumError as e:
                server.board.abort(node_id, f"corrupt frame from {peer}: {e}")
                return
            except (ProtocolError, OSError) as e:
                logger.debug("Connection from %s ended: %s", peer, e)
                return
            if frame is None:
                return
            msg_type, payload, size = frame
            server.board.traffic[msg_type] += size
            try:
                if msg_type == MsgType.LAYER_SNAPSHOT:
                    server.handle_store_snapshot(payload)
                elif msg_type == MsgType.NEG_LABELS:
                    server.handle_store_negatives(payload)
                elif msg_type == MsgType.METRICS:
                    server.board.add_record(MetricsRecord.from_bytes(payload))
                else:
                    message = ControlMessage.decode(payload)
                    if message.op == ControlOp.START:
                        node_id = _node_from_wire(message.node_id)
                        peer = _peer_name(message.node_id)
                    reply = server.handle_control(message)
                    if reply is not None:
                        sock.sendall(reply)
            except ProtocolError as e:
                server.board.abort(node_id, f"protocol error from {peer}: {e}")
                return
            except OSError as e:
                logger.debug("Reply to %s failed: %s", peer, e)
                return


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BoardServer:
    """
    Rendezvous board reachable over TCP.

    Publications are stored as encoded payloads and forwarded unchanged, so
    the bytes a reader decodes are the bytes the publisher encoded.
    """

    def __init__(self, plan: TrainingPlan, host: str = '127.0.0.1', port: int = 0):
        """
        Args:
            plan: Run plan, used to count readers of each publication
            host: Interface to bind
            port: Port to bind, 0 for any free port
        """
        self.plan = plan
        self.board = Board()
        self._server = _ThreadingServer((host, port), _BoardHandler)
        self._server.owner = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> 'BoardServer':
        self._thread = threading.Thread(target=self._server.serve_forever, name='ffpipe-board', daemon=True)
        self._thread.start()
        logger.info("Board server listening on %s:%d", *self.address)
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def handle_store_snapshot(self, payload: bytes) -> None:
        if len(payload) < SNAPSHOT_HEADER.size:
            raise ProtocolError("LayerSnapshot payload shorter than its header")
        layer_index, chapter, _, _, _, kind = SNAPSHOT_HEADER.unpack_from(payload)
        self.board.put(('snap', kind, layer_index, chapter), payload,
                       snapshot_readers(self.plan, layer_index, chapter))

    def handle_store_negatives(self, payload: bytes) -> None:
        if len(payload) < NEGATIVES_HEADER.size:
            raise ProtocolError("NegLabels payload shorter than its header")
        chapter, _, _ = NEGATIVES_HEADER.unpack_from(payload)
        self.board.put(('neg', chapter), payload, negatives_readers(self.plan, chapter))

    def handle_control(self, message: ControlMessage) -> Optional[bytes]:
        """Act on a control message and return the reply frame, if any."""
        op = message.op
        if op in (ControlOp.GET_SNAPSHOT, ControlOp.GET_NEGATIVES):
            if op == ControlOp.GET_SNAPSHOT:
                key = ('snap', message.kind, message.layer_index, message.chapter)
                reply_type = MsgType.LAYER_SNAPSHOT
            else:
                key = ('neg', message.chapter)
                reply_type = MsgType.NEG_LABELS
            try:
                timeout = float(message.reason)
            except ValueError:
                raise ProtocolError(f"get request carries no timeout: {message.reason!r}")
            try:
                payload = self.board.take(key, timeout)
            except PipelineAbortedError as e:
                return encode_frame(MsgType.CONTROL,
                                    ControlMessage(ControlOp.ABORT, _wire_id(e.origin), reason=e.reason).encode())
            if payload is None:
                return encode_frame(MsgType.CONTROL, ControlMessage(ControlOp.ACK, reason=TIMEOUT_REPLY).encode())
            return encode_frame(reply_type, payload)
        if op == ControlOp.DONE:
            self.board.mark_done(message.node_id, message.reason)
        elif op == ControlOp.ABORT:
            self.board.abort(_node_from_wire(message.node_id), message.reason)
        elif op == ControlOp.START:
            logger.info("%s connected", _peer_name(message.node_id).capitalize())
        else:
            raise ProtocolError(f"Unexpected control op {op.name}")
        return encode_frame(MsgType.CONTROL, ControlMessage(ControlOp.ACK).encode())


class TcpTransport(BaseTransport):
    """Node side of the TCP transport: one connection to the board server."""

    def __init__(self,
                 plan: TrainingPlan,
                 host: str,
                 port: int,
                 node_id: Optional[int] = None,
                 timeout: float = DEFAULT_TIMEOUT,
                 connect_timeout: Optional[float] = None):
        """
        Args:
            plan: Run plan
            host: Board server host
            port: Board server port
            node_id: This node, None for the orchestrator
            timeout: Seconds a get waits
            connect_timeout: Seconds to keep retrying the connection (default: timeout)

        Raises:
            TransportError: If the board server cannot be reached
        """
        super().__init__(plan, node_id, timeout)
        self.host = host
        self.port = port
        self.sock = self._connect(connect_timeout if connect_timeout is not None else timeout)
        self._lock = threading.Lock()
        self._request(ControlMessage(ControlOp.START, self._wire_node_id))

    @property
    def _wire_node_id(self) -> int:
        return _wire_id(self.node_id)

    def _connect(self, connect_timeout: float) -> socket.socket:
        deadline = time.monotonic() + connect_timeout
        while True:
            try:
                sock = socket.create_connection((self.host, self.port), timeout=connect_timeout)
                break
            except OSError as e:
                if time.monotonic() >= deadline:
                    raise TransportError(f"Cannot reach board server at {self.host}:{self.port}: {e}",
                                         node_id=self.node_id)
                time.sleep(CONNECT_RETRY_SECONDS)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        logger.debug("node %s connected to %s:%d", self.node_id, self.host, self.port)
        return sock

    def _send(self, msg_type: MsgType, payload: bytes) -> None:
        frame = encode_frame(msg_type, payload)
        try:
            self.sock.sendall(frame)
        except OSError as e:
            raise TransportError(f"Send to board server failed: {e}", node_id=self.node_id)
        self.traffic[msg_type] += len(frame)

    def _receive(self) -> Tuple[MsgType, bytes]:
        try:
            msg_type, payload, size = read_frame(self.sock)
        except OSError as e:
            raise TransportError(f"Receive from board server failed: {e}", node_id=self.node_id)
        self.traffic[msg_type] += size
        return msg_type, payload

    def _request(self, message: ControlMessage) -> Tuple[MsgType, bytes]:
        with self._lock:
            self._send(MsgType.CONTROL, message.encode())
            msg_type, payload = self._receive()
        if msg_type == MsgType.CONTROL:
            reply = ControlMessage.decode(payload)
            if reply.op == ControlOp.ABORT:
                raise PipelineAbortedError(_node_from_wire(reply.node_id), reply.reason)
        return msg_type, payload

    def _get(self, message: ControlMessage, expected: MsgType) -> Optional[bytes]:
        msg_type, payload = self._request(message)
        if msg_type == expected:
            return payload
        if msg_type == MsgType.CONTROL and ControlMessage.decode(payload).reason == TIMEOUT_REPLY:
            return None
        raise ProtocolError(f"Expected a {expected.name} reply, got {msg_type.name}")

    def _put_snapshot(self, snapshot: LayerSnapshot) -> None:
        with self._lock:
            self._send(MsgType.LAYER_SNAPSHOT, snapshot.encode())

    def _take_snapshot(self, key, timeout: float) -> Optional[LayerSnapshot]:
        kind, layer_index, chapter = key
        payload = self._get(ControlMessage(ControlOp.GET_SNAPSHOT, self._wire_node_id, kind, layer_index,
                                           chapter, reason=repr(float(timeout))), MsgType.LAYER_SNAPSHOT)
        return LayerSnapshot.decode(payload) if payload is not None else None

    def _put_negatives(self, chapter: int, labels: np.ndarray) -> None:
        with self._lock:
            self._send(MsgType.NEG_LABELS, encode_negatives(chapter, self.plan.num_classes, labels))

    def _take_negatives(self, chapter: int, timeout: float) -> Optional[np.ndarray]:
        payload = self._get(ControlMessage(ControlOp.GET_NEGATIVES, self._wire_node_id, chapter=chapter,
                                           reason=repr(float(timeout))), MsgType.NEG_LABELS)
        if payload is None:
            return None
        _, _, labels = decode_negatives(payload)
        return labels

    def _send_metrics(self, record: MetricsRecord) -> None:
        with self._lock:
            self._send(MsgType.METRICS, record.to_bytes())

    def done(self, detail: str = '') -> None:
        self._request(ControlMessage(ControlOp.DONE, self._wire_node_id, reason=detail))

    def abort(self, reason: str) -> None:
        try:
            self._request(ControlMessage(ControlOp.ABORT, self._wire_node_id, reason=reason))
        except (TransportError, PipelineAbortedError) as e:
            logger.warning("node %s could not deliver abort: %s", self.node_id, e)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TcpNetwork:
    """A local BoardServer plus transports that connect to it over loopback or the LAN."""

    def __init__(self, plan: TrainingPlan, timeout: float = DEFAULT_TIMEOUT, host: str = '127.0.0.1', port: int = 0):
        self.plan = plan
        self.timeout = timeout
        self.server = BoardServer(plan, host, port).start()
        self.board = self.server.board

    @property
    def address(self) -> Tuple[str, int]:
        return self.server.address

    def connect(self, node_id: Optional[int]) -> TcpTransport:
        host, port = self.address
        return TcpTransport(self.plan, host, port, node_id, self.timeout)

    def close(self) -> None:
        self.server.stop()

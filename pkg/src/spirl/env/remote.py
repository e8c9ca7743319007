"""Length-prefixed binary protocol for environments living in another process.

Every message is a little-endian u32 byte count followed by the payload.

* handshake (peer -> client): ``b"SPEV"``, version u16, h u16, w u16, c u16, action_count u16
* RESET request: opcode u8 = 1, seed u64
* STEP request: opcode u8 = 2, action u16
* response to either: reward f32, done u8, then h*w*c frame bytes

One request is outstanding at a time.  Any framing error closes the session.
"""

from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from .base import Env, EnvError, StepResult

MAGIC = b"SPEV"
VERSION = 1
OP_RESET = 1
OP_STEP = 2
_HANDSHAKE = struct.Struct("<4sHHHHH")
_LEN = struct.Struct("<I")
_RESP_HEAD = struct.Struct("<fB")


class ProtocolError(EnvError):
    """Malformed message, version mismatch, timeout or a closed peer."""


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout as exc:
            raise ProtocolError("timed out waiting for the peer") from exc
        if not chunk:
            raise ProtocolError(f"peer closed the stream after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def send_message(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_message(sock: socket.socket) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return _recv_exact(sock, n)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


class RemoteEnv(Env):
    """Client side of the protocol, presenting the peer as an ordinary :class:`Env`."""

    def __init__(self, sock: socket.socket, timeout: float = 10.0):
        self._sock = sock
        self._sock.settimeout(timeout)
        self.done = True
        try:
            hello = recv_message(sock)
            if len(hello) != _HANDSHAKE.size:
                raise ProtocolError(f"handshake of {len(hello)} bytes, expected {_HANDSHAKE.size}")
            magic, version, h, w, c, n_actions = _HANDSHAKE.unpack(hello)
            if magic != MAGIC:
                raise ProtocolError(f"bad handshake magic {magic!r}")
            if version != VERSION:
                raise ProtocolError(f"peer speaks protocol version {version}, this client speaks {VERSION}")
        except ProtocolError:
            self.close()
            raise
        self.frame_shape = (h, w, c)
        self.action_count = n_actions

    @classmethod
    def connect(cls, endpoint: str, timeout: float = 10.0) -> "RemoteEnv":
        sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        return cls(sock, timeout)

    def _request(self, payload: bytes) -> StepResult:
        if self._sock is None:
            raise ProtocolError("session is closed")
        try:
            send_message(self._sock, payload)
            msg = recv_message(self._sock)
            expected = _RESP_HEAD.size + int(np.prod(self.frame_shape))
            if len(msg) != expected:
                raise ProtocolError(f"response of {len(msg)} bytes, expected {expected}")
        except (ProtocolError, OSError) as exc:
            self.close()
            if isinstance(exc, ProtocolError):
                raise
            raise ProtocolError(str(exc)) from exc
        reward, done = _RESP_HEAD.unpack_from(msg)
        frame = np.frombuffer(msg, dtype=np.uint8, offset=_RESP_HEAD.size).reshape(self.frame_shape).copy()
        return frame, float(reward), bool(done), {}

    def reset(self, seed: int) -> np.ndarray:
        frame, _, _, _ = self._request(struct.pack("<BQ", OP_RESET, int(seed)))
        self.done = False
        return frame

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        result = self._request(struct.pack("<BH", OP_STEP, self._check_action(action)))
        self.done = result[2]
        return result

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def external_env(endpoint: str, timeout: float = 10.0) -> RemoteEnv:
    return RemoteEnv.connect(endpoint, timeout)


def serve_connection(sock: socket.socket, env: Env, version: int = VERSION) -> None:
    """Reference peer: answer RESET/STEP requests for ``env`` until the client hangs up."""
    h, w, c = env.frame_shape
    send_message(sock, _HANDSHAKE.pack(MAGIC, version, h, w, c, env.action_count))
    while True:
        try:
            req = recv_message(sock)
        except ProtocolError:
            return
        if req[:1] == bytes([OP_RESET]) and len(req) == 9:
            (seed,) = struct.unpack_from("<Q", req, 1)
            frame, reward, done = env.reset(seed), 0.0, False
        elif req[:1] == bytes([OP_STEP]) and len(req) == 3:
            (action,) = struct.unpack_from("<H", req, 1)
            frame, reward, done, _ = env.step(action)
        else:
            return
        send_message(sock, _RESP_HEAD.pack(reward, int(done)) + np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


class ReferenceServer:
    """Serve one environment on a loopback TCP port from a background thread."""

    def __init__(self, env: Env, host: str = "127.0.0.1", version: int = VERSION):
        self.env = env
        self.version = version
        self._listener = socket.create_server((host, 0))
        self.endpoint = f"{host}:{self._listener.getsockname()[1]}"
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        try:
            conn, _ = self._listener.accept()
        except OSError:
            return
        with conn:
            serve_connection(conn, self.env, self.version)

    def close(self) -> None:
        self._listener.close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

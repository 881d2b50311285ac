"""MG-DIMSE: the association protocol for dataset exchange between nodes.

Framing is PDU-based (little-endian throughout): after an ASSOC-RQ/AC
handshake naming a pre-shared key, every DATA PDU body is an AES-256-GCM
SecureFrame over one DIMSE message. Frame counters are strictly increasing
per direction; any decrypt failure or counter replay aborts the association.
One association is strictly sequential request/response.
"""

from __future__ import annotations

import json
import os
import socket
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

# PDU types
ASSOC_RQ = 0x01
ASSOC_AC = 0x02
ASSOC_RJ = 0x03
DATA = 0x04
RELEASE_RQ = 0x05
RELEASE_RSP = 0x06

# ASSOC-RJ reasons
RJ_BAD_VERSION = 1
RJ_UNKNOWN_AE = 2
RJ_UNAUTHORIZED = 3

# DIMSE commands
STORE_RQ = 1
STORE_RSP = 2
FIND_RQ = 3
FIND_RSP = 4
GET_RQ = 5
GET_RSP = 6

# DIMSE statuses
ST_SUCCESS = 0
ST_PENDING = 1
ST_FAILURE = 2
ST_REFUSED = 3

PROTOCOL_VERSION = 1
MAX_BODY = 16 * 1024 * 1024
DEFAULT_PORT = 11112


class TransferError(Exception):
    pass


class ProtocolError(TransferError):
    pass


class Rejected(TransferError):
    def __init__(self, reason: int):
        self.reason = reason
        super().__init__(f"association rejected, reason {reason}")


class AssociationAborted(TransferError):
    pass


class RemoteFailure(TransferError):
    pass


class NotFoundRemote(TransferError):
    pass


class ChecksumMismatch(TransferError):
    pass


def pad_ae(title: str) -> bytes:
    raw = title.encode("ascii")
    if len(raw) > 16:
        raise ProtocolError(f"AE title too long: {title!r}")
    return raw.ljust(16, b" ")


def build_pdu(ptype: int, body: bytes) -> bytes:
    if len(body) > MAX_BODY:
        raise ProtocolError(f"PDU body too large: {len(body)}")
    return struct.pack("<BBI", ptype, 0, len(body)) + body


def parse_pdu(data: bytes) -> tuple[int, bytes]:
    if len(data) < 6:
        raise ProtocolError("short PDU")
    ptype, reserved, length = struct.unpack_from("<BBI", data)
    if reserved != 0:
        raise ProtocolError("nonzero reserved byte")
    if length > MAX_BODY:
        raise ProtocolError("PDU body too large")
    if len(data) != 6 + length:
        raise ProtocolError("PDU length mismatch")
    return ptype, data[6:]


def build_dimse(msg_id: int, command: int, status: int, payload: bytes) -> bytes:
    return struct.pack("<HBB", msg_id, command, status) + payload


def parse_dimse(data: bytes) -> tuple[int, int, int, bytes]:
    if len(data) < 4:
        raise ProtocolError("short DIMSE message")
    msg_id, command, status = struct.unpack_from("<HBB", data)
    return msg_id, command, status, data[4:]


class SecureChannel:
    """One direction pair of AES-256-GCM frame counters over a shared key."""

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ProtocolError("key must be 32 bytes")
        self.aead = AESGCM(key)
        self.send_counter = 0
        self.recv_counter = 0

    def seal(self, plaintext: bytes) -> bytes:
        self.send_counter += 1
        counter = struct.pack("<Q", self.send_counter)
        nonce = os.urandom(4) + counter
        return nonce + self.aead.encrypt(nonce, plaintext, counter)

    def open(self, frame: bytes) -> bytes:
        if len(frame) < 12 + 16:
            raise AssociationAborted("short secure frame")
        nonce = frame[:12]
        (counter,) = struct.unpack("<Q", nonce[4:])
        if counter <= self.recv_counter:
            raise AssociationAborted("frame counter replayed")
        try:
            plaintext = self.aead.decrypt(nonce, frame[12:], nonce[4:])
        except InvalidTag:
            raise AssociationAborted("frame authentication failed") from None
        self.recv_counter = counter
        return plaintext


# --- server side -------------------------------------------------------------

class DimseService:
    """What a node exposes to its SCP. Override in the node."""

    ae_title: str = "ANY"
    keys: dict[int, bytes] = {}

    def dimse_store(self, mgd_bytes: bytes) -> tuple[int, str]:
        """Returns (status, reason)."""
        raise NotImplementedError

    def dimse_find(self, ast_doc: dict) -> list[dict]:
        """Returns row documents; raises ValueError for bad queries."""
        raise NotImplementedError

    def dimse_get(self, guid: bytes) -> bytes | None:
        raise NotImplementedError


class ServerAssociation:
    """SCP state machine: feed it one PDU, get back the response PDUs.
    Raises AssociationAborted on anything fatal; the caller must then drop
    the connection."""

    def __init__(self, service: DimseService):
        self.service = service
        self.state = "awaiting_assoc"
        self.channel: SecureChannel | None = None

    def handle_pdu(self, data: bytes) -> list[bytes]:
        ptype, body = parse_pdu(data)
        if self.state == "awaiting_assoc":
            if ptype != ASSOC_RQ:
                raise AssociationAborted("expected ASSOC-RQ")
            return [self._handle_assoc(body)]
        if self.state == "open":
            if ptype == DATA:
                return self._handle_data(body)
            if ptype == RELEASE_RQ:
                self.state = "released"
                return [build_pdu(RELEASE_RSP, b"")]
            raise AssociationAborted(f"unexpected PDU type {ptype} while open")
        if ptype == RELEASE_RQ:  # releasing twice is harmless
            return [build_pdu(RELEASE_RSP, b"")]
        raise AssociationAborted("association already released")

    def _handle_assoc(self, body: bytes) -> bytes:
        if len(body) != 2 + 16 + 16 + 1:
            raise AssociationAborted("malformed ASSOC-RQ")
        (version,) = struct.unpack_from("<H", body)
        called = body[18:34]
        key_id = body[34]
        if version != PROTOCOL_VERSION:
            return build_pdu(ASSOC_RJ, bytes([RJ_BAD_VERSION]))
        if called != pad_ae(self.service.ae_title):
            return build_pdu(ASSOC_RJ, bytes([RJ_UNKNOWN_AE]))
        key = self.service.keys.get(key_id)
        if key is None:
            return build_pdu(ASSOC_RJ, bytes([RJ_UNAUTHORIZED]))
        self.channel = SecureChannel(key)
        self.state = "open"
        return build_pdu(ASSOC_AC, struct.pack("<H", PROTOCOL_VERSION))

    def _reply(self, msg_id: int, command: int, status: int, payload: bytes) -> bytes:
        frame = self.channel.seal(build_dimse(msg_id, command, status, payload))
        return build_pdu(DATA, frame)

    def _handle_data(self, body: bytes) -> list[bytes]:
        plaintext = self.channel.open(body)
        msg_id, command, status, payload = parse_dimse(plaintext)
        if command == STORE_RQ:
            st, reason = self.service.dimse_store(payload)
            return [self._reply(msg_id, STORE_RSP, st, reason.encode("utf-8"))]
        if command == FIND_RQ:
            try:
                rows = self.service.dimse_find(json.loads(payload))
            except (ValueError, KeyError) as e:
                return [self._reply(msg_id, FIND_RSP, ST_FAILURE, str(e).encode("utf-8"))]
            out = [self._reply(msg_id, FIND_RSP, ST_PENDING, json.dumps(row).encode("utf-8"))
                   for row in rows]
            out.append(self._reply(msg_id, FIND_RSP, ST_SUCCESS, b""))
            return out
        if command == GET_RQ:
            if len(payload) != 16:
                return [self._reply(msg_id, GET_RSP, ST_FAILURE, b"bad guid")]
            data = self.service.dimse_get(payload)
            if data is None:
                return [self._reply(msg_id, GET_RSP, ST_FAILURE, b"not found")]
            return [self._reply(msg_id, GET_RSP, ST_SUCCESS, data)]
        raise AssociationAborted(f"unexpected DIMSE command {command}")


# --- transport pipes ---------------------------------------------------------

class PduPipe:
    """Sequential PDU transport: send one, receive responses in order."""

    def send(self, pdu: bytes):
        raise NotImplementedError

    def recv(self) -> bytes:
        raise NotImplementedError

    def close(self):
        pass


class LoopbackPipe(PduPipe):
    """In-process pipe straight into a ServerAssociation, with capture and
    fault-injection hooks for the simulation harness."""

    def __init__(self, server: ServerAssociation, capture: list | None = None):
        self.server = server
        self.capture = capture if capture is not None else []
        self.inbox: list[bytes] = []
        self.flip_next = 0  # corrupt this many upcoming client->server PDUs

    def _maybe_flip(self, pdu: bytes) -> bytes:
        if self.flip_next <= 0 or len(pdu) <= 6:
            return pdu
        self.flip_next -= 1
        mutated = bytearray(pdu)
        mutated[-1] ^= 0x01  # flip inside the body (ciphertext/tag)
        return bytes(mutated)

    def send(self, pdu: bytes):
        self.capture.append(("c2s", pdu))
        pdu = self._maybe_flip(pdu)
        responses = self.server.handle_pdu(pdu)
        for r in responses:
            self.capture.append(("s2c", r))
        self.inbox.extend(responses)

    def recv(self) -> bytes:
        if not self.inbox:
            raise ProtocolError("no pending response")
        return self.inbox.pop(0)


class SocketPipe(PduPipe):
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, pdu: bytes):
        self.sock.sendall(pdu)

    def recv(self) -> bytes:
        header = self._read_exact(6)
        ptype, reserved, length = struct.unpack("<BBI", header)
        if length > MAX_BODY:
            raise ProtocolError("PDU body too large")
        return header + self._read_exact(length)

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise AssociationAborted("connection closed")
            buf += chunk
        return buf

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# --- client side -------------------------------------------------------------

class Association:
    """SCU side of an open association."""

    def __init__(self, pipe: PduPipe, channel: SecureChannel):
        self.pipe = pipe
        self.channel = channel
        self.msg_id = 0
        self.open = True

    def _request(self, command: int, payload: bytes) -> tuple[int, int, bytes]:
        if not self.open:
            raise AssociationAborted("association is closed")
        self.msg_id += 1
        frame = self.channel.seal(build_dimse(self.msg_id, command, ST_SUCCESS, payload))
        self.pipe.send(build_pdu(DATA, frame))
        return self._read_response()

    def _read_response(self) -> tuple[int, int, bytes]:
        ptype, body = parse_pdu(self.pipe.recv())
        if ptype != DATA:
            raise AssociationAborted(f"unexpected PDU type {ptype}")
        msg_id, command, status, payload = parse_dimse(self.channel.open(body))
        if msg_id != self.msg_id:
            raise ProtocolError(f"response msg_id {msg_id} != {self.msg_id}")
        return command, status, payload

    def c_store(self, mgd_bytes: bytes) -> int:
        command, status, payload = self._request(STORE_RQ, mgd_bytes)
        if command != STORE_RSP:
            raise ProtocolError("expected STORE-RSP")
        if status != ST_SUCCESS:
            raise RemoteFailure(payload.decode("utf-8", "replace"))
        return status

    def c_find(self, ast_doc: dict) -> list[dict]:
        command, status, payload = self._request(FIND_RQ, json.dumps(ast_doc).encode("utf-8"))
        rows = []
        while True:
            if command != FIND_RSP:
                raise ProtocolError("expected FIND-RSP")
            if status == ST_SUCCESS:
                return rows
            if status == ST_PENDING:
                rows.append(json.loads(payload))
            else:
                raise RemoteFailure(payload.decode("utf-8", "replace"))
            command, status, payload = self._read_response()

    def c_get(self, guid: bytes, expect_checksum: bytes | None = None) -> bytes:
        import hashlib
        command, status, payload = self._request(GET_RQ, guid)
        if command != GET_RSP:
            raise ProtocolError("expected GET-RSP")
        if status != ST_SUCCESS:
            raise NotFoundRemote(payload.decode("utf-8", "replace"))
        if expect_checksum is not None and hashlib.sha256(payload).digest() != expect_checksum:
            raise ChecksumMismatch(guid.hex())
        return payload

    def release(self):
        if not self.open:
            return
        self.pipe.send(build_pdu(RELEASE_RQ, b""))
        ptype, _ = parse_pdu(self.pipe.recv())
        if ptype != RELEASE_RSP:
            raise ProtocolError("expected RELEASE-RSP")
        self.open = False
        self.pipe.close()


def associate(pipe: PduPipe, calling_ae: str, called_ae: str,
              key_id: int, key: bytes) -> Association:
    body = struct.pack("<H", PROTOCOL_VERSION) + pad_ae(calling_ae) + pad_ae(called_ae) \
        + bytes([key_id])
    pipe.send(build_pdu(ASSOC_RQ, body))
    ptype, resp = parse_pdu(pipe.recv())
    if ptype == ASSOC_RJ:
        raise Rejected(resp[0] if resp else 0)
    if ptype != ASSOC_AC:
        raise ProtocolError(f"unexpected PDU type {ptype} in handshake")
    return Association(pipe, SecureChannel(key))

"""Real-socket plumbing: the HTTP document API, the MG-DIMSE TCP server,
and the peer transport that reaches other nodes over both.

All HTTP request/response bodies are JSON documents except the raw-byte
endpoints (ingest body, file/preview responses). The console bundle, when
present, is served under /console/.
"""

from __future__ import annotations

import base64
import json
import os
import socket
import socketserver
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse, parse_qs

import requests

from . import querylang, transfer
from .federation import PeerError
from .node import Node, Transport


def parse_hostport(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class HttpTransport(Transport):
    """Reaches peers over their HTTP endpoints; files over MG-DIMSE."""

    def __init__(self, node: Node):
        self.node = node
        self.peers = {p.site_id: p for p in node.config.peers}

    def _base(self, site: str) -> str:
        peer = self.peers.get(site)
        if peer is None or not peer.http:
            raise PeerError(f"no route to {site}")
        return f"http://{peer.http}"

    def query(self, site, ast_doc):
        try:
            resp = requests.post(f"{self._base(site)}/api/query", json=ast_doc,
                                 timeout=self.node.config.query_timeout_s)
            resp.raise_for_status()
            return resp.json()["rows"]
        except requests.RequestException as e:
            raise PeerError(str(e)) from None

    def pull_changes(self, site, vector_doc):
        try:
            after = base64.urlsafe_b64encode(json.dumps(vector_doc).encode()).decode()
            resp = requests.get(f"{self._base(site)}/api/sync/changes",
                                params={"after": after}, timeout=10)
            resp.raise_for_status()
            return resp.json()["records"]
        except requests.RequestException as e:
            raise PeerError(str(e)) from None

    def push(self, site, record_docs):
        try:
            resp = requests.post(f"{self._base(site)}/api/sync/push",
                                 json={"records": record_docs}, timeout=10)
            resp.raise_for_status()
        except requests.RequestException as e:
            raise PeerError(str(e)) from None

    def fetch(self, site, guid, expect_checksum):
        peer = self.peers.get(site)
        if peer is None or not peer.dimse:
            raise PeerError(f"no route to {site}")
        host, port = parse_hostport(peer.dimse)
        sock = socket.create_connection((host, port), timeout=10)
        pipe = transfer.SocketPipe(sock)
        assoc = transfer.associate(pipe, self.node.config.ae_title,
                                   site.upper()[:16],
                                   self.node.config.federation_key_id,
                                   self.node.config.federation_key)
        try:
            data = assoc.c_get(guid, expect_checksum)
            assoc.release()
            return data
        finally:
            pipe.close()


class DimseServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, node: Node, addr: tuple[str, int]):
        self.node = node
        super().__init__(addr, _DimseHandler)


class _DimseHandler(socketserver.BaseRequestHandler):
    def handle(self):
        pipe = transfer.SocketPipe(self.request)
        server = transfer.ServerAssociation(self.server.node.dimse_service())
        try:
            while True:
                pdu = pipe.recv()
                for response in server.handle_pdu(pdu):
                    pipe.send(response)
                if server.state == "released":
                    break
        except (transfer.TransferError, OSError):
            pass  # abort: drop the connection
        finally:
            pipe.close()


def make_http_handler(node: Node, console_dir: str | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _send(self, code: int, body: bytes, ctype: str = "application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type, X-Patient-Attrs")
            self.end_headers()
            self.wfile.write(body)

        def _json(self, code: int, doc):
            self._send(code, json.dumps(doc).encode())

        def _error(self, code: int, message: str):
            self._json(code, {"error": message})

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length", 0))
            return self.rfile.read(length)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type, X-Patient-Attrs")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if url.path == "/api/status":
                    return self._json(200, node.status_doc())
                if url.path == "/api/catalogue/list":
                    path = parse_qs(url.query).get("path", ["/"])[0]
                    return self._json(200, {"children": node.catalogue.list(path)})
                if url.path == "/api/catalogue/resolve":
                    q = parse_qs(url.query)
                    lfn = q.get("lfn", [None])[0]
                    if lfn is None and "image" in q:
                        # image entity id -> its registered lfn
                        lfn = node.metastore.get_current("image", q["image"][0], "lfn")
                    if lfn is None:
                        return self._error(404, "unknown image")
                    entry, replicas = node.catalogue.resolve(lfn)
                    return self._json(200, {
                        "lfn": entry.lfn, "guid": entry.guid.hex(),
                        "size": entry.size, "checksum": entry.checksum.hex(),
                        "replicas": [{"site": r.site, "pfn": r.pfn}
                                     for r in replicas],
                    })
                if url.path == "/api/sync/changes":
                    after = parse_qs(url.query).get("after", [""])[0]
                    vector = json.loads(base64.urlsafe_b64decode(after)) if after else {}
                    return self._json(200, {"records": node.changes_since(vector)})
                if len(parts) == 3 and parts[:2] == ["api", "file"]:
                    data = node.fetch_file(bytes.fromhex(parts[2]))
                    return self._send(200, data, "application/octet-stream")
                if len(parts) == 3 and parts[:2] == ["api", "preview"]:
                    png = node.render_preview(bytes.fromhex(parts[2]))
                    return self._send(200, png, "image/png")
                if len(parts) == 3 and parts[:2] == ["api", "jobs"]:
                    return self._json(200, node.job_status(bytes.fromhex(parts[2])))
                if parts and parts[0] == "console" and console_dir:
                    return self._static(parts[1:])
                return self._error(404, "not found")
            except Exception as e:
                return self._error(400, str(e) or type(e).__name__)

        def _static(self, parts: list[str]):
            rel = "/".join(parts) or "index.html"
            base = os.path.abspath(console_dir)
            path = os.path.normpath(os.path.join(base, rel))
            if not path.startswith(base) or not os.path.isfile(path):
                return self._error(404, "not found")
            ctype = {
                ".html": "text/html", ".js": "text/javascript",
                ".css": "text/css", ".map": "application/json",
            }.get(os.path.splitext(path)[1], "application/octet-stream")
            return self._send(200, open(path, "rb").read(), ctype)

        def do_POST(self):
            url = urlparse(self.path)
            try:
                if url.path == "/api/query":
                    doc = json.loads(self._body())
                    if "text" in doc:
                        result = node.federated_query(doc["text"])
                        return self._json(200, result.to_doc())
                    # bare canonical AST document: local-only sub-query
                    return self._json(200, {"rows": node.evaluate_subquery(doc)})
                if url.path == "/api/query/validate":
                    doc = json.loads(self._body())
                    try:
                        ast = querylang.parse(doc["text"])
                        querylang.validate(ast, node.metastore)
                        return self._json(200, {"ok": True,
                                                "ast": querylang.to_doc(ast)})
                    except querylang.QuerySyntaxError as e:
                        return self._json(200, {"ok": False, "line": e.line,
                                                "col": e.col, "expected": e.expected})
                    except querylang.QueryError as e:
                        return self._json(200, {"ok": False, "message": str(e)})
                if url.path == "/api/ingest":
                    attrs_header = self.headers.get("X-Patient-Attrs")
                    attrs = json.loads(base64.b64decode(attrs_header)) \
                        if attrs_header else {}
                    lfn, guid = node.ingest(self._body(), attrs)
                    return self._json(200, {"lfn": lfn, "guid": guid.hex()})
                if url.path == "/api/jobs":
                    doc = json.loads(self._body())
                    job = node.submit_job(doc["algorithm"], doc.get("params", {}),
                                          doc["inputs"])
                    return self._json(200, job)
                if url.path == "/api/sync/push":
                    doc = json.loads(self._body())
                    for record in doc.get("records", []):
                        node.receive_remote(record)
                    return self._json(200, {"ok": True})
                return self._error(404, "not found")
            except Exception as e:
                return self._error(400, str(e) or type(e).__name__)

    return Handler


class NodeServer:
    """A running node: HTTP API, MG-DIMSE listener, anti-entropy and agent
    loops. Stop with .shutdown() (flushes nothing extra: the log is
    write-ahead)."""

    def __init__(self, node: Node, console_dir: str | None = None):
        self.node = node
        node.transport = HttpTransport(node)
        http_addr = parse_hostport(node.config.listen_http)
        dimse_addr = parse_hostport(node.config.listen_dimse)
        self.http = ThreadingHTTPServer(http_addr, make_http_handler(node, console_dir))
        self.dimse = DimseServer(node, dimse_addr)
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self.http.serve_forever, daemon=True),
            threading.Thread(target=self.dimse.serve_forever, daemon=True),
            threading.Thread(target=self._background, daemon=True),
        ]

    def start(self):
        for t in self._threads:
            t.start()

    def _background(self):
        interval = self.node.config.sync_interval_s
        while not self._stop.wait(interval):
            try:
                self.node.anti_entropy_tick()
                self.node.agent_step()
            except Exception:
                pass

    def shutdown(self):
        self._stop.set()
        self.http.shutdown()
        self.dimse.shutdown()
        self.node.close()

#!/usr/bin/env python3
"""Boots a real two-node federation over sockets and runs the live console
suite against it.

Usage: python3 scripts/live_harness.py  (or `npm run test:live`)

Exports to the vitest process:
  MG_NODE_URL     base URL of the node the console talks to (site-a)
  MG_CONTROL_URL  harness control endpoint; POST /stop/site-b shuts the
                  peer down so the partial-result path can be exercised
"""

import json
import os
import random
import secrets
import socket
import subprocess
import sys
import tempfile
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import requests

from mgrid import node as nodemod
from mgrid.netio import NodeServer
from mgrid.phantom import PhantomSpec, generate_phantom

FRONTEND = Path(__file__).resolve().parent.parent
SITES = ("site-a", "site-b")
INGESTS_PER_SITE = 2


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def boot_cluster(base_dir: str) -> tuple[dict[str, str], dict[str, NodeServer]]:
    key = secrets.token_bytes(32)
    ports = {site: (free_port(), free_port()) for site in SITES}
    servers: dict[str, NodeServer] = {}
    for site in SITES:
        http_p, dimse_p = ports[site]
        other = SITES[1] if site == SITES[0] else SITES[0]
        cfg = nodemod.NodeConfig(
            site_id=site, ae_title=site.upper(),
            data_dir=str(Path(base_dir) / site),
            listen_http=f"127.0.0.1:{http_p}",
            listen_dimse=f"127.0.0.1:{dimse_p}",
            peers=[nodemod.PeerInfo(site_id=other,
                                    dimse=f"127.0.0.1:{ports[other][1]}",
                                    http=f"127.0.0.1:{ports[other][0]}")],
            federation_key=key,
            sync_interval_s=0.2,
        )
        nodemod.init(cfg)
        server = NodeServer(nodemod.Node(cfg.data_dir, rng=random.Random(site)))
        server.start()
        servers[site] = server
    bases = {site: f"http://127.0.0.1:{ports[site][0]}" for site in SITES}
    return bases, servers


def seed_data(bases: dict[str, str]) -> None:
    seed = 0
    for site in SITES:
        for _ in range(INGESTS_PER_SITE):
            seed += 1
            mgd, _ = generate_phantom(PhantomSpec(seed=seed))
            requests.post(f"{bases[site]}/api/ingest", data=mgd,
                          timeout=10).raise_for_status()
    total = len(SITES) * INGESTS_PER_SITE
    deadline = time.time() + 30
    while time.time() < deadline:
        if all(requests.get(f"{b}/api/status", timeout=5).json()["files"] == total
               for b in bases.values()):
            return
        time.sleep(0.1)
    raise RuntimeError("nodes did not converge on the seeded files")


def control_server(servers: dict[str, NodeServer]) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802 (BaseHTTPRequestHandler API)
            site = self.path.removeprefix("/stop/")
            if site not in servers:
                self.send_error(404)
                return
            threading.Thread(target=servers.pop(site).shutdown).start()
            body = json.dumps({"ok": True, "stopped": site}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    ctl = ThreadingHTTPServer(("127.0.0.1", free_port()), Handler)
    threading.Thread(target=ctl.serve_forever, daemon=True).start()
    return ctl


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="mgrid-live-") as tmp:
        bases, servers = boot_cluster(tmp)
        ctl = control_server(servers)
        try:
            seed_data(bases)
            env = {
                "MG_NODE_URL": bases["site-a"],
                "MG_CONTROL_URL": f"http://127.0.0.1:{ctl.server_address[1]}",
            }
            print(f"live federation up: {bases}  control: {env['MG_CONTROL_URL']}")
            proc = subprocess.run(
                ["npx", "vitest", "run", "test/live.test.ts"],
                cwd=FRONTEND, env={**os.environ, **env})
            return proc.returncode
        finally:
            ctl.shutdown()
            for server in servers.values():
                server.shutdown()


if __name__ == "__main__":
    sys.exit(main())

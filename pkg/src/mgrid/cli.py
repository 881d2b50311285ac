"""mgctl: command-line entry point.

Exit codes: 0 ok, 1 usage, 2 remote failure, 3 local failure.
MG_DATA_DIR overrides the data directory for all node commands.
"""

from __future__ import annotations

import json
import os
import secrets
import signal
import sys

import click
import requests

from . import node as nodemod
from . import simnet

EXIT_USAGE = 1
EXIT_REMOTE = 2
EXIT_LOCAL = 3


def data_dir(override: str | None) -> str:
    d = override or os.environ.get("MG_DATA_DIR")
    if not d:
        click.echo("no data directory (use --data-dir or MG_DATA_DIR)", err=True)
        sys.exit(EXIT_USAGE)
    return d


def open_node(d: str, recover_truncated: bool = False) -> nodemod.Node:
    try:
        return nodemod.Node(d, recover_truncated=recover_truncated)
    except nodemod.NodeError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_LOCAL)


def http_base(d: str) -> str:
    with open(os.path.join(d, "config.json")) as fh:
        return "http://" + json.load(fh)["listen_http"]


@click.group()
def main():
    pass


@main.command()
@click.option("--data-dir", "dir_opt", default=None)
@click.option("--site-id", required=True)
@click.option("--ae-title", default=None)
@click.option("--listen-dimse", default="127.0.0.1:11112")
@click.option("--listen-http", default="127.0.0.1:8112")
@click.option("--key", "key_hex", default=None, help="32-byte federation key, hex")
@click.option("--key-id", default=1, type=int)
@click.option("--peer", "peers", multiple=True,
              help="site_id=dimse_addr,http_addr (repeatable)")
def init(dir_opt, site_id, ae_title, listen_dimse, listen_http, key_hex, key_id, peers):
    """Create a fresh node data directory."""
    d = data_dir(dir_opt)
    peer_infos = []
    for spec in peers:
        try:
            sid, addrs = spec.split("=", 1)
            dimse, http = addrs.split(",", 1)
        except ValueError:
            click.echo(f"bad --peer {spec!r}", err=True)
            sys.exit(EXIT_USAGE)
        peer_infos.append(nodemod.PeerInfo(site_id=sid, dimse=dimse, http=http))
    cfg = nodemod.NodeConfig(
        site_id=site_id,
        ae_title=(ae_title or site_id.upper())[:16],
        data_dir=d,
        listen_dimse=listen_dimse,
        listen_http=listen_http,
        peers=peer_infos,
        federation_key_id=key_id,
        federation_key=bytes.fromhex(key_hex) if key_hex else secrets.token_bytes(32),
    )
    try:
        nodemod.init(cfg)
    except nodemod.NodeError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_LOCAL)
    click.echo(f"initialized {d} for site {site_id}")


@main.command()
@click.option("--data-dir", "dir_opt", default=None)
@click.option("--console-dir", default=None, help="static console bundle to serve at /console/")
@click.option("--recover-truncated", is_flag=True,
              help="truncate a torn final log record instead of refusing to start")
def serve(dir_opt, console_dir, recover_truncated):
    """Run the node: HTTP API, MG-DIMSE listener, sync and job loops."""
    from .netio import NodeServer
    d = data_dir(dir_opt)
    node = open_node(d, recover_truncated=recover_truncated)
    try:
        server = NodeServer(node, console_dir=console_dir)
        server.start()
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_LOCAL)
    click.echo(f"{node.site}: http {node.config.listen_http}, "
               f"dimse {node.config.listen_dimse}")
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    while not stop:
        signal.pause()
    server.shutdown()


@main.command()
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--data-dir", "dir_opt", default=None)
def ingest(files, dir_opt):
    """Ingest MGD files into the local node (direct, node must not be serving)."""
    node = open_node(data_dir(dir_opt))
    try:
        for path in files:
            lfn, guid = node.ingest(open(path, "rb").read())
            click.echo(f"{path} -> {lfn} ({guid.hex()})")
    except nodemod.NodeError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_LOCAL)
    finally:
        node.close()


@main.command()
@click.argument("text")
@click.option("--data-dir", "dir_opt", default=None)
@click.option("--site", default=None, help="HTTP address of the node to ask")
def query(text, dir_opt, site):
    """Run a federated query through a serving node."""
    base = f"http://{site}" if site else http_base(data_dir(dir_opt))
    try:
        resp = requests.post(f"{base}/api/query", json={"text": text}, timeout=30)
        doc = resp.json()
    except requests.RequestException as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_REMOTE)
    if "error" in doc:
        click.echo(f"error: {doc['error']}", err=True)
        sys.exit(EXIT_REMOTE)
    for row in doc["rows"]:
        click.echo(json.dumps(row))
    if doc["failed"]:
        click.echo(f"partial: failed sites {doc['failed']}", err=True)
    sys.exit(0)


@main.command()
@click.argument("lfn")
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--data-dir", "dir_opt", default=None)
def get(lfn, output, dir_opt):
    """Fetch a file by LFN (replicating it locally if needed)."""
    node = open_node(data_dir(dir_opt))
    try:
        data = node.fetch_lfn(lfn)
    except Exception as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_REMOTE)
    finally:
        node.close()
    with open(output, "wb") as fh:
        fh.write(data)
    click.echo(f"{lfn} -> {output} ({len(data)} bytes)")


@main.group()
def job():
    pass


@job.command("submit")
@click.argument("algorithm")
@click.argument("inputs", nargs=-1, required=True)
@click.option("--data-dir", "dir_opt", default=None)
def job_submit(algorithm, inputs, dir_opt):
    base = http_base(data_dir(dir_opt))
    try:
        resp = requests.post(f"{base}/api/jobs",
                             json={"algorithm": algorithm, "inputs": list(inputs)},
                             timeout=30)
        doc = resp.json()
    except requests.RequestException as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_REMOTE)
    click.echo(json.dumps(doc, indent=2))


@job.command("status")
@click.argument("job_id")
@click.option("--data-dir", "dir_opt", default=None)
def job_status(job_id, dir_opt):
    base = http_base(data_dir(dir_opt))
    try:
        resp = requests.get(f"{base}/api/jobs/{job_id}", timeout=30)
        doc = resp.json()
    except requests.RequestException as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_REMOTE)
    click.echo(json.dumps(doc, indent=2))


@main.command()
@click.option("--data-dir", "dir_opt", default=None)
def peers(dir_opt):
    """Show configured peers and the local sync vector."""
    node = open_node(data_dir(dir_opt))
    try:
        click.echo(json.dumps(node.status_doc(), indent=2))
    finally:
        node.close()


@main.group()
def sim():
    pass


@sim.command("run")
@click.argument("scenario", type=click.Path(exists=True))
@click.option("--report-out", default=None, type=click.Path())
def sim_run(scenario, report_out):
    """Run a scripted multi-site simulation scenario."""
    doc = simnet.load_scenario(scenario)
    report = simnet.run_scenario(doc)
    for step, passed, detail in report.assertions:
        click.echo(f"{'PASS' if passed else 'FAIL'}  {step}  {detail}".rstrip())
    click.echo(f"messages={report.messages} bytes={report.bytes_transferred}")
    if report_out:
        with open(report_out, "w") as fh:
            json.dump(report.to_doc(), fh, indent=2)
    sys.exit(0 if report.ok else EXIT_LOCAL)


if __name__ == "__main__":
    main()

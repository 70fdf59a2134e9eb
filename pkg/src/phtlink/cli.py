"""Operator and researcher command line.

Commands:
    keygen   write one party's key files (encryption, signing, trust anchor)
    synth    generate synthetic station datasets from a spec file
    station  run a data-station daemon from a config file
    tse      run the analysis-station daemon from a config file
    submit   sign a manifest draft, dispatch the run, collect the result
    report   pretty-print a run report

Everything file-shaped is JSON; dataset files are CSV with a sidecar
descriptor. PHT_LOG selects log verbosity (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

import click

from .analysis import table_to_csv
from .encoding import canonical_json_bytes
from .envelope import (
    KeyPair,
    PublicEncryptionKey,
    SigningKeys,
    encryption_keypair_from_pem,
    encryption_keypair_to_pem,
    generate_encryption_keypair,
    generate_signing_keys,
    public_key_from_pem,
    signing_keys_from_pem,
    signing_keys_to_pem,
)
from .errors import BadConfig, InvalidSpec, PhtError
from .manifest import (
    DataRequest,
    TrainManifest,
    analysis_spec_from_dict,
    disclosure_policy_from_dict,
    linkage_params_from_dict,
    pool_filter_from_dict,
    sign_manifest,
)
from .model import read_dataset_csv, write_dataset_csv
from .network import TcpNode
from .stations import (
    AWAITING_DATA,
    DataStationActor,
    DataStationConfig,
    ResearcherActor,
    TimeoutExpired,
    TseActor,
    TseConfig,
)
from .synth import SyntheticPopulationSpec, generate_population, generate_vertical_demo
from .wire import TrainDispatch, encode

log = logging.getLogger("phtlink")

PRIVATE_MODE = 0o600


def _fail(reason: str, detail: str = "", code: int = 2):
    line = f"error: {reason}" + (f": {detail}" if detail else "")
    click.echo(line, err=True)
    sys.exit(code)


def _derived_key_id(kind: str, public_raw: bytes) -> str:
    return f"static:{kind}:{hashlib.sha256(public_raw).hexdigest()[:8]}"


def _write_private(path: Path, data: bytes) -> None:
    path.write_bytes(data)
    os.chmod(path, PRIVATE_MODE)


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise BadConfig(f"{path}: {exc}") from exc


def _resolve(base: Path, relative: str) -> Path:
    path = Path(relative)
    return path if path.is_absolute() else base / path


@click.group()
@click.option(
    "--log-level",
    envvar="PHT_LOG",
    default="WARNING",
    show_default=True,
    help="Log verbosity; also read from PHT_LOG.",
)
def main(log_level: str):
    """Privacy-preserving linkage across train/station endpoints."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


# ---------------------------------------------------------------------------
# keygen
# ---------------------------------------------------------------------------

KEY_FILES = (
    "enc_private.pem",
    "enc_public.pem",
    "sign_private.pem",
    "sign_verify.pem",
    "anchor_private.pem",
    "anchor_verify.pem",
)


@main.command()
@click.argument("out_dir", type=click.Path(path_type=Path))
@click.option("--force", is_flag=True, help="Overwrite existing key files.")
def keygen(out_dir: Path, force: bool):
    """Generate one party's key files into OUT_DIR.

    Writes an encryption keypair, a signing pair, and a trust-anchor signing
    pair; private halves are written with owner-only permissions.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    existing = [name for name in KEY_FILES if (out_dir / name).exists()]
    if existing and not force:
        _fail("KeyFilesExist", f"refusing to overwrite {existing} (use --force)")

    enc = generate_encryption_keypair()
    sign = generate_signing_keys()
    anchor = generate_signing_keys()
    enc_priv, enc_pub = encryption_keypair_to_pem(enc)
    sign_priv, sign_pub = signing_keys_to_pem(sign)
    anchor_priv, anchor_pub = signing_keys_to_pem(anchor)

    _write_private(out_dir / "enc_private.pem", enc_priv)
    (out_dir / "enc_public.pem").write_bytes(enc_pub)
    _write_private(out_dir / "sign_private.pem", sign_priv)
    (out_dir / "sign_verify.pem").write_bytes(sign_pub)
    _write_private(out_dir / "anchor_private.pem", anchor_priv)
    (out_dir / "anchor_verify.pem").write_bytes(anchor_pub)
    click.echo(f"wrote {len(KEY_FILES)} key files to {out_dir}")


def _load_encryption_keys(path: Path) -> KeyPair:
    kp = encryption_keypair_from_pem(path.read_bytes(), key_id="")
    return KeyPair(
        public_encryption_key=kp.public_encryption_key,
        private_decryption_key=kp.private_decryption_key,
        key_id=_derived_key_id("enc", kp.public_encryption_key),
    )


def _load_signing_keys(path: Path) -> SigningKeys:
    sk = signing_keys_from_pem(path.read_bytes(), key_id="")
    return SigningKeys(
        signing_key=sk.signing_key,
        verification_key=sk.verification_key,
        key_id=_derived_key_id("sig", sk.verification_key),
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command()
@click.argument("spec_file", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("."))
def synth(spec_file: Path, out_dir: Path):
    """Generate synthetic datasets plus the ground-truth map from SPEC_FILE.

    The spec is JSON with the population parameters; set "variant" to
    "vertical_demo" for the two-station feasibility split (station A holds
    age, station B holds income for the same people).
    """
    doc = _load_json(spec_file)
    out_dir.mkdir(parents=True, exist_ok=True)
    variant = doc.pop("variant", "population")
    try:
        if variant == "vertical_demo":
            ds_a, ds_b, truth = generate_vertical_demo(
                n_a=doc["n_large"],
                n_b=doc["n_small"],
                seed=doc.get("seed", 0),
                age_range=tuple(doc.get("age_range", (40, 75))),
                as_of=doc.get("as_of", "2026-01-01"),
            )
            names = ("station_a", "station_b")
        elif variant == "population":
            spec = SyntheticPopulationSpec(
                n_large=doc["n_large"],
                n_small=doc["n_small"],
                overlap_fraction=doc["overlap_fraction"],
                perturbation_rate=doc["perturbation_rate"],
                age_range=tuple(doc.get("age_range", (40, 75))),
                region_zip_prefixes=tuple(
                    doc.get("region_zip_prefixes")
                    or SyntheticPopulationSpec.__dataclass_fields__[
                        "region_zip_prefixes"
                    ].default
                ),
                seed=doc.get("seed", 0),
                as_of=doc.get("as_of", "2026-01-01"),
            )
            ds_a, ds_b, truth = generate_population(spec)
            names = ("large", "small")
        else:
            _fail("InvalidSpec", f"unknown variant {variant!r}")
    except InvalidSpec as exc:
        _fail("InvalidSpec", str(exc))
    except KeyError as exc:
        _fail("InvalidSpec", f"missing field {exc}")

    for ds, name in zip((ds_a, ds_b), names):
        write_dataset_csv(ds, out_dir / f"{name}.csv", out_dir / f"{name}.descriptor.json")
    (out_dir / "ground_truth.json").write_bytes(
        canonical_json_bytes({"pairs": [list(p) for p in truth.pairs]}) + b"\n"
    )
    click.echo(
        f"wrote {names[0]}.csv ({len(ds_a.rows)} rows), {names[1]}.csv "
        f"({len(ds_b.rows)} rows), ground_truth.json ({len(truth)} pairs) to {out_dir}"
    )


# ---------------------------------------------------------------------------
# daemons
# ---------------------------------------------------------------------------

class _RunMultiplexer:
    """Routes frames to one actor per run; creates actors on TrainDispatch."""

    def __init__(self, factory, address_book: dict[str, str], timeout_s: float | None = None):
        self.factory = factory
        self.address_book = address_book
        self.timeout_s = timeout_s
        self.actors: dict[str, object] = {}
        self.deadlines: dict[str, float] = {}

    def handle(self, msg):
        if isinstance(msg, TrainDispatch):
            self.address_book.update(dict(msg.endpoints))
            if msg.run_id not in self.actors:
                self.actors[msg.run_id] = self.factory()
                if self.timeout_s is not None:
                    self.deadlines[msg.run_id] = time.monotonic() + self.timeout_s
        actor = self.actors.get(msg.run_id)
        if actor is None:
            log.warning("dropping %s for unknown run %s", type(msg).__name__, msg.run_id)
            return []
        return actor.handle(msg)

    def check_deadlines(self):
        out = []
        now = time.monotonic()
        for run_id, deadline in list(self.deadlines.items()):
            actor = self.actors[run_id]
            if now >= deadline:
                del self.deadlines[run_id]
                if getattr(actor, "phase", None) == AWAITING_DATA:
                    out.extend(actor.handle(TimeoutExpired(run_id)))
        return out

    def wipe_all(self):
        for actor in self.actors.values():
            storage = getattr(actor, "storage", None)
            if storage is not None and not storage.wiped:
                storage.wipe()
                actor.audit.log(
                    getattr(actor, "_run_id", "?") or "?", "Wiped", "wiped", "terminated"
                )


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def _serve(node: TcpNode, mux: _RunMultiplexer, wipe_on_exit: bool):
    stop = threading.Event()

    def _terminate(signum, frame):
        if wipe_on_exit:
            mux.wipe_all()
        stop.set()

    signal.signal(signal.SIGTERM, _terminate)
    signal.signal(signal.SIGINT, _terminate)
    node.start()
    click.echo(f"listening on {node.address}")
    sys.stdout.flush()
    while not stop.is_set():
        time.sleep(0.1)
    node.stop()


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
def station(config_path: Path):
    """Run a data-station daemon; serves runs until terminated."""
    base = config_path.parent
    try:
        cfg = _load_json(config_path)
        if cfg.get("role") != "data":
            raise BadConfig(f"{config_path}: role must be 'data'")
        dataset = read_dataset_csv(
            _resolve(base, cfg["dataset_csv"]),
            _resolve(base, cfg["descriptor"]) if "descriptor" in cfg else None,
        )
        anchor_verify = public_key_from_pem(
            _resolve(base, cfg["trust_anchor_verify_key"]).read_bytes()
        )
        enc_keys = _load_encryption_keys(_resolve(base, cfg["encryption_private_key"]))
        sign_keys = _load_signing_keys(_resolve(base, cfg["signing_private_key"]))
        peer_keys = {}
        for sid, path in cfg.get("peer_encryption_public_keys", {}).items():
            raw = public_key_from_pem(_resolve(base, path).read_bytes())
            peer_keys[sid] = PublicEncryptionKey(raw, _derived_key_id("enc", raw))
        host, port = _parse_listen(cfg["listen"])
    except (BadConfig, PhtError, OSError, ValueError, KeyError) as exc:
        _fail("BadConfig", str(exc))

    def factory():
        return DataStationActor(
            DataStationConfig(
                station_id=cfg["station_id"],
                dataset=dataset,
                allowed_variables=tuple(cfg.get("allow_variables", ())),
                trust_anchor_verify=anchor_verify,
                enc_keys=enc_keys,
                sign_keys=sign_keys,
                peer_encryption_keys=peer_keys,
                audit_path=str(_resolve(base, cfg["audit_log"])) if "audit_log" in cfg else None,
            )
        )

    address_book: dict[str, str] = dict(cfg.get("endpoints", {}))
    mux = _RunMultiplexer(factory, address_book)
    try:
        node = TcpNode(cfg["station_id"], mux.handle, address_book, host=host, port=port)
    except OSError as exc:
        _fail("BindError", str(exc))
    _serve(node, mux, wipe_on_exit=False)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
def tse(config_path: Path):
    """Run the analysis-station daemon; serves runs until terminated."""
    base = config_path.parent
    try:
        cfg = _load_json(config_path)
        if cfg.get("role") != "tse":
            raise BadConfig(f"{config_path}: role must be 'tse'")
        anchor_verify = public_key_from_pem(
            _resolve(base, cfg["trust_anchor_verify_key"]).read_bytes()
        )
        enc_keys = _load_encryption_keys(_resolve(base, cfg["encryption_private_key"]))
        host, port = _parse_listen(cfg["listen"])
        timeout_s = float(cfg.get("timeout_s", 60.0))
    except (BadConfig, PhtError, OSError, ValueError, KeyError) as exc:
        _fail("BadConfig", str(exc))

    def factory():
        return TseActor(
            TseConfig(
                station_id=cfg["station_id"],
                trust_anchor_verify=anchor_verify,
                enc_keys=enc_keys,
                audit_path=str(_resolve(base, cfg["audit_log"])) if "audit_log" in cfg else None,
            )
        )

    address_book: dict[str, str] = dict(cfg.get("endpoints", {}))
    mux = _RunMultiplexer(factory, address_book, timeout_s=timeout_s)
    try:
        node = TcpNode(
            cfg["station_id"],
            mux.handle,
            address_book,
            idle_timeout=min(1.0, timeout_s),
            on_idle=mux.check_deadlines,
            host=host,
            port=port,
        )
    except OSError as exc:
        _fail("BindError", str(exc))
    _serve(node, mux, wipe_on_exit=True)


# ---------------------------------------------------------------------------
# submit / report
# ---------------------------------------------------------------------------

def _manifest_from_draft(doc: dict, base: Path) -> TrainManifest:
    tse_pub = public_key_from_pem(
        _resolve(base, doc["tse_public_encryption_key_file"]).read_bytes()
    )
    verification = {}
    for sid, path in doc["station_verification_key_files"].items():
        verification[sid] = public_key_from_pem(_resolve(base, path).read_bytes())
    expiry = doc.get("expiry") or (
        dt.datetime.now(dt.timezone.utc) + dt.timedelta(hours=1)
    ).isoformat()
    return TrainManifest(
        train_id=doc["train_id"],
        run_id=doc.get("run_id") or f"run-{os.urandom(6).hex()}",
        researcher_id=doc.get("researcher_id", "researcher"),
        tse_station_id=doc["tse_station_id"],
        data_requests=tuple(
            DataRequest(
                station_id=req["station_id"],
                variables=tuple(req["variables"]),
                pool=pool_filter_from_dict(req.get("pool")),
            )
            for req in doc["data_requests"]
        ),
        analysis=analysis_spec_from_dict(doc["analysis"]),
        disclosure=disclosure_policy_from_dict(doc.get("disclosure", {})),
        linkage=linkage_params_from_dict(doc.get("linkage", {})),
        tse_public_encryption_key=tse_pub,
        tse_encryption_key_id=_derived_key_id("enc", tse_pub),
        station_verification_keys=tuple(sorted(verification.items())),
        expiry=expiry,
    )


@main.command()
@click.argument("draft_file", type=click.Path(exists=True, path_type=Path))
@click.option("--anchor-key", required=True, type=click.Path(exists=True, path_type=Path),
              help="Trust-anchor signing key (PEM) used to sign the manifest.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("run-out"))
@click.option("--timeout", "timeout_s", type=float, default=60.0, show_default=True)
def submit(draft_file: Path, anchor_key: Path, out_dir: Path, timeout_s: float):
    """Sign the manifest DRAFT_FILE, dispatch the run, wait for the result.

    Exits 0 only when the run completes; the validated tables and a run
    report land in --out.
    """
    base = draft_file.parent
    try:
        doc = _load_json(draft_file)
        endpoints = dict(doc["endpoints"])
        anchor = _load_signing_keys(anchor_key)
        manifest = sign_manifest(_manifest_from_draft(doc, base), anchor)
    except (BadConfig, PhtError, OSError, ValueError, KeyError) as exc:
        _fail("BadDraft", str(exc))

    started = time.perf_counter()
    researcher = ResearcherActor(manifest.researcher_id, manifest, endpoints)
    address_book = dict(endpoints)
    node = TcpNode(manifest.researcher_id, researcher.handle, address_book)
    node.start()
    address_book[manifest.researcher_id] = node.address
    researcher.endpoints = dict(address_book)
    for out in researcher.start():
        node.send(out.dest, encode(out.message))

    deadline = time.monotonic() + timeout_s
    while not researcher.done and time.monotonic() < deadline:
        time.sleep(0.02)
    time.sleep(0.05)
    node.stop()

    out_dir.mkdir(parents=True, exist_ok=True)
    elapsed = time.perf_counter() - started
    if researcher.outcome is None:
        outcome, reason, result = "Aborted", "Timeout", None
    elif researcher.outcome[0] == "completed":
        outcome, reason, result = "Completed", None, researcher.outcome[1]
    else:
        outcome, reason, result = "Aborted", researcher.outcome[1], None

    result_files = []
    audit_summary: dict = {"acks": [f"{s}:{st}" for s, st in researcher.acks]}
    if result is not None:
        result_path = out_dir / "result.json"
        result_path.write_bytes(result.to_canonical_json() + b"\n")
        result_files.append(str(result_path))
        for table in result.tables:
            table_path = out_dir / f"{table.name}.csv"
            table_path.write_text(table_to_csv(table), encoding="utf-8")
            result_files.append(str(table_path))
        run_block = result.audit.get("run", {})
        audit_summary["linkage_class_counts"] = run_block.get("linkage", {}).get(
            "class_counts"
        )
        audit_summary["records_linked"] = run_block.get("records_linked")
        audit_summary["cells_suppressed"] = len(
            result.audit.get("disclosure", {}).get("suppressed_cells", [])
        )
    audit_summary["timings"] = {"total_s": elapsed}

    report_doc = {
        "run_id": manifest.run_id,
        "outcome": outcome,
        "reason": reason,
        "result_files": result_files,
        "audit_summary": audit_summary,
    }
    report_path = out_dir / "run_report.json"
    report_path.write_bytes(canonical_json_bytes(report_doc) + b"\n")

    if outcome == "Completed":
        click.echo(f"completed: {manifest.run_id} report={report_path}")
        sys.exit(0)
    click.echo(f"aborted: {reason}", err=True)
    sys.exit(1)


@main.command()
@click.argument("report_file", type=click.Path(exists=True, path_type=Path))
def report(report_file: Path):
    """Pretty-print RUN_REPORT.json."""
    doc = _load_json(report_file)
    click.echo(f"run      {doc['run_id']}")
    click.echo(f"outcome  {doc['outcome']}" + (f" ({doc['reason']})" if doc.get("reason") else ""))
    summary = doc.get("audit_summary", {})
    if summary.get("acks"):
        click.echo(f"acks     {', '.join(summary['acks'])}")
    if summary.get("records_linked") is not None:
        click.echo(f"linked   {summary['records_linked']} records")
    if summary.get("cells_suppressed") is not None:
        click.echo(f"suppressed cells  {summary['cells_suppressed']}")
    timings = summary.get("timings", {})
    if timings:
        click.echo(f"total    {timings.get('total_s', 0):.3f}s")
    for path in doc.get("result_files", []):
        click.echo(f"file     {path}")


if __name__ == "__main__":
    main()

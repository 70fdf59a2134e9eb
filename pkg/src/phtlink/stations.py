"""Station state machines: data stations, the analysis-side TSE, researcher.

Each station is a single logical actor: it consumes one message at a time
and returns the messages to emit. Actors never touch a transport, so the
same code runs over in-process queues and TCP sockets.

Data station phases:  Idle -> Validated -> SaltAgreed -> Sent (Done on failure)
TSE phases:           Idle -> Validated -> AwaitingData -> Linking ->
                      Analyzing -> Validating -> Returned -> Wiped

Privacy-critical structure: the salt exchange is sealed station-to-station,
so the TSE never receives salt bytes in any form; raw QIDs are dropped at
pseudonymization time and never serialize; the TSE wipes its storage on
every terminal path, success or failure, and emits at most one result per
run.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field, replace
from typing import Callable

from .analysis import run_analysis, validate
from .encoding import canonical_json_bytes
from .envelope import (
    KeyPair,
    PublicEncryptionKey,
    SealedPackage,
    SigningKeys,
    open_package,
    seal,
)
from .errors import PhtError, StorageWiped
from .linkage import link, merge
from .manifest import TrainManifest, validate_train
from .model import Dataset, Record, age_on, dataset_from_bytes, dataset_to_bytes
from .pseudonym import Salt, generate_salt, pseudonymize
from .wire import (
    Abort,
    Ack,
    ACK_OK,
    DataTransfer,
    Message,
    ResultReturn,
    SaltOffer,
    TrainDispatch,
    message_type_name,
)

# data station phases
IDLE = "Idle"
VALIDATED = "Validated"
SALT_AGREED = "SaltAgreed"
SENT = "Sent"
DONE = "Done"

# TSE phases
AWAITING_DATA = "AwaitingData"
LINKING = "Linking"
ANALYZING = "Analyzing"
VALIDATING = "Validating"
RETURNED = "Returned"
WIPED = "Wiped"

FAULT_NO_SEND = "no_send"
FAULT_TAMPER = "tamper"


def utcnow() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


@dataclass(frozen=True)
class Outgoing:
    dest: str
    message: Message


@dataclass(frozen=True)
class TimeoutExpired:
    """Local deadline event injected by the transport; never on the wire."""

    run_id: str


class AuditLog:
    """Line-delimited JSON event log for one station."""

    def __init__(self, station_id: str, path=None, clock: Callable[[], dt.datetime] = utcnow):
        self.station_id = station_id
        self.path = path
        self.clock = clock
        self.events: list[dict] = []

    def log(self, run_id: str, phase: str, event: str, detail: str = "") -> None:
        entry = {
            "timestamp": self.clock().isoformat(),
            "run_id": run_id,
            "phase": phase,
            "event": event,
            "detail": detail,
        }
        self.events.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def flip_bit(data: bytes, bit_index: int) -> bytes:
    """Flip one bit; used by the tamper fault and the tamper test suites."""
    out = bytearray(data)
    out[bit_index // 8] ^= 1 << (bit_index % 8)
    return bytes(out)


def apply_pool_filter(rows: list[Record], pool) -> list[Record]:
    """Keep rows whose QID passes the manifest's pool restriction."""
    if pool is None:
        return list(rows)
    kept = []
    for row in rows:
        qid = row.qid
        if qid is None:
            raise PhtError("pool filter needs raw QIDs")
        if pool.age_min is not None or pool.age_max is not None:
            age = age_on(qid.date_of_birth, pool.as_of)
            if pool.age_min is not None and age < pool.age_min:
                continue
            if pool.age_max is not None and age > pool.age_max:
                continue
        if pool.zip_prefixes and not any(
            qid.zip_code.startswith(p) for p in pool.zip_prefixes
        ):
            continue
        kept.append(row)
    return kept


class _SequencedActor:
    """Shared sequencing: outgoing seq numbers and per-sender order checks."""

    def __init__(self, station_id: str):
        self.station_id = station_id
        self._seq = 0
        self._last_seen: dict[str, int] = {}

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def in_order(self, msg: Message) -> bool:
        last = self._last_seen.get(msg.sender, 0)
        if msg.seq <= last:
            return False
        self._last_seen[msg.sender] = msg.seq
        return True


# ---------------------------------------------------------------------------
# Data station
# ---------------------------------------------------------------------------

@dataclass
class DataStationConfig:
    station_id: str
    dataset: Dataset
    allowed_variables: tuple[str, ...]
    trust_anchor_verify: bytes
    enc_keys: KeyPair
    sign_keys: SigningKeys
    #: peer data-station encryption public keys, for sealing the salt offer
    peer_encryption_keys: dict[str, PublicEncryptionKey] = field(default_factory=dict)
    clock: Callable[[], dt.datetime] = utcnow
    audit_path: str | None = None
    #: failure injection for tests: None, "no_send" (die after salt
    #: agreement) or "tamper" (flip a ciphertext bit before sending)
    fault: str | None = None
    #: test hook: a salt carried over from a previous run, to exercise the
    #: seal-time run binding check
    reuse_salt: Salt | None = None


class DataStationActor(_SequencedActor):
    def __init__(self, config: DataStationConfig):
        super().__init__(config.station_id)
        self.config = config
        self.phase = IDLE
        self.audit = AuditLog(config.station_id, config.audit_path, config.clock)
        self._manifest: TrainManifest | None = None
        self._salt: Salt | None = None
        self._run_id: str | None = None
        self._seen_runs: set[str] = set()

    # -- helpers -----------------------------------------------------------

    def _ack(self, dest: str) -> Outgoing:
        return Outgoing(
            dest, Ack(self._run_id, self.next_seq(), self.station_id, ACK_OK)
        )

    def _abort(
        self, reason: str, run_id: str | None = None, fallback_dest: str | None = None
    ) -> list[Outgoing]:
        run = run_id or self._run_id or "?"
        self.phase = DONE
        self.audit.log(run, self.phase, "abort", reason)
        if self._manifest is not None:
            targets = [self._manifest.researcher_id, self._manifest.tse_station_id]
        else:
            targets = [fallback_dest] if fallback_dest else []
        out = []
        for dest in targets:
            out.append(
                Outgoing(dest, Abort(run, self.next_seq(), self.station_id, reason))
            )
        return out

    # -- message handling ---------------------------------------------------

    def handle(self, msg: Message) -> list[Outgoing]:
        if not self.in_order(msg):
            return self._abort(f"OutOfOrder({msg.sender})", fallback_dest=msg.sender)
        if isinstance(msg, TrainDispatch):
            return self._on_dispatch(msg)
        if isinstance(msg, SaltOffer):
            return self._on_salt_offer(msg)
        if isinstance(msg, Ack):
            return self._on_ack(msg)
        if isinstance(msg, Abort):
            self.audit.log(msg.run_id, self.phase, "peer_abort", msg.reason)
            self.phase = DONE
            return []
        return self._abort(
            f"UnexpectedMessage({message_type_name(msg)})", fallback_dest=msg.sender
        )

    def _on_dispatch(self, msg: TrainDispatch) -> list[Outgoing]:
        if msg.run_id in self._seen_runs:
            return self._abort("DuplicateRun", msg.run_id)
        if self.phase != IDLE:
            return self._abort(f"UnexpectedMessage(TrainDispatch in {self.phase})")
        self._seen_runs.add(msg.run_id)
        self._manifest = msg.manifest
        self._run_id = msg.run_id

        verdict = validate_train(
            msg.manifest,
            self.config.trust_anchor_verify,
            self.config.clock(),
            station_id=self.station_id,
            allowed_variables=self.config.allowed_variables,
        )
        if not verdict.accepted:
            return self._abort(verdict.reason)
        self.phase = VALIDATED
        self.audit.log(self._run_id, self.phase, "train_validated")
        out = [self._ack(msg.manifest.researcher_id)]

        if msg.manifest.salt_initiator_id() == self.station_id:
            out.extend(self._offer_salt())
        return out

    def _offer_salt(self) -> list[Outgoing]:
        manifest = self._manifest
        peers = [s for s in manifest.data_station_ids() if s != self.station_id]
        if len(peers) != 1:
            return self._abort(f"BadTopology({len(peers)} peers)")
        peer = peers[0]
        peer_key = self.config.peer_encryption_keys.get(peer)
        if peer_key is None:
            return self._abort(f"MissingPeerKey({peer})")
        self._salt = self.config.reuse_salt or generate_salt(self._run_id)
        try:
            sealed = seal(
                self._salt.bytes,
                self._run_id,
                self.station_id,
                peer_key,
                self.config.sign_keys,
            )
        except PhtError as exc:
            return self._abort(type(exc).__name__)
        self.audit.log(self._run_id, self.phase, "salt_offered", peer)
        return [
            Outgoing(
                peer,
                SaltOffer(
                    self._run_id,
                    self.next_seq(),
                    self.station_id,
                    from_station=self.station_id,
                    to_station=peer,
                    sealed_salt=sealed,
                ),
            )
        ]

    def _on_salt_offer(self, msg: SaltOffer) -> list[Outgoing]:
        if self.phase != VALIDATED or msg.run_id != self._run_id:
            return self._abort(
                f"UnexpectedMessage(SaltOffer in {self.phase})",
                run_id=msg.run_id,
                fallback_dest=msg.sender,
            )
        if msg.to_station != self.station_id:
            return self._abort("MisroutedSaltOffer")
        verifier = self._manifest.verification_key_for(msg.from_station)
        if verifier is None:
            return self._abort(f"UnknownStation({msg.from_station})")
        try:
            salt_bytes = open_package(
                msg.sealed_salt,
                self.config.enc_keys,
                verifier,
                expected_run_id=self._run_id,
            )
        except PhtError as exc:
            return self._abort(type(exc).__name__)
        self._salt = Salt(bytes=salt_bytes, run_id=self._run_id)
        self.audit.log(self._run_id, self.phase, "salt_accepted", msg.from_station)
        out = [self._ack(msg.from_station)]
        out.extend(self._prepare_and_send())
        return out

    def _on_ack(self, msg: Ack) -> list[Outgoing]:
        # the initiator's salt offer is acknowledged by the peer station
        if (
            self.phase == VALIDATED
            and self._manifest is not None
            and self._manifest.salt_initiator_id() == self.station_id
            and msg.sender in self._manifest.data_station_ids()
            and self._salt is not None
            and msg.run_id == self._run_id
        ):
            self.audit.log(self._run_id, self.phase, "salt_agreed", msg.sender)
            return self._prepare_and_send()
        return self._abort(f"UnexpectedMessage(Ack from {msg.sender} in {self.phase})")

    def _prepare_and_send(self) -> list[Outgoing]:
        manifest = self._manifest
        self.phase = SALT_AGREED
        self.audit.log(self._run_id, self.phase, "salt_agreed")

        # a salt is good for exactly one run; enforced here, at seal time
        if self._salt.run_id != self._run_id:
            return self._abort("RunMismatch(salt)")

        request = manifest.request_for(self.station_id)
        dataset = self.config.dataset
        missing = [v for v in request.variables if v not in dataset.variable_names()]
        if missing:
            return self._abort(f"UnknownVariable({missing[0]})")

        kept = apply_pool_filter(dataset.rows, request.pool)
        schema = tuple(
            (name, dict(dataset.schema)[name]) for name in request.variables
        )
        rows = [
            Record(
                payload={name: row.payload[name] for name in request.variables},
                pseudonym=pseudonymize(row.qid, self._salt),
            )
            for row in kept
        ]
        extract = Dataset(
            station_id=self.station_id,
            schema=schema,
            rows=rows,
            descriptor=replace(dataset.descriptor, row_count=len(rows)),
        )
        payload = dataset_to_bytes(extract)
        self.audit.log(
            self._run_id,
            self.phase,
            "extract_prepared",
            f"{len(rows)}/{len(dataset.rows)} rows",
        )

        if self.config.fault == FAULT_NO_SEND:
            self.audit.log(self._run_id, DONE, "fault", "no_send")
            self.phase = DONE
            return []

        try:
            package = seal(
                payload,
                self._run_id,
                self.station_id,
                PublicEncryptionKey(
                    manifest.tse_public_encryption_key, manifest.tse_encryption_key_id
                ),
                self.config.sign_keys,
            )
        except PhtError as exc:
            return self._abort(type(exc).__name__)
        if self.config.fault == FAULT_TAMPER:
            package = replace(package, ciphertext=flip_bit(package.ciphertext, 7))
            self.audit.log(self._run_id, self.phase, "fault", "tamper")

        self.phase = SENT
        self.audit.log(self._run_id, self.phase, "data_sent", manifest.tse_station_id)
        return [
            Outgoing(
                manifest.tse_station_id,
                DataTransfer(self._run_id, self.next_seq(), self.station_id, package),
            ),
            self._ack(manifest.researcher_id),
        ]


# ---------------------------------------------------------------------------
# TSE
# ---------------------------------------------------------------------------

class TseStorage:
    """In-memory run storage with an auditable wipe.

    Wiping overwrites every held buffer with zeros before releasing it;
    afterwards the inventory is empty and reads fail with StorageWiped.
    """

    def __init__(self):
        self._items: dict[str, bytearray] = {}
        self.wiped = False

    def put_bytes(self, name: str, data: bytes) -> None:
        if self.wiped:
            raise StorageWiped("storage already wiped")
        self._items[name] = bytearray(data)

    def read(self, name: str) -> bytes:
        if self.wiped:
            raise StorageWiped("storage wiped")
        return bytes(self._items[name])

    def inventory(self) -> tuple[str, ...]:
        return tuple(sorted(self._items))

    def wipe(self) -> None:
        for buf in self._items.values():
            buf[:] = bytes(len(buf))
        self._items.clear()
        self.wiped = True


@dataclass
class TseConfig:
    station_id: str
    trust_anchor_verify: bytes
    enc_keys: KeyPair
    clock: Callable[[], dt.datetime] = utcnow
    audit_path: str | None = None


class TseActor(_SequencedActor):
    def __init__(self, config: TseConfig):
        super().__init__(config.station_id)
        self.config = config
        self.phase = IDLE
        self.audit = AuditLog(config.station_id, config.audit_path, config.clock)
        self.storage = TseStorage()
        self._manifest: TrainManifest | None = None
        self._run_id: str | None = None
        self._packages: dict[str, SealedPackage] = {}
        self._expected: tuple[str, ...] = ()
        self._terminal_sent = False
        self._seen_runs: set[str] = set()

    def _abort(self, reason: str) -> list[Outgoing]:
        self.storage.wipe()
        self.phase = WIPED
        run = self._run_id or "?"
        self.audit.log(run, self.phase, "abort_wiped", reason)
        if self._terminal_sent or self._manifest is None:
            return []
        self._terminal_sent = True
        return [
            Outgoing(
                self._manifest.researcher_id,
                Abort(run, self.next_seq(), self.station_id, reason),
            )
        ]

    def handle(self, msg: Message | TimeoutExpired) -> list[Outgoing]:
        if isinstance(msg, TimeoutExpired):
            if self.phase == AWAITING_DATA:
                return self._abort("Timeout")
            return []
        if not self.in_order(msg):
            return self._abort(f"OutOfOrder({msg.sender})")
        if isinstance(msg, TrainDispatch):
            return self._on_dispatch(msg)
        if isinstance(msg, DataTransfer):
            return self._on_data(msg)
        if isinstance(msg, SaltOffer):
            # the salt exchange is station-to-station; it must never be here
            return self._abort("SaltOfferAtTse")
        if isinstance(msg, Abort):
            self.audit.log(msg.run_id, self.phase, "station_abort", msg.reason)
            if self.phase not in (WIPED,):
                self.storage.wipe()
                self.phase = WIPED
                self.audit.log(msg.run_id, self.phase, "wiped", "after station abort")
            return []
        return self._abort(f"UnexpectedMessage({message_type_name(msg)})")

    def _on_dispatch(self, msg: TrainDispatch) -> list[Outgoing]:
        if msg.run_id in self._seen_runs or self.phase != IDLE:
            return self._abort("DuplicateRun")
        self._seen_runs.add(msg.run_id)
        self._manifest = msg.manifest
        self._run_id = msg.run_id
        verdict = validate_train(
            msg.manifest, self.config.trust_anchor_verify, self.config.clock()
        )
        if not verdict.accepted:
            return self._abort(verdict.reason)
        self.phase = VALIDATED
        self.audit.log(self._run_id, self.phase, "train_validated")
        self._expected = msg.manifest.data_station_ids()
        # pairwise linkage only: reject wider topologies instead of silently
        # dropping a station's data
        if len(self._expected) != 2:
            return self._abort(f"UnsupportedTopology({len(self._expected)} stations)")
        self.phase = AWAITING_DATA
        self.audit.log(self._run_id, self.phase, "awaiting_data", ",".join(self._expected))
        return [
            Outgoing(
                msg.manifest.researcher_id,
                Ack(self._run_id, self.next_seq(), self.station_id, ACK_OK),
            )
        ]

    def _on_data(self, msg: DataTransfer) -> list[Outgoing]:
        if self.phase != AWAITING_DATA or msg.run_id != self._run_id:
            return self._abort(f"UnexpectedMessage(DataTransfer in {self.phase})")
        if msg.sender not in self._expected:
            return self._abort(f"UnexpectedStation({msg.sender})")
        if msg.sender in self._packages:
            return self._abort(f"DuplicateTransfer({msg.sender})")
        self._packages[msg.sender] = msg.package
        self.storage.put_bytes(f"sealed:{msg.sender}", msg.package.to_bytes())
        self.audit.log(self._run_id, self.phase, "data_received", msg.sender)
        if set(self._packages) == set(self._expected):
            return self._process()
        return []

    def _process(self) -> list[Outgoing]:
        manifest = self._manifest
        datasets: list[Dataset] = []
        for sid in self._expected:
            try:
                plaintext = open_package(
                    self._packages[sid],
                    self.config.enc_keys,
                    manifest.verification_key_for(sid) or b"\x00" * 32,
                    expected_run_id=self._run_id,
                )
            except PhtError as exc:
                return self._abort(f"{type(exc).__name__}@{sid}")
            self.storage.put_bytes(f"dataset:{sid}", plaintext)
            self.audit.log(self._run_id, self.phase, "package_opened", sid)
            try:
                datasets.append(dataset_from_bytes(plaintext))
            except (PhtError, ValueError, KeyError) as exc:
                return self._abort(f"BadDataset@{sid}: {exc}")

        try:
            self.phase = LINKING
            self.audit.log(self._run_id, self.phase, "linking")
            result = link(datasets[0], datasets[1], manifest.linkage)
            merged = merge(result, datasets[0], datasets[1])
            self.storage.put_bytes("merged", dataset_to_bytes(merged))

            self.phase = ANALYZING
            self.audit.log(self._run_id, self.phase, "analyzing", manifest.analysis.kind)
            raw = run_analysis(merged, manifest.analysis)

            self.phase = VALIDATING
            self.audit.log(self._run_id, self.phase, "validating")
            validated = validate(raw, manifest.disclosure)
        except PhtError as exc:
            return self._abort(f"{type(exc).__name__}: {exc}")

        validated.audit["run"] = {
            "run_id": self._run_id,
            "records_received": {ds.station_id: len(ds.rows) for ds in datasets},
            "records_linked": len(result.pairs),
            "linkage": result.audit,
        }
        self.storage.put_bytes("result", validated.to_canonical_json())

        out = []
        if not self._terminal_sent:
            self._terminal_sent = True
            out.append(
                Outgoing(
                    manifest.researcher_id,
                    ResultReturn(
                        self._run_id, self.next_seq(), self.station_id, validated
                    ),
                )
            )
        self.phase = RETURNED
        self.audit.log(self._run_id, self.phase, "result_returned")
        self.storage.wipe()
        self.phase = WIPED
        self.audit.log(self._run_id, self.phase, "wiped", "all run data deleted")
        return out


# ---------------------------------------------------------------------------
# Researcher endpoint
# ---------------------------------------------------------------------------

class ResearcherActor(_SequencedActor):
    """Fourth endpoint: dispatches the train, then only ever sees Ack,
    ResultReturn and Abort."""

    def __init__(
        self,
        researcher_id: str,
        manifest: TrainManifest,
        endpoints: dict[str, str],
        clock: Callable[[], dt.datetime] = utcnow,
        audit_path: str | None = None,
    ):
        super().__init__(researcher_id)
        self.manifest = manifest
        self.endpoints = dict(endpoints)
        self.audit = AuditLog(researcher_id, audit_path, clock)
        self.acks: list[tuple[str, str]] = []
        self.outcome: tuple[str, object] | None = None

    def start(self) -> list[Outgoing]:
        run = self.manifest.run_id
        self.audit.log(run, "Dispatch", "train_dispatched")
        targets = list(self.manifest.data_station_ids()) + [self.manifest.tse_station_id]
        endpoint_items = tuple(sorted(self.endpoints.items()))
        return [
            Outgoing(
                dest,
                TrainDispatch(
                    run, self.next_seq(), self.station_id, self.manifest, endpoint_items
                ),
            )
            for dest in targets
        ]

    def handle(self, msg: Message) -> list[Outgoing]:
        if not self.in_order(msg):
            self.audit.log(msg.run_id, "Receive", "out_of_order_dropped", msg.sender)
            return []
        if isinstance(msg, Ack):
            self.acks.append((msg.sender, msg.status))
            self.audit.log(msg.run_id, "Receive", "ack", f"{msg.sender}:{msg.status}")
        elif isinstance(msg, ResultReturn):
            if self.outcome is None:
                self.outcome = ("completed", msg.result)
                self.audit.log(msg.run_id, "Receive", "result_returned", msg.sender)
        elif isinstance(msg, Abort):
            if self.outcome is None:
                self.outcome = ("aborted", msg.reason)
                self.audit.log(msg.run_id, "Receive", "aborted", msg.reason)
        else:
            self.audit.log(msg.run_id, "Receive", "unexpected_dropped", message_type_name(msg))
        return []

    @property
    def done(self) -> bool:
        return self.outcome is not None

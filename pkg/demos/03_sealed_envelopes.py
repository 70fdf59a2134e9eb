"""Sign-then-encrypt envelopes and the verify-decrypt-verify opening.

A data station seals its extract to the analysis station's public key and
signs it for this run. Opening checks the outer tag, unwraps and decrypts,
then checks the inner signature; each failure mode is distinguishable.
"""

import dataclasses

from phtlink import (
    generate_encryption_keypair,
    generate_signing_keys,
    open_package,
    seal,
)
from phtlink.errors import (
    InnerSignatureFailure,
    OuterIntegrityFailure,
    RunMismatch,
)
from phtlink.stations import flip_bit

run_id = "run-2026-001"
tse_keys = generate_encryption_keypair(run_id)   # private half stays at the TSE
station_keys = generate_signing_keys(run_id)     # verification half goes in the manifest

extract = b'{"rows": [{"pseudonym": "...", "payload": {"age": 52}}]}'
package = seal(extract, run_id, "A", tse_keys.public_only(), station_keys)
print("sealed package header:", package.header())
print("ciphertext bytes:", len(package.ciphertext))

plaintext = open_package(
    package, tse_keys, station_keys.verification_key, expected_run_id=run_id
)
print("roundtrip ok:", plaintext == extract)

# one flipped ciphertext bit -> outer integrity failure, no plaintext
broken = dataclasses.replace(package, ciphertext=flip_bit(package.ciphertext, 100))
try:
    open_package(broken, tse_keys, station_keys.verification_key)
except OuterIntegrityFailure as exc:
    print("tampered ciphertext:", exc)

# wrong verification key -> inner signature failure
impostor = generate_signing_keys(run_id)
try:
    open_package(package, tse_keys, impostor.verification_key)
except InnerSignatureFailure as exc:
    print("wrong verification key:", type(exc).__name__)

# a package replayed into another run is rejected by the run binding
try:
    open_package(
        package, tse_keys, station_keys.verification_key,
        expected_run_id="run-2026-999",
    )
except InnerSignatureFailure as exc:
    print("replayed into another run:", type(exc).__name__)

# run-scoped keys refuse to seal for a different run
try:
    seal(extract, "run-2026-999", "A", tse_keys.public_only(), station_keys)
except RunMismatch as exc:
    print("stale keys:", exc)

#!/usr/bin/env python3
"""Regenerate crates/core/testdata/vectors.json from independent primitives.

Uses the `cryptography` package for Ed25519 and hashlib for SHA-256, with
its own canonical-JSON and base58 code, so the Rust implementation can be
diffed against it.

usage: oracle_vectors.py [output-path]
"""
import base64
import hashlib
import json
import sys

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

B58 = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"


def b58(data):
    n = int.from_bytes(data, "big")
    out = ""
    while n:
        n, r = divmod(n, 58)
        out = B58[r] + out
    pad = len(data) - len(data.lstrip(b"\0"))
    return "1" * pad + out


def b64(data):
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode()


def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def keypair(seed):
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return sk, pk


def did(pk):
    return "did:shr:" + b58(pk)


def commitment(name, value, salt):
    return hashlib.sha256(canonical({"name": name, "salt": b64(salt), "value": value})).digest()


def main(out):
    seeds = [
        bytes(32),
        bytes([1] * 32),
        bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60"),
        bytes(range(32)),
    ]
    key_vectors = []
    for seed in seeds:
        _, pk = keypair(seed)
        key_vectors.append({"seed": b64(seed), "public_key": b64(pk), "did": did(pk)})

    commitment_inputs = [
        ("allergy_substance", "penicillin", bytes(16)),
        ("dosage", "50 mg", bytes(range(16))),
        ("note_text", "line one\nline \"two\" \\ é", bytes([0xFF] * 16)),
        ("quantity", "", bytes([7] * 16)),
    ]
    commitment_vectors = [
        {"name": n, "value": v, "salt": b64(s), "commitment": b64(commitment(n, v, s))}
        for n, v, s in commitment_inputs
    ]

    issuer_sk, issuer_pk = keypair(bytes([2] * 32))
    _, holder_pk = keypair(bytes([3] * 32))
    issuer_did = did(issuer_pk)
    schema_id = "drug_prescription:1.0:" + issuer_did
    cred_def_id = issuer_did + "/cred-def/" + schema_id
    values = {"dosage": "50 mg", "drug_designation": "tramadol", "quantity": "20"}
    salts = {name: bytes([i + 10] * 16) for i, name in enumerate(sorted(values))}
    commitments = [
        {"name": name, "commitment": b64(commitment(name, values[name], salts[name]))} for name in sorted(values)
    ]
    revocation = {"registry_id": cred_def_id + "/revoc/main", "index": 5}
    signed = canonical(
        {
            "cred_def_id": cred_def_id,
            "schema_id": schema_id,
            "holder_did": did(holder_pk),
            "commitments": commitments,
            "revocation": revocation,
        }
    )
    credential_vector = {
        "issuer_seed": b64(bytes([2] * 32)),
        "cred_def_id": cred_def_id,
        "schema_id": schema_id,
        "holder_did": did(holder_pk),
        "values": values,
        "salts": {k: b64(v) for k, v in salts.items()},
        "revocation": revocation,
        "signed_bytes_sha256": b64(hashlib.sha256(signed).digest()),
        "issuer_signature": b64(issuer_sk.sign(signed)),
    }

    doc = {"keys": key_vectors, "commitments": commitment_vectors, "credential": credential_vector}
    with open(out, "wb") as fh:
        fh.write(canonical(doc) + b"\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/testdata/vectors.json")

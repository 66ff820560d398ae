#!/usr/bin/env python3
"""Recompute the ledger hash-chain head from a canonical JSON-lines log.

head_0 = 32 zero bytes; head_k = SHA-256(head_{k-1} || line_k bytes).
Also checks that each line is canonical JSON and that its prev_hash equals
the running head.
Prints the final head as lowercase hex.
"""
import base64
import hashlib
import json
import sys


def b64url(text):
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def main(path):
    head = bytes(32)
    with open(path, "rb") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.rstrip(b"\n")
            tx = json.loads(line)
            canon = json.dumps(tx, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
            assert canon.encode() == line, f"line {n}: not canonical"
            assert tx["seq_no"] == n, f"line {n}: seq_no {tx['seq_no']}"
            assert b64url(tx["prev_hash"]) == head, f"line {n}: prev_hash"
            head = hashlib.sha256(head + line).digest()
    print(head.hex())


if __name__ == "__main__":
    main(sys.argv[1])

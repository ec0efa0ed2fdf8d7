"""Append-only result store: line-delimited JSON with per-line checksums.

Each line is `<payload-json>\\t<crc32 hex>`. A torn tail (partial write from
a crash) fails the checksum and is truncated on reload; records are immutable
and keyed by (config fingerprint/key, workload id, target qps, kind), so
re-running a plan skips work already stored.
"""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path

KINDS = ("probe", "main", "saturation", "aborted", "infeasible")


def record_key(config_key: str, workload_id: str, target_qps: float | None, kind: str) -> str:
    qps = "-" if target_qps is None else f"{target_qps:.4f}"
    return f"{config_key}|{workload_id}|{qps}|{kind}"


class ResultStore:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.records: dict[str, dict] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        valid_end = 0
        with open(self.path, "rb") as fh:
            offset = 0
            for raw in fh:
                line = raw.decode("utf-8", errors="replace").rstrip("\n")
                offset += len(raw)
                payload, _, check = line.rpartition("\t")
                if not payload:
                    continue
                try:
                    if int(check, 16) != zlib.crc32(payload.encode()):
                        continue
                    rec = json.loads(payload)
                except (ValueError, json.JSONDecodeError):
                    continue
                key = rec["key"]
                if key not in self.records:
                    self.records[key] = rec
                valid_end = offset
        # drop a torn tail so appends start at a clean line boundary
        actual = self.path.stat().st_size
        if valid_end < actual:
            with open(self.path, "rb+") as fh:
                fh.truncate(valid_end)

    def __contains__(self, key: str) -> bool:
        return key in self.records

    def __len__(self) -> int:
        return len(self.records)

    def keys(self):
        return self.records.keys()

    def get(self, key: str) -> dict | None:
        return self.records.get(key)

    def append(self, kind: str, config_key: str, workload_id: str,
               target_qps: float | None, data: dict) -> str:
        """Write one record; duplicate keys are ignored (idempotent)."""
        if kind not in KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        key = record_key(config_key, workload_id, target_qps, kind)
        if key in self.records:
            return key
        rec = {
            "key": key,
            "kind": kind,
            "config_key": config_key,
            "workload_id": workload_id,
            "target_qps": target_qps,
            "data": data,
        }
        payload = json.dumps(rec, sort_keys=True)
        line = f"{payload}\t{zlib.crc32(payload.encode()):08x}\n"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        self.records[key] = rec
        return key

    def by_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records.values() if r["kind"] == kind]

    def mains_for(self, config_key: str, workload_id: str) -> list[dict]:
        return sorted(
            (
                r
                for r in self.records.values()
                if r["kind"] == "main"
                and r["config_key"] == config_key
                and r["workload_id"] == workload_id
            ),
            key=lambda r: r["target_qps"],
        )

    def saturation_for(self, config_key: str, workload_id: str) -> dict | None:
        return self.records.get(record_key(config_key, workload_id, None, "saturation"))

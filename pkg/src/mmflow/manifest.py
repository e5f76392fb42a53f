"""JSON-lines dataset manifests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleManifestRecord:
    id: str
    duration_sec: float
    audio_latents_path: Optional[str] = None
    video_feats_path: Optional[str] = None
    sync_feats_path: Optional[str] = None
    caption: Optional[str] = None
    lyrics: Optional[str] = None
    language: str = "en"

    @property
    def has_conditioning(self) -> bool:
        return any(v is not None for v in (self.video_feats_path, self.sync_feats_path,
                                           self.caption, self.lyrics))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


_OPTIONAL = ("audio_latents_path", "video_feats_path", "sync_feats_path", "caption", "lyrics")


def _record_from_obj(obj, lineno: int, mode: str) -> SampleManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected an object")
    unknown = set(obj) - {"id", "duration_sec", "language", *_OPTIONAL}
    if unknown:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise ManifestError(f"line {lineno}: id must be a non-empty string")
    dur = obj.get("duration_sec")
    if isinstance(dur, bool) or not isinstance(dur, (int, float)) \
            or not math.isfinite(dur) or dur <= 0:
        raise ManifestError(f"line {lineno}: duration_sec must be a positive number")
    kwargs = {}
    for key in _OPTIONAL:
        value = obj.get(key)
        # empty strings count as absent
        if value is None or value == "":
            kwargs[key] = None
        elif isinstance(value, str):
            kwargs[key] = value
        else:
            raise ManifestError(f"line {lineno}: {key} must be a string or null")
    language = obj.get("language", "en")
    if not isinstance(language, str) or not language:
        raise ManifestError(f"line {lineno}: language must be a non-empty string")
    record = SampleManifestRecord(id=rid, duration_sec=float(dur), language=language, **kwargs)
    if mode == "train" and record.audio_latents_path is None:
        raise ManifestError(f"line {lineno}: record {rid!r} lacks audio_latents_path")
    return record


def parse_manifest(text: str, mode: str = "train") -> list[SampleManifestRecord]:
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown manifest mode {mode!r}")
    records, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: {exc.msg}") from None
        record = _record_from_obj(obj, lineno, mode)
        if record.id in seen:
            raise ManifestError(f"line {lineno}: duplicate id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return records


def read_manifest(path, mode: str = "train") -> list[SampleManifestRecord]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), mode=mode)


def write_manifest(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")

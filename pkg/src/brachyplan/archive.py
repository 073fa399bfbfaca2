"""Content-addressed, versioned artifact store keyed by case and phase.

Stands in for the clinical PACS: every stored artifact is immutable,
addressed by its sha256, and versioned densely from 1 per
(case, phase, kind). Writers serialize per case through an advisory file
lock; index updates are atomic (write-temp-rename), so readers never see a
torn index.

On-disk layout:
    cases/<case_id>/<phase>/<kind>/<version>_<hash8>.<ext>
    cases/<case_id>/index.json
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

from filelock import FileLock

from .workflow import TreatmentPhase


class ArtifactKind(Enum):
    VOLUME = "VOLUME"
    LABELS = "LABELS"
    DEVICE = "DEVICE"
    TRANSFORM = "TRANSFORM"
    PLAN = "PLAN"
    DOSE = "DOSE"
    REPORT = "REPORT"


_EXTENSIONS = {
    ArtifactKind.VOLUME: "svol",
    ArtifactKind.LABELS: "svol",
    ArtifactKind.DEVICE: "stl",
    ArtifactKind.TRANSFORM: "json",
    ArtifactKind.PLAN: "json",
    ArtifactKind.DOSE: "svol",
    ArtifactKind.REPORT: "json",
}


class MissingArtifactError(KeyError):
    pass


class CorruptArtifactError(RuntimeError):
    """Stored bytes no longer match their content hash."""


@dataclass(frozen=True)
class ArtifactRef:
    case_id: str
    phase: str
    kind: str
    version: int
    sha256: str
    filename: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArtifactRef":
        return cls(**d)


def _content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class ArtifactStore:
    """Filesystem-backed store; concurrent readers safe, writers per-case."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "cases").mkdir(parents=True, exist_ok=True)

    def _case_dir(self, case_id: str) -> Path:
        if not case_id or "/" in case_id or case_id.startswith("."):
            raise ValueError(f"invalid case id {case_id!r}")
        return self.root / "cases" / case_id

    def _index_path(self, case_id: str) -> Path:
        return self._case_dir(case_id) / "index.json"

    def _lock(self, case_id: str) -> FileLock:
        d = self._case_dir(case_id)
        d.mkdir(parents=True, exist_ok=True)
        return FileLock(str(d / ".lock"))

    def _load_index(self, case_id: str) -> dict:
        path = self._index_path(case_id)
        if not path.exists():
            return {"case_id": case_id, "created": None, "modified": None, "artifacts": []}
        return json.loads(path.read_text())

    def _save_index(self, case_id: str, index: dict) -> None:
        _atomic_write(self._index_path(case_id), json.dumps(index, indent=1).encode())

    def store(self, case_id: str, phase: TreatmentPhase, kind: ArtifactKind,
              data: bytes) -> ArtifactRef:
        """Write bytes; returns the existing ref unchanged for repeat content."""
        digest = _content_hash(data)
        with self._lock(case_id):
            index = self._load_index(case_id)
            same_slot = [
                a for a in index["artifacts"]
                if a["phase"] == phase.value and a["kind"] == kind.value
            ]
            for a in same_slot:
                if a["sha256"] == digest:
                    return ArtifactRef.from_dict(a)
            version = max((a["version"] for a in same_slot), default=0) + 1
            filename = (
                f"{phase.value}/{kind.value}/"
                f"{version}_{digest[:8]}.{_EXTENSIONS[kind]}"
            )
            path = self._case_dir(case_id) / filename
            path.parent.mkdir(parents=True, exist_ok=True)
            _atomic_write(path, data)
            ref = ArtifactRef(
                case_id=case_id,
                phase=phase.value,
                kind=kind.value,
                version=version,
                sha256=digest,
                filename=filename,
            )
            now = time.time()
            index["created"] = index["created"] or now
            index["modified"] = now
            index["artifacts"].append(ref.to_dict())
            self._save_index(case_id, index)
            return ref

    def fetch(self, ref: ArtifactRef) -> bytes:
        """Read back bytes, hash-verified."""
        path = self._case_dir(ref.case_id) / ref.filename
        if not path.exists():
            raise MissingArtifactError(f"artifact file missing: {ref.filename}")
        data = path.read_bytes()
        if _content_hash(data) != ref.sha256:
            raise CorruptArtifactError(f"hash mismatch for {ref.filename}")
        return data

    def refs(self, case_id: str, phase: TreatmentPhase | None = None,
             kind: ArtifactKind | None = None) -> list[ArtifactRef]:
        index = self._load_index(case_id)
        out = []
        for a in index["artifacts"]:
            if phase is not None and a["phase"] != phase.value:
                continue
            if kind is not None and a["kind"] != kind.value:
                continue
            out.append(ArtifactRef.from_dict(a))
        return out

    def latest(self, case_id: str, phase: TreatmentPhase,
               kind: ArtifactKind) -> ArtifactRef:
        """Highest-version ref in a (case, phase, kind) slot."""
        candidates = self.refs(case_id, phase, kind)
        if not candidates:
            raise MissingArtifactError(
                f"no {kind.value} artifact for case {case_id} in {phase.value}"
            )
        return max(candidates, key=lambda r: r.version)

    def latest_any_phase(self, case_id: str, kind: ArtifactKind) -> ArtifactRef:
        """Latest ref of a kind, searching POST, then INTRA, then PRE."""
        for phase in (TreatmentPhase.POST, TreatmentPhase.INTRA, TreatmentPhase.PRE):
            try:
                return self.latest(case_id, phase, kind)
            except MissingArtifactError:
                continue
        raise MissingArtifactError(f"no {kind.value} artifact for case {case_id}")

    def followup_overlay(self, case_id: str) -> dict:
        """Bundle for rendering the device over the follow-up scan.

        Needs the latest POST-phase volume plus the latest stored device
        model and registration (any phase). Returns a structured incomplete
        result listing what is missing instead of raising.
        """
        missing = []
        bundle = {}
        try:
            bundle["volume"] = self.latest(case_id, TreatmentPhase.POST, ArtifactKind.VOLUME)
        except MissingArtifactError:
            missing.append("VOLUME@POST")
        for key, kind in (("device", ArtifactKind.DEVICE), ("registration", ArtifactKind.TRANSFORM)):
            try:
                bundle[key] = self.latest_any_phase(case_id, kind)
            except MissingArtifactError:
                missing.append(kind.value)
        if missing:
            return {"complete": False, "missing": missing}
        return {
            "complete": True,
            "refs": {key: ref.to_dict() for key, ref in bundle.items()},
        }

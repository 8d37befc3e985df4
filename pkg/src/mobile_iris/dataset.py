"""
Dataset manifests, subject filtering, and the five-fold identification protocol.

A manifest is a JSON file::

    {"dataset": "...",
     "records": [{"id": "...", "subject": "...", "eye": "L" | "R",
                  "session": 1, "device": "...", "image": "img/a.png",
                  "seg_mask": "...", "inner_mask": "...", "outer_mask": "..."}]}

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import (
    ConfigurationError,
    DuplicateRecordError,
    MalformedManifestError,
    ManifestSchemaError,
    MissingFileError,
)
from .io_utils import read_mask  # noqa: F401  (re-exported: mask ingestion lives with the dataset)

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["dataset", "records"],
    "properties": {
        "dataset": {"type": "string"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "subject", "eye", "session", "image"],
                "properties": {
                    "id": {"type": "string"},
                    "subject": {"type": "string"},
                    "eye": {"enum": ["L", "R"]},
                    "session": {"type": "integer"},
                    "device": {"type": ["string", "null"]},
                    "image": {"type": "string"},
                    "seg_mask": {"type": ["string", "null"]},
                    "inner_mask": {"type": ["string", "null"]},
                    "outer_mask": {"type": ["string", "null"]},
                },
            },
        },
    },
}

PATH_FIELDS = ("image", "seg_mask", "inner_mask", "outer_mask")


@dataclass(frozen=True)
class Record:
    id: str
    subject: str
    eye: str
    session: int
    image: Path
    device: str | None = None
    seg_mask: Path | None = None
    inner_mask: Path | None = None
    outer_mask: Path | None = None


@dataclass
class Manifest:
    dataset: str
    records: list[Record]
    root: Path = field(default_factory=Path)

    def by_id(self) -> dict[str, Record]:
        return {r.id: r for r in self.records}


def load_manifest(path) -> Manifest:
    """Read and validate a manifest; every referenced file must exist."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"{path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(payload, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        context = ""
        if len(exc.absolute_path) >= 2 and exc.absolute_path[0] == "records":
            rec = payload["records"][exc.absolute_path[1]]
            if isinstance(rec, dict) and "id" in rec:
                context = f" (record id {rec['id']!r})"
        raise ManifestSchemaError(f"{path}: schema violation at {where}{context}: {exc.message}") from exc

    root = path.parent
    seen: set[str] = set()
    records = []
    for raw in payload["records"]:
        if raw["id"] in seen:
            raise DuplicateRecordError(f"{path}: duplicate record id {raw['id']!r}")
        seen.add(raw["id"])
        resolved = {}
        for key in PATH_FIELDS:
            if raw.get(key) is None:
                continue
            full = root / raw[key]
            if not full.exists():
                raise MissingFileError(f"{path}: record {raw['id']!r} references missing {key} file {raw[key]!r}")
            resolved[key] = full
        records.append(
            Record(
                id=raw["id"],
                subject=raw["subject"],
                eye=raw["eye"],
                session=raw["session"],
                device=raw.get("device"),
                **resolved,
            )
        )
    return Manifest(payload["dataset"], records, root)


def filter_subjects(manifest: Manifest, min_images: int = 5) -> list[tuple[str, str, list[str]]]:
    """Pick one qualifying eye branch per subject.

    A (subject, eye) branch qualifies with at least ``min_images`` images;
    when both eyes qualify the left one is kept. Output is sorted by
    subject id, image ids sorted within each branch.
    """
    branches: dict[tuple[str, str], list[str]] = defaultdict(list)
    for r in manifest.records:
        branches[(r.subject, r.eye)].append(r.id)
    selected = []
    for subject in sorted({s for s, _ in branches}):
        for eye in ("L", "R"):
            ids = branches.get((subject, eye), [])
            if len(ids) >= min_images:
                selected.append((subject, eye, sorted(ids)))
                break
    return selected


@dataclass
class Fold:
    test: dict[str, str]  # subject -> test image id
    train: dict[str, list[str]]  # subject -> training image ids


@dataclass
class FoldPlan:
    subjects: dict[str, list[str]]  # subject -> the sampled image ids, in fold order
    folds: list[Fold]


def make_folds(selected, images_per_subject: int = 5, seed: int = 0) -> FoldPlan:
    """Sample ``images_per_subject`` images per branch; fold f tests image f and trains on the rest."""
    rng = np.random.default_rng(seed)
    subjects: dict[str, list[str]] = {}
    for subject, _eye, ids in sorted(selected):
        if len(ids) < images_per_subject:
            raise ConfigurationError(
                f"subject {subject!r} has {len(ids)} images, needs {images_per_subject}"
            )
        pick = rng.choice(len(ids), size=images_per_subject, replace=False)
        subjects[subject] = [sorted(ids)[i] for i in pick]
    folds = []
    for f in range(images_per_subject):
        folds.append(
            Fold(
                test={s: ids[f] for s, ids in subjects.items()},
                train={s: ids[:f] + ids[f + 1 :] for s, ids in subjects.items()},
            )
        )
    return FoldPlan(subjects, folds)

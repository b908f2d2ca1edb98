"""The dataset manifest: the pipeline's persistent, diffable artifact.

Line-delimited UTF-8 with a versioned header. First line:

    diffid-manifest v1<TAB>crop=<H>x<W>

then one record per line, tab-separated:

    path  identity  source  camera  filter_kind  score  split

A missing camera is written as "-". Scores round-trip exactly (shortest
float repr). Record paths are relative to the directory holding the
manifest file.
"""

from dataclasses import dataclass
from pathlib import Path

from .errors import IntegrityError, InvalidArgument

HEADER_MAGIC = "diffid-manifest v1"
_NULL = "-"


@dataclass(frozen=True, slots=True)
class ManifestRecord:
    path: str
    identity: str
    source: str
    camera: str | None = None
    filter_kind: str = "none"
    score: float = 1.0
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple = ()
    crop_size: tuple = (256, 128)
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "crop_size", (int(self.crop_size[0]), int(self.crop_size[1])))
        if self.crop_size[0] < 1 or self.crop_size[1] < 1:
            raise InvalidArgument("crop_size must be positive in both dimensions")
        seen = set()
        for rec in self.records:
            if not rec.identity:
                raise InvalidArgument(f"{rec.path}: identity label must be non-empty")
            if not 0.0 <= rec.score <= 1.0:
                raise InvalidArgument(f"{rec.path}: score {rec.score} outside [0, 1]")
            if rec.path in seen:
                raise InvalidArgument(f"duplicate manifest path {rec.path!r}")
            seen.add(rec.path)

    def __len__(self):
        return len(self.records)

    @property
    def identities(self) -> tuple:
        return tuple(sorted({r.identity for r in self.records}))

    def identity_counts(self) -> dict:
        counts = {}
        for rec in self.records:
            counts[rec.identity] = counts.get(rec.identity, 0) + 1
        return counts

    def filtered(self, pred) -> "DatasetManifest":
        return DatasetManifest(records=tuple(r for r in self.records if pred(r)),
                               crop_size=self.crop_size, version=self.version)


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = [f"{HEADER_MAGIC}\tcrop={manifest.crop_size[0]}x{manifest.crop_size[1]}"]
    for r in manifest.records:
        cam = r.camera if r.camera is not None else _NULL
        lines.append("\t".join(
            [r.path, r.identity, r.source, cam, r.filter_kind, repr(r.score), r.split]))
    return "\n".join(lines) + "\n"


def loads_manifest(text: str) -> DatasetManifest:
    lines = text.splitlines()
    if not lines:
        raise IntegrityError("empty manifest text")
    head = lines[0].split("\t")
    if head[0] != HEADER_MAGIC:
        raise IntegrityError(f"bad manifest header {lines[0]!r}")
    crop = (256, 128)
    for part in head[1:]:
        if part.startswith("crop="):
            h, w = part[len("crop="):].split("x")
            crop = (int(h), int(w))
    records = []
    for line_no, line in enumerate(lines[1:], 2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise IntegrityError(f"line {line_no}: expected 7 fields, got {len(parts)}")
        path, identity, source, cam, kind, score, split = parts
        records.append(ManifestRecord(
            path=path, identity=identity, source=source,
            camera=None if cam == _NULL else cam,
            filter_kind=kind, score=float(score), split=split))
    return DatasetManifest(records=tuple(records), crop_size=crop)


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))

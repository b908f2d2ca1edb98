"""Assembling filtered samples into a dataset and describing its shape.

assemble() writes kept images to disk and emits the manifest; the
statistics functions answer the questions one asks of such a dataset: the
identity-count CDF ("Y% of identities each has fewer than X images"),
headline counts, and per-source breakdowns. rebalance() trims
over-represented identities, preferring high filter scores.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError, InvalidArgument
from .images import resize, save_png
from .manifest import DatasetManifest, ManifestRecord
from .seeding import derive_rng

DEFAULT_CROP = (256, 128)


def assemble(reports, out_dir, crop=DEFAULT_CROP) -> DatasetManifest:
    """Write every kept sample under out_dir/source/identity/ at crop size.

    Records are sorted canonically by path before the manifest is built,
    so re-running on the same inputs reproduces the manifest byte for
    byte. Two kept samples mapping to one path is an integrity error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    planned = {}
    for report in reports:
        for sample in report.kept:
            if not sample.source:
                raise InvalidArgument(f"sample {sample.sample_id} carries no source id")
            rel = f"{sample.source}/{sample.identity}/{sample.sample_id}.png"
            if rel in planned:
                raise IntegrityError(f"path collision at {rel!r}")
            planned[rel] = (sample, report.filter_kind)

    records = []
    for rel in sorted(planned):
        sample, kind = planned[rel]
        save_png(resize(sample.image, crop), out_dir / rel)
        records.append(ManifestRecord(
            path=rel, identity=sample.identity, source=sample.source,
            camera=sample.camera, filter_kind=kind,
            score=sample.score_for(kind), split="train"))
    return DatasetManifest(records=tuple(records), crop_size=crop)


@dataclass(frozen=True)
class DistributionCurve:
    """Points (X, Y): Y% of identities have fewer than X images each."""

    points: tuple

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        object.__setattr__(self, "points", pts)
        ys = [y for _, y in pts]
        if any(not 0.0 <= y <= 100.0 for y in ys):
            raise InvalidArgument("percentages must lie in [0, 100]")
        xs = [x for x, _ in pts]
        if sorted(xs) == xs and any(b < a for a, b in zip(ys, ys[1:])):
            raise InvalidArgument("Y must be non-decreasing in X")


def compute_identity_cdf(manifest: DatasetManifest, thresholds) -> DistributionCurve:
    """Fraction of identities below each image-count threshold, in percent."""
    if len(manifest) == 0:
        raise InvalidArgument("manifest is empty")
    counts = np.array(list(manifest.identity_counts().values()))
    pts = [(float(x), 100.0 * float(np.sum(counts < x)) / len(counts))
           for x in sorted(float(t) for t in thresholds)]
    return DistributionCurve(points=tuple(pts))


def format_cdf(curve: DistributionCurve) -> str:
    return "".join(f"{x:g}\t{y!r}\n" for x, y in curve.points)


@dataclass(frozen=True)
class DatasetStats:
    images: int
    identities: int
    mean_per_identity: float
    per_source: dict
    count_range: tuple
    share_in_range: float
    share_above_count: int
    share_above: float
    scenes: int
    crop_size: tuple


def stats_report(manifest: DatasetManifest, count_range=(70, 210),
                 above=130) -> DatasetStats:
    """Headline counts plus the identity-count shares of interest.

    share_in_range is the percentage of identities whose image count lies
    inclusively in count_range; share_above the percentage with strictly
    more than `above` images.
    """
    counts = manifest.identity_counts()
    n_ids = len(counts)
    per_source = {}
    for rec in manifest.records:
        imgs, ids = per_source.setdefault(rec.source, [0, set()])
        per_source[rec.source][0] = imgs + 1
        ids.add(rec.identity)
    per_source = {s: (n, len(ids)) for s, (n, ids) in sorted(per_source.items())}
    values = list(counts.values())
    lo, hi = count_range
    in_range = sum(1 for v in values if lo <= v <= hi)
    above_n = sum(1 for v in values if v > above)
    cameras = {rec.camera for rec in manifest.records if rec.camera is not None}
    return DatasetStats(
        images=len(manifest),
        identities=n_ids,
        mean_per_identity=len(manifest) / n_ids if n_ids else 0.0,
        per_source=per_source,
        count_range=(lo, hi),
        share_in_range=100.0 * in_range / n_ids if n_ids else 0.0,
        share_above_count=above,
        share_above=100.0 * above_n / n_ids if n_ids else 0.0,
        scenes=len(cameras),
        crop_size=manifest.crop_size,
    )


def format_stats(stats: DatasetStats, environment: str = "synthetic") -> str:
    """Key-value text report (same columns as the dataset tables)."""
    lines = [
        f"images={stats.images}",
        f"scene={stats.scenes if stats.scenes else 'vary'}",
        f"person_ids={stats.identities}",
        "labeled=yes",
        f"environment={environment}",
        f"crop_size={stats.crop_size[0]}x{stats.crop_size[1]}",
        f"mean_images_per_identity={stats.mean_per_identity:.4f}",
        f"share_in_range[{stats.count_range[0]},{stats.count_range[1]}]="
        f"{stats.share_in_range:.4f}",
        f"share_above_{stats.share_above_count}={stats.share_above:.4f}",
    ]
    for source, (imgs, ids) in stats.per_source.items():
        lines.append(f"source.{source}={imgs} images, {ids} ids")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RebalanceResult:
    manifest: DatasetManifest
    deficiencies: dict  # identity -> current count, for ids below the floor


def rebalance(manifest: DatasetManifest, max_per_id: int | None,
              min_per_id: int = 0, seed: int = 0) -> RebalanceResult:
    """Down-sample identities above max_per_id, flag those below min_per_id.

    Trimming keeps the highest-scoring records (seeded tie-break); nothing
    is ever fabricated for deficient identities, they are only reported.
    """
    if min_per_id < 0:
        raise InvalidArgument("min_per_id must be >= 0")
    if max_per_id is not None and max_per_id < min_per_id:
        raise InvalidArgument("max_per_id must be >= min_per_id")
    by_identity = {}
    for r in manifest.records:
        by_identity.setdefault(r.identity, []).append(r)
    keep_paths = set()
    for identity, recs in by_identity.items():
        if max_per_id is not None and len(recs) > max_per_id:
            rng = derive_rng(seed, "rebalance", identity)
            tiebreak = rng.permutation(len(recs))
            order = sorted(range(len(recs)),
                           key=lambda i: (-recs[i].score, tiebreak[i]))
            recs = [recs[i] for i in order[:max_per_id]]
        keep_paths.update(r.path for r in recs)
    kept = tuple(r for r in manifest.records if r.path in keep_paths)
    new_counts = {}
    for r in kept:
        new_counts[r.identity] = new_counts.get(r.identity, 0) + 1
    deficiencies = {i: c for i, c in sorted(new_counts.items()) if c < min_per_id}
    return RebalanceResult(
        manifest=DatasetManifest(records=kept, crop_size=manifest.crop_size,
                                 version=manifest.version),
        deficiencies=deficiencies,
    )

"""End-to-end coordination: caption, token allocation, reference set,
fine-tune, sample, filter, assemble, report.

Identities run as independent jobs (optionally in parallel); one failing
identity never blocks the others, it is recorded in the ledger and skipped
downstream. Every stage caches its artifact, so a rerun only executes
stages whose outputs are missing. All per-identity randomness derives from
(root seed, source, identity), never from scheduling order.
"""

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import assemble, compute_identity_cdf, format_cdf, format_stats, stats_report
from .backends import get_backend
from .config import PipelineConfig
from .denoiser import ToyDenoiser
from .embedders import ToyJointEmbedder
from .errors import InvalidArgument
from .filters import (
    FilterTrainConfig,
    apply_threshold,
    calibrate_threshold,
    make_clip_scorer,
    score_samples,
    train_id_classifier,
    train_reid_embedder,
)
from .images import load_png
from .manifest import read_manifest, write_manifest
from .prompts import (
    DEFAULT_VOCABULARY,
    CaptionerHandle,
    allocate_iir,
    build_prompts,
    caption_sequence,
    default_iir_candidates,
    load_iir_candidates,
)
from .reference import build_reference_set, cache_reference_set, load_reference_set
from .samples import GeneratedSample
from .schedules import make_schedule
from .seeding import derive_seed

STAGES = ("caption", "iir", "reference", "finetune", "sample", "filter")
DEFAULT_CDF_THRESHOLDS = (10, 30, 50, 70, 90, 110, 130, 150, 170, 190, 210)


@dataclass
class IdentitySequence:
    """One identity's source images (the consecutive same-camera sequence)."""

    identity: str
    source: str
    images: list
    cameras: list = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.source}/{self.identity}"


class IirRegistry:
    """Run-wide rare-token registry; allocation is serialized and unique."""

    def __init__(self, vocabulary=DEFAULT_VOCABULARY):
        self._vocabulary = set(vocabulary)
        self._tokens = {}
        self._lock = threading.Lock()

    def allocate(self, key: str, candidates, seed: int) -> str:
        with self._lock:
            if key in self._tokens:
                return self._tokens[key]
            used = self._vocabulary | set(self._tokens.values())
            token = allocate_iir(used, candidates, seed)
            self._tokens[key] = token
            return token

    def register(self, key: str, token: str):
        """Adopt a token restored from cache."""
        with self._lock:
            other = self._tokens.get(key)
            if other is not None and other != token:
                raise InvalidArgument(f"{key}: cached token {token!r} conflicts with {other!r}")
            if token in self._tokens.values() and other != token:
                raise InvalidArgument(f"token {token!r} already allocated to another identity")
            self._tokens[key] = token

    @property
    def tokens(self) -> dict:
        with self._lock:
            return dict(self._tokens)


@dataclass(frozen=True)
class StageRecord:
    identity: str
    source: str
    stage: str
    status: str  # ok | cached | skipped | failed
    duration_s: float
    outputs: tuple = ()
    error: str | None = None


class RunLedger:
    def __init__(self):
        self.records = []
        self._lock = threading.Lock()

    def append(self, record: StageRecord):
        with self._lock:
            self.records.append(record)

    def for_identity(self, source: str, identity: str) -> list:
        return [r for r in self.records if r.identity == identity and r.source == source]

    def executed(self, stage: str | None = None) -> int:
        return sum(1 for r in self.records
                   if r.status == "ok" and (stage is None or r.stage == stage))

    def failures(self) -> dict:
        return {f"{r.source}/{r.identity}": r.stage
                for r in self.records if r.status == "failed"}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({
                    "identity": r.identity, "source": r.source, "stage": r.stage,
                    "status": r.status, "duration_s": round(r.duration_s, 6),
                    "outputs": list(r.outputs), "error": r.error,
                }) + "\n")


@dataclass
class PipelineContext:
    """Run-level assets shared by every identity job."""

    cfg: PipelineConfig
    schedule: object
    backend: object
    filter_models: dict  # source -> FilterModel
    taus: dict           # source -> float
    registry: IirRegistry
    ledger: RunLedger
    cache_dir: Path
    refset_dir: Path
    iir_candidates: tuple


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _run_stage(ctx: PipelineContext, seq: IdentitySequence, stage: str,
               compute, cache_probe=None, describe=None):
    """Execute one stage with caching and ledger bookkeeping.

    cache_probe() returns the cached value or None on a miss; compute()
    produces and persists the value; describe(value) names the outputs for
    the ledger.
    """
    start = time.perf_counter()
    try:
        value = cache_probe() if cache_probe is not None else None
        status = "cached" if value is not None else "ok"
        if value is None:
            value = compute()
    except Exception as exc:  # noqa: BLE001 - isolate the identity, record why
        ctx.ledger.append(StageRecord(seq.identity, seq.source, stage, "failed",
                                      time.perf_counter() - start, error=str(exc)))
        raise StageFailure(stage, exc) from exc
    outputs = tuple(describe(value)) if describe is not None else ()
    ctx.ledger.append(StageRecord(seq.identity, seq.source, stage, status,
                                  time.perf_counter() - start, outputs=outputs))
    return value


def _skip_stage(ctx, seq, stage, reason):
    ctx.ledger.append(StageRecord(seq.identity, seq.source, stage, "skipped", 0.0,
                                  outputs=(reason,)))


def _json_probe(path: Path, key: str):
    def probe():
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))[key]
        return None
    return probe


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def run_identity(seq: IdentitySequence, ctx: PipelineContext):
    """Drive one identity through the six stages.

    Returns the identity's FilterReport, or None if a stage failed (the
    failure is recorded in the ledger and later stages are not attempted).
    """
    cfg = ctx.cfg
    ident_dir = ctx.cache_dir / f"{seq.source}__{seq.identity}"
    try:
        caption_path = ident_dir / "caption.json"

        def compute_caption():
            text = caption_sequence(seq.images, CaptionerHandle(name=cfg.captioner))
            _write_json(caption_path, {"caption": text})
            return text

        caption = _run_stage(ctx, seq, "caption", compute_caption,
                             _json_probe(caption_path, "caption"),
                             describe=lambda _: (str(caption_path),))

        iir_path = ident_dir / "iir.json"

        def probe_iir():
            token = _json_probe(iir_path, "token")()
            if token is not None:
                ctx.registry.register(seq.key, token)
            return token

        def compute_iir():
            token = ctx.registry.allocate(
                seq.key, ctx.iir_candidates, derive_seed(cfg.seed, "iir", seq.key))
            _write_json(iir_path, {"token": token})
            return token

        token = _run_stage(ctx, seq, "iir", compute_iir, probe_iir,
                           describe=lambda _: (str(iir_path),))
        bundle = build_prompts(caption, token)

        ref = None
        if cfg.backend != "toy":
            _skip_stage(ctx, seq, "reference", "delegated to backend")
        elif cfg.prior_lambda == 0:
            _skip_stage(ctx, seq, "reference", "prior term disabled")
        else:
            ref_meta = ident_dir / "reference.json"

            def probe_ref():
                set_id = _json_probe(ref_meta, "set_id")()
                if set_id is None:
                    return None
                return load_reference_set(ctx.refset_dir, set_id)

            def compute_ref():
                built = build_reference_set(
                    ctx.backend.base_model, bundle, n=cfg.reference_set_size,
                    seed=derive_seed(cfg.seed, "reference", seq.key) % 10**9,
                    s=ctx.schedule, n_steps=cfg.sample_steps)
                set_id = cache_reference_set(built, ctx.refset_dir)
                _write_json(ref_meta, {"set_id": set_id})
                return built

            ref = _run_stage(ctx, seq, "reference", compute_ref, probe_ref,
                             describe=lambda r: (str(ref_meta), f"n={len(r)}"))

        ckpt_path = ident_dir / "denoiser.ckpt"

        def probe_model():
            # external handles are opaque and cannot be resumed from disk;
            # only the toy engine's checkpoints short-circuit this stage
            if cfg.backend == "toy" and ckpt_path.exists():
                return ToyDenoiser.load(ckpt_path)
            return None

        def compute_model():
            handle = ctx.backend.fine_tune(seq.images, bundle, {
                "steps": cfg.finetune_steps,
                "learning_rate": cfg.finetune_lr,
                "batch_size": cfg.finetune_batch,
                "seed": derive_seed(cfg.seed, "finetune", seq.key),
                "prior_lambda": cfg.prior_lambda,
                "reference_set": ref,
                "sample_steps": cfg.sample_steps,
            })
            if isinstance(handle, ToyDenoiser):
                handle.save(ckpt_path)
            return handle

        handle = _run_stage(ctx, seq, "finetune", compute_model, probe_model,
                            describe=lambda _: (str(ckpt_path),))

        samples_path = ident_dir / "samples.npz"
        seed_base = derive_seed(cfg.seed, "sample", seq.key) % 10**9

        def probe_samples():
            if not samples_path.exists():
                return None
            data = np.load(samples_path)
            return [GeneratedSample(image=img, identity=seq.identity,
                                    prompt=bundle.enhanced_prompt, seed=int(sd),
                                    source=seq.source)
                    for img, sd in zip(data["images"], data["seeds"])]

        def compute_samples():
            images = ctx.backend.sample(handle, bundle.enhanced_prompt, seed_base,
                                        cfg.samples_per_identity)
            seeds = [seed_base + i for i in range(len(images))]
            samples_path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(samples_path, images=np.stack(images), seeds=np.array(seeds))
            return [GeneratedSample(image=img, identity=seq.identity,
                                    prompt=bundle.enhanced_prompt, seed=sd,
                                    source=seq.source)
                    for img, sd in zip(images, seeds)]

        samples = _run_stage(ctx, seq, "sample", compute_samples, probe_samples,
                             describe=lambda ss: (str(samples_path), f"n={len(ss)}"))

        scores_path = ident_dir / "filter.json"
        model = ctx.filter_models[seq.source]
        tau = ctx.taus[seq.source]

        def probe_scores():
            if not scores_path.exists():
                return None
            payload = json.loads(scores_path.read_text(encoding="utf-8"))
            if payload.get("kind") != model.kind or payload.get("tau") != tau:
                return None
            scores = payload["scores"]
            if set(scores) != {s.sample_id for s in samples}:
                return None  # sample set changed under the cache
            scored = []
            for s in samples:
                s.scores[model.kind] = scores[s.sample_id]
                scored.append(s)
            return apply_threshold(scored, tau, kind=model.kind), payload["n_errors"]

        def compute_scores():
            result = score_samples(model, samples)
            report = apply_threshold(result.scored, tau, kind=model.kind)
            _write_json(scores_path, {
                "kind": model.kind, "tau": tau,
                "scores": {s.sample_id: s.scores[model.kind] for s in result.scored},
                "n_errors": len(result.errors),
                "errors": [e.message for e in result.errors],
            })
            return report, len(result.errors)

        report, _ = _run_stage(
            ctx, seq, "filter", compute_scores, probe_scores,
            describe=lambda rv: (f"kept={len(rv[0].kept)}",
                                 f"discarded={len(rv[0].discarded)}",
                                 f"score_errors={rv[1]}"))
        return report
    except StageFailure:
        return None


def _load_sources(cfg: PipelineConfig, base_dir):
    """Group source-manifest train records into identity sequences.

    Returns (sequences, train sets, held-out sets) where the sets map
    source -> (images, labels). Held-out (non-train) records feed threshold
    calibration; sources without any fall back to their train images.
    """
    if not cfg.sources:
        raise InvalidArgument("the pipeline config lists no source manifests")
    by_seq, train_sets, holdouts = {}, {}, {}
    for src_path in cfg.sources:
        path = Path(base_dir) / src_path
        manifest = read_manifest(path)
        if len(manifest) == 0:
            raise InvalidArgument(f"{path}: source manifest is empty")
        root = path.parent
        for rec in manifest.records:
            img = load_png(root / rec.path)
            if rec.split == "train":
                by_seq.setdefault((rec.source, rec.identity), []).append((img, rec.camera))
                imgs, labels = train_sets.setdefault(rec.source, ([], []))
                imgs.append(img)
                labels.append(rec.identity)
            else:
                imgs, labels = holdouts.setdefault(rec.source, ([], []))
                imgs.append(img)
                labels.append(rec.identity)
    sequences = [IdentitySequence(identity=identity, source=source,
                                  images=[p[0] for p in pairs],
                                  cameras=[p[1] for p in pairs])
                 for (source, identity), pairs in sorted(by_seq.items())]
    holdout_sets = {source: holdouts.get(source, pair) for source, pair in train_sets.items()}
    return sequences, train_sets, holdout_sets


def _fit_filters(cfg: PipelineConfig, train_sets, holdout_sets):
    """Per-source filter model and threshold (configured or calibrated)."""
    models, taus = {}, {}
    for source, (images, labels) in sorted(train_sets.items()):
        seed = derive_seed(cfg.seed, "filter", source) % 2**32
        fit_cfg = FilterTrainConfig(seed=seed)
        if cfg.filter_kind == "reid_ctf":
            model, _ = train_reid_embedder(images, labels, fit_cfg, provenance=(source,))
        elif cfg.filter_kind == "cctf":
            model = train_id_classifier(images, labels, fit_cfg, provenance=(source,))
        else:
            embedder = ToyJointEmbedder(np.asarray(images[0]).shape, seed=seed)
            model = make_clip_scorer(cfg.class_text, embedder)
        models[source] = model
        if cfg.tau is not None:
            taus[source] = cfg.tau
        else:
            h_imgs, h_labels = holdout_sets[source]
            probes = [GeneratedSample(image=img, identity=lbl, source=source, seed=i)
                      for i, (img, lbl) in enumerate(zip(h_imgs, h_labels))]
            result = score_samples(models[source], probes)
            if not result.scored:
                raise InvalidArgument(f"{source}: no held-out image could be scored")
            scores = [s.scores[cfg.filter_kind] for s in result.scored]
            taus[source] = calibrate_threshold(scores, cfg.calibrate_keep_fraction)
    return models, taus


def prepare_context(cfg: PipelineConfig, base_dir=".") -> tuple:
    """Build the run-level context; returns (context, sequences)."""
    out_dir = Path(base_dir) / cfg.out_dir
    sequences, train_sets, holdout_sets = _load_sources(cfg, base_dir)
    schedule = make_schedule(cfg.timesteps, cfg.schedule_kind)
    backend = get_backend(cfg.backend, image_shape=cfg.image_shape, cond_dim=cfg.cond_dim,
                          schedule=schedule,
                          base_seed=derive_seed(cfg.seed, "base-model") % 2**32,
                          sample_steps=cfg.sample_steps)
    models, taus = _fit_filters(cfg, train_sets, holdout_sets)
    candidates = (load_iir_candidates(Path(base_dir) / cfg.iir_candidates)
                  if cfg.iir_candidates else default_iir_candidates())
    ctx = PipelineContext(
        cfg=cfg, schedule=schedule, backend=backend,
        filter_models=models, taus=taus,
        registry=IirRegistry(), ledger=RunLedger(),
        cache_dir=out_dir / "cache", refset_dir=out_dir / "cache" / "refsets",
        iir_candidates=candidates)
    return ctx, sorted(sequences, key=lambda s: (s.source, s.identity))


@dataclass
class PipelineResult:
    manifest: object
    stats: object
    curve: object
    ledger: RunLedger
    failures: dict
    out_dir: Path
    manifest_path: Path

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def run_pipeline(cfg: PipelineConfig, base_dir=".") -> PipelineResult:
    """Run every identity, assemble kept samples, write all artifacts.

    Writes manifest.tsv, stats.txt, cdf.tsv and ledger.jsonl under the
    configured output directory. Per-identity failures are aggregated in
    the result (exit_code 1) but never stop the other identities.
    """
    ctx, sequences = prepare_context(cfg, base_dir)
    out_dir = Path(base_dir) / cfg.out_dir

    # Pre-register cached tokens, then allocate the rest in sorted order so
    # the outcome never depends on scheduling.
    for seq in sequences:
        cached = ctx.cache_dir / f"{seq.source}__{seq.identity}" / "iir.json"
        if cached.exists():
            ctx.registry.register(seq.key, json.loads(cached.read_text())["token"])
    for seq in sequences:
        ctx.registry.allocate(seq.key, ctx.iir_candidates,
                              derive_seed(cfg.seed, "iir", seq.key))

    workers = ctx.cfg.workers if ctx.cfg.workers > 0 else min(4, len(sequences))
    if workers <= 1:
        reports = [run_identity(seq, ctx) for seq in sequences]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda s: run_identity(s, ctx), sequences))

    kept_reports = [r for r in reports if r is not None]
    dataset_dir = out_dir / "dataset"
    manifest = assemble(kept_reports, dataset_dir, crop=cfg.crop_size)
    # image paths are relative to the manifest's own directory
    manifest_path = dataset_dir / "manifest.tsv"
    write_manifest(manifest, manifest_path)

    stats = stats_report(manifest) if len(manifest) else None
    if stats is not None:
        (out_dir / "stats.txt").write_text(format_stats(stats), encoding="utf-8")
    curve = None
    if len(manifest):
        counts = manifest.identity_counts().values()
        thresholds = sorted(set(DEFAULT_CDF_THRESHOLDS) | {max(counts) + 1})
        curve = compute_identity_cdf(manifest, thresholds)
        (out_dir / "cdf.tsv").write_text(format_cdf(curve), encoding="utf-8")
    ctx.ledger.save(out_dir / "ledger.jsonl")
    return PipelineResult(manifest=manifest, stats=stats, curve=curve, ledger=ctx.ledger,
                          failures=ctx.ledger.failures(), out_dir=out_dir,
                          manifest_path=manifest_path)

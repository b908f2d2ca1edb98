"""Confidence scoring of generated samples and threshold partitioning.

Three scorer families, all mapping a sample to [0, 1]:

* clip      - cosine between a class-text embedding and the image embedding
              in the toy joint space, mapped through (1 + cos) / 2;
* cctf      - an identity classifier's probability on the claimed label;
* reid_ctf  - (1 + cos) / 2 between the sample's retrieval embedding and
              its identity's source-gallery centroid.

Thresholds either come from configuration or are calibrated as a quantile
of held-out real-image scores.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .embedders import (
    EmbeddingGallery,
    PixelProjectionEmbedder,
    ReidEmbedder,
    build_gallery,
)
from .errors import InvalidArgument, UnknownLabelError
from .samples import GeneratedSample

FILTER_KINDS = ("clip", "cctf", "reid_ctf")


@dataclass(frozen=True)
class FilterTrainConfig:
    seed: int = 0
    embed_dim: int = 32
    hidden_dim: int = 32
    epochs: int = 200
    learning_rate: float = 0.5


@dataclass(frozen=True)
class FilterModel:
    """A named scorer plus the source datasets it was fitted on."""

    kind: str
    scorer: Callable[[GeneratedSample], float]
    provenance: tuple = ()
    model: object = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise InvalidArgument(f"unknown filter kind {self.kind!r}")


def cosine_confidence(a: np.ndarray, b: np.ndarray) -> float:
    """(1 + cos(a, b)) / 2, clipped against float fuzz."""
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        raise InvalidArgument("cosine of a zero vector is undefined")
    cos = float(np.dot(a, b) / denom)
    return min(max((1.0 + cos) / 2.0, 0.0), 1.0)


def make_clip_scorer(class_text: str, joint_embedder) -> FilterModel:
    """Score images by text-image agreement in the joint toy space."""
    if not class_text:
        raise InvalidArgument("class_text must be non-empty")
    text_vec = joint_embedder.embed_text(class_text)

    def scorer(sample: GeneratedSample) -> float:
        return cosine_confidence(text_vec, joint_embedder.embed_image(sample.image))

    return FilterModel(kind="clip", scorer=scorer)


class IdentityClassifierFilter(BaseEstimator):
    """Multinomial logistic regression on projected pixels (the CCTF model).

    Weak regularization by default: confidence on separable source
    identities should approach 1, since the score thresholds against it.
    """

    def __init__(self, embed_dim=32, embed_seed=7, C=1000.0, max_iter=1000):
        self.embed_dim = embed_dim
        self.embed_seed = embed_seed
        self.C = C
        self.max_iter = max_iter

    def fit(self, X, y):
        X = list(X)
        y = np.asarray([str(v) for v in y])
        if len(np.unique(y)) < 2:
            raise InvalidArgument("identity classifier needs at least two identities")
        self.embedder_ = PixelProjectionEmbedder(
            np.asarray(X[0]).shape, dim=self.embed_dim, seed=self.embed_seed)
        feats = np.stack([self.embedder_.embed(im) for im in X])
        self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter).fit(feats, y)
        self.classes_ = self.clf_.classes_
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "clf_")
        feats = np.stack([self.embedder_.embed(im) for im in X])
        return self.clf_.predict_proba(feats)

    def confidence(self, image, identity: str) -> float:
        check_is_fitted(self, "clf_")
        identity = str(identity)
        if identity not in self.classes_:
            raise UnknownLabelError(f"identity {identity!r} unknown to the classifier")
        col = int(np.searchsorted(self.classes_, identity))
        return float(self.predict_proba([image])[0, col])


def train_id_classifier(images, labels, cfg: FilterTrainConfig = FilterTrainConfig(),
                        provenance=()) -> FilterModel:
    """Fit the CCTF scorer on labeled source images."""
    est = IdentityClassifierFilter(embed_dim=cfg.embed_dim, embed_seed=cfg.seed + 7)
    est.fit(images, labels)

    def scorer(sample: GeneratedSample) -> float:
        return est.confidence(sample.image, sample.identity)

    return FilterModel(kind="cctf", scorer=scorer, provenance=tuple(provenance), model=est)


def make_reid_scorer(gallery: EmbeddingGallery, embed_fn,
                     provenance=(), model=None) -> FilterModel:
    """Re-ID CTF scorer from a centroid gallery and an embedding function.

    embed_fn maps one image to an embedding; tests may inject embeddings
    directly through it.
    """

    def scorer(sample: GeneratedSample) -> float:
        if sample.identity not in gallery.centroids:
            raise UnknownLabelError(f"identity {sample.identity!r} has no gallery centroid")
        return cosine_confidence(embed_fn(sample.image), gallery.centroid(sample.identity))

    return FilterModel(kind="reid_ctf", scorer=scorer, provenance=tuple(provenance), model=model)


def train_reid_embedder(images, labels, cfg: FilterTrainConfig = FilterTrainConfig(),
                        provenance=()):
    """Fit the retrieval embedder and its source gallery.

    Returns (FilterModel of kind reid_ctf, EmbeddingGallery).
    """
    emb = ReidEmbedder(hidden_dim=cfg.hidden_dim, epochs=cfg.epochs,
                       learning_rate=cfg.learning_rate, seed=cfg.seed)
    emb.fit(images, [str(v) for v in labels])
    vectors = emb.transform(images)
    source = provenance[0] if provenance else ""
    gallery = build_gallery(vectors, [str(v) for v in labels], source=source)

    def embed_one(image):
        return emb.transform([image])[0]

    return make_reid_scorer(gallery, embed_one, provenance=tuple(provenance), model=emb), gallery


@dataclass(frozen=True)
class ScoreError:
    index: int
    sample_id: str
    message: str


@dataclass(frozen=True)
class ScoringResult:
    scored: list
    errors: list


def score_samples(model: FilterModel, samples: Sequence[GeneratedSample]) -> ScoringResult:
    """Annotate each sample with its confidence under model.kind.

    Per-sample failures are collected in .errors rather than aborting the
    batch; successfully scored samples keep their input order.
    """
    scored, errors = [], []
    for i, sample in enumerate(samples):
        try:
            value = float(model.scorer(sample))
            if not 0.0 <= value <= 1.0 or math.isnan(value):
                raise InvalidArgument(f"scorer produced {value!r}, outside [0, 1]")
        except Exception as exc:  # noqa: BLE001 - partial-failure contract
            errors.append(ScoreError(index=i, sample_id=sample.sample_id, message=str(exc)))
            continue
        scored.append(dataclasses.replace(
            sample, scores={**sample.scores, model.kind: value}))
    return ScoringResult(scored=scored, errors=errors)


@dataclass
class FilterReport:
    """Partition of scored samples at threshold tau."""

    threshold: float
    kept: list
    discarded: list
    filter_kind: str

    def __post_init__(self):
        for s in self.kept:
            if s.score_for(self.filter_kind) < self.threshold:
                raise InvalidArgument("kept sample scores below the threshold")
        for s in self.discarded:
            if s.score_for(self.filter_kind) >= self.threshold:
                raise InvalidArgument("discarded sample scores at or above the threshold")


def apply_threshold(scored: Sequence[GeneratedSample], tau: float,
                    kind: str | None = None) -> FilterReport:
    """Keep samples with score >= tau, discard the rest."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgument(f"tau must lie in [0, 1], got {tau}")
    if kind is None:
        kinds = {k for s in scored for k in s.scores}
        if len(kinds) != 1:
            raise InvalidArgument(
                f"cannot infer the filter kind from score keys {sorted(kinds)}; pass kind=")
        kind = kinds.pop()
    kept, discarded = [], []
    for s in scored:
        (kept if s.score_for(kind) >= tau else discarded).append(s)
    return FilterReport(threshold=tau, kept=kept, discarded=discarded, filter_kind=kind)


def calibrate_threshold(scores_on_held_out_real: Sequence[float],
                        target_keep_fraction: float) -> float:
    """Quantile threshold so real images pass at about the target rate.

    tau is the empirical (1 - target) quantile: the ceil(q * n)-th smallest
    held-out score, or the minimum when target is 1.
    """
    scores = sorted(float(v) for v in scores_on_held_out_real)
    if not scores:
        raise InvalidArgument("need at least one held-out score")
    if not 0.0 < target_keep_fraction <= 1.0:
        raise InvalidArgument("target_keep_fraction must lie in (0, 1]")
    q = 1.0 - target_keep_fraction
    k = math.ceil(q * len(scores))
    return scores[max(k - 1, 0)]


def write_embedding_records(path, records):
    """Injection format: one `sample_id TAB identity TAB v1 v2 ...` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, identity, vec in records:
            vals = " ".join(repr(float(v)) for v in np.asarray(vec).ravel())
            fh.write(f"{sample_id}\t{identity}\t{vals}\n")


def read_embedding_records(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InvalidArgument(f"{path}:{line_no}: expected 3 tab-separated fields")
            sample_id, identity, vals = parts
            records.append((sample_id, identity,
                            np.array([float(v) for v in vals.split()], dtype=np.float64)))
    return records

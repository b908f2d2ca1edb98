"""Backbone pre-training on an assembled manifest, plus the evaluation loop.

The backbone is deliberately small (average pooling, one tanh hidden
layer, identity-classification head) but the training protocol is the
full-scale one: AdamW, linear warmup into a cosine-decaying learning rate,
optional mixup/cutmix/random-erasing augmentation, and few-shot (Fs) /
small-scale-identity (Ss) subsampling of the fine-tuning data.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .embedders import cross_entropy, mlp_forward, mlp_grads, mlp_init
from .errors import InvalidArgument
from .images import load_png
from .manifest import DatasetManifest
from .metrics import RetrievalResult, evaluate_embeddings
from .seeding import derive_rng

KNOWN_AUGMENTATIONS = ("mixup", "cutmix", "random_erasing")


def warmup_cosine_lr(epoch: int, peak: float, warmup_epochs: int, total_epochs: int) -> float:
    """Closed-form learning rate for epoch index `epoch` (0-based).

    Linear ramp peak*(e+1)/warmup during warmup, then
    peak * 0.5 * (1 + cos(pi * (e - warmup) / (total - warmup))),
    which sits at peak right after warmup and reaches zero as e -> total.
    """
    if epoch < warmup_epochs:
        return peak * (epoch + 1) / warmup_epochs
    return peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup_epochs)
                                        / (total_epochs - warmup_epochs)))


@dataclass(frozen=True)
class PretrainConfig:
    """Training protocol knobs (full-scale semantics in parentheses).

    epochs (300), learning_rate 4e-3, weight_decay 0.05, warmup_epochs
    (20), batch_size (512). Toy defaults keep runs sub-second.
    """

    epochs: int = 10
    learning_rate: float = 4e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    hidden_dim: int = 64
    pool: int = 2
    augmentations: tuple = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidArgument("need 0 <= warmup_epochs < epochs")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise InvalidArgument("learning_rate and batch_size must be positive")
        if self.weight_decay < 0:
            raise InvalidArgument("weight_decay must be non-negative")
        unknown = [a for a in self.augmentations if a not in KNOWN_AUGMENTATIONS]
        if unknown:
            raise InvalidArgument(f"unknown augmentations: {unknown}")


def random_erasing(batch: np.ndarray, rng, p: float = 0.5,
                   area_range=(0.05, 0.2)) -> np.ndarray:
    """Blank a random rectangle per image with noise, with probability p."""
    out = batch.copy()
    n, _, h, w = out.shape
    for i in range(n):
        if rng.random() >= p:
            continue
        area = rng.uniform(*area_range) * h * w
        eh = max(1, min(h, int(round(math.sqrt(area * rng.uniform(0.5, 2.0))))))
        ew = max(1, min(w, int(round(area / eh))))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out[i, :, top:top + eh, left:left + ew] = rng.uniform(0, 1, (out.shape[1], eh, ew))
    return out


def mixup(batch: np.ndarray, targets: np.ndarray, rng, alpha: float = 0.2):
    """Convex combination of the batch with a permuted copy of itself."""
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(batch.shape[0])
    return (lam * batch + (1 - lam) * batch[perm],
            lam * targets + (1 - lam) * targets[perm])


def cutmix(batch: np.ndarray, targets: np.ndarray, rng, alpha: float = 1.0):
    """Paste a random rectangle from a permuted copy; targets mix by area."""
    lam = float(rng.beta(alpha, alpha))
    n, _, h, w = batch.shape
    cut = math.sqrt(1.0 - lam)
    ch, cw = max(1, int(h * cut)), max(1, int(w * cut))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    perm = rng.permutation(n)
    out = batch.copy()
    out[:, :, top:top + ch, left:left + cw] = batch[perm][:, :, top:top + ch, left:left + cw]
    lam_eff = 1.0 - (ch * cw) / (h * w)
    return out, lam_eff * targets + (1 - lam_eff) * targets[perm]


class ToyBackbone(TransformerMixin, BaseEstimator):
    """Pooled-pixel MLP classifier whose hidden layer is the Re-ID embedding."""

    def __init__(self, hidden_dim=64, pool=2, epochs=10, learning_rate=4e-3,
                 weight_decay=0.05, warmup_epochs=2, batch_size=64,
                 augmentations=(), seed=0):
        self.hidden_dim = hidden_dim
        self.pool = pool
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.augmentations = augmentations
        self.seed = seed

    @classmethod
    def from_config(cls, cfg: PretrainConfig) -> "ToyBackbone":
        return cls(hidden_dim=cfg.hidden_dim, pool=cfg.pool, epochs=cfg.epochs,
                   learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                   warmup_epochs=cfg.warmup_epochs, batch_size=cfg.batch_size,
                   augmentations=tuple(cfg.augmentations), seed=cfg.seed)

    def _features(self, batch: np.ndarray) -> np.ndarray:
        """Average-pool by self.pool and flatten, centered around 0."""
        p = self.pool
        n, c, h, w = batch.shape
        h2, w2 = (h // p) * p, (w // p) * p
        pooled = batch[:, :, :h2, :w2].reshape(n, c, h2 // p, p, w2 // p, p).mean(axis=(3, 5))
        return pooled.reshape(n, -1) - 0.5

    def _stack(self, X) -> np.ndarray:
        return np.stack([np.asarray(x, dtype=np.float64) for x in X])

    def fit(self, X, y):
        batch_all = self._stack(X)
        y = np.asarray([str(v) for v in y])
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InvalidArgument("pre-training needs at least two identities")
        onehot = np.eye(len(self.classes_))[y_idx]
        self.image_shape_ = batch_all.shape[1:]

        rng = np.random.default_rng(self.seed)
        d_in = self._features(batch_all[:1]).shape[1]
        params = mlp_init(rng, d_in, self.hidden_dim, len(self.classes_))
        self.params_ = params
        self._adam_state = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}
        self._adam_t = 0

        n = batch_all.shape[0]
        self.lr_trace_, self.loss_trace_ = [], []
        for epoch in range(self.epochs):
            lr = warmup_cosine_lr(epoch, self.learning_rate, self.warmup_epochs, self.epochs)
            self.lr_trace_.append(lr)
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                losses.append(self._train_batch(batch_all[idx], onehot[idx], lr, rng))
            self.loss_trace_.append(float(np.mean(losses)))
        probs = mlp_forward(self.params_, self._features(batch_all))[1]
        self.train_accuracy_ = float(np.mean(np.argmax(probs, axis=1) == y_idx))
        return self

    def _train_batch(self, batch, targets, lr, rng) -> float:
        if "random_erasing" in self.augmentations:
            batch = random_erasing(batch, rng)
        if "mixup" in self.augmentations:
            batch, targets = mixup(batch, targets, rng)
        if "cutmix" in self.augmentations:
            batch, targets = cutmix(batch, targets, rng)
        feats = self._features(batch)
        hidden, probs = mlp_forward(self.params_, feats)
        loss = cross_entropy(probs, targets)
        grads = mlp_grads(self.params_, feats, hidden, probs, targets)
        self._adam_t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, g in grads.items():
            m, v = self._adam_state[k]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._adam_state[k] = (m, v)
            m_hat = m / (1 - b1**self._adam_t)
            v_hat = v / (1 - b2**self._adam_t)
            step = m_hat / (np.sqrt(v_hat) + eps)
            if k in ("W1", "W2"):  # decoupled decay on weights only
                step = step + self.weight_decay * self.params_[k]
            self.params_[k] = self.params_[k] - lr * step
        return loss

    def transform(self, X) -> np.ndarray:
        """Unit-norm hidden activations."""
        check_is_fitted(self, "params_")
        hidden, _ = mlp_forward(self.params_, self._features(self._stack(X)))
        norms = np.maximum(np.linalg.norm(hidden, axis=1, keepdims=True), 1e-12)
        return hidden / norms

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return mlp_forward(self.params_, self._features(self._stack(X)))[1]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    # -- flat-vector persistence (same container as the diffusion engine) --

    def params_vector(self) -> np.ndarray:
        check_is_fitted(self, "params_")
        p = self.params_
        return np.concatenate([p["W1"].ravel(), p["b1"], p["W2"].ravel(), p["b2"]])

    def load_params_vector(self, vec, d_in, n_classes):
        vec = np.asarray(vec, dtype=np.float64)
        h = self.hidden_dim
        sizes = [d_in * h, h, h * n_classes, n_classes]
        if vec.size != sum(sizes):
            raise InvalidArgument(f"expected {sum(sizes)} parameters, got {vec.size}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        self.params_ = {
            "W1": parts[0].reshape(d_in, h), "b1": parts[1].copy(),
            "W2": parts[2].reshape(h, n_classes), "b2": parts[3].copy(),
        }


@dataclass
class PretrainCheckpoint:
    """Flat backbone parameters plus everything needed to rebuild them."""

    params: np.ndarray
    config: dict

    def save(self, path):
        save_checkpoint(path, self.params, self.config)

    @classmethod
    def load(cls, path) -> "PretrainCheckpoint":
        params, config = load_checkpoint(path)
        if config.get("kind") != "toy_backbone":
            raise InvalidArgument(f"{path}: checkpoint is not a toy_backbone")
        return cls(params=params, config=config)


def _manifest_images(manifest: DatasetManifest, image_root, records=None):
    records = manifest.records if records is None else records
    X = [load_png(Path(image_root) / r.path) for r in records]
    y = [r.identity for r in records]
    return X, y


def pretrain(manifest: DatasetManifest, cfg: PretrainConfig, image_root) -> PretrainCheckpoint:
    """Train the toy backbone to classify identities in the manifest.

    Uses the records tagged split=train (all records when none are). The
    returned checkpoint carries the architecture, the class list, and the
    loss / learning-rate traces.
    """
    train_recs = [r for r in manifest.records if r.split == "train"] or list(manifest.records)
    if len({r.identity for r in train_recs}) < 2:
        raise InvalidArgument("pre-training needs at least two identities")
    X, y = _manifest_images(manifest, image_root, train_recs)
    backbone = ToyBackbone.from_config(cfg)
    backbone.fit(X, y)
    d_in = backbone._features(backbone._stack(X[:1])).shape[1]
    config = {
        "kind": "toy_backbone",
        "hidden_dim": cfg.hidden_dim,
        "pool": cfg.pool,
        "d_in": d_in,
        "classes": [str(c) for c in backbone.classes_],
        "train": {
            "epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
            "weight_decay": cfg.weight_decay, "warmup_epochs": cfg.warmup_epochs,
            "batch_size": cfg.batch_size, "seed": cfg.seed,
            "augmentations": list(cfg.augmentations),
        },
        "loss_trace": backbone.loss_trace_,
        "lr_trace": backbone.lr_trace_,
        "final_loss": backbone.loss_trace_[-1],
        "train_accuracy": backbone.train_accuracy_,
    }
    return PretrainCheckpoint(params=backbone.params_vector(), config=config)


@dataclass(frozen=True)
class SubsetSpec:
    """Fs limits images per identity; Ss limits the identity count."""

    mode: str
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("Fs", "Ss"):
            raise InvalidArgument(f"mode must be Fs or Ss, got {self.mode!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise InvalidArgument("fraction must lie in (0, 1]")


def subsample(manifest: DatasetManifest, spec: SubsetSpec) -> DatasetManifest:
    """Fs: keep ceil(fraction * count) images per identity (seeded, min 1).
    Ss: keep floor(fraction * identities) whole identities (seeded, min 1).
    Record order is preserved, so fraction=1 returns an equal manifest.
    """
    if len(manifest) == 0:
        raise InvalidArgument("manifest is empty")
    if spec.mode == "Fs":
        keep = set()
        by_id = {}
        for pos, rec in enumerate(manifest.records):
            by_id.setdefault(rec.identity, []).append(pos)
        for identity, positions in by_id.items():
            k = max(1, math.ceil(spec.fraction * len(positions)))
            rng = derive_rng(spec.seed, "Fs", identity)
            chosen = rng.choice(len(positions), size=k, replace=False)
            keep.update(positions[i] for i in chosen)
        records = tuple(r for i, r in enumerate(manifest.records) if i in keep)
    else:
        identities = manifest.identities
        k = max(1, math.floor(spec.fraction * len(identities)))
        rng = derive_rng(spec.seed, "Ss")
        chosen = {identities[i] for i in rng.choice(len(identities), size=k, replace=False)}
        records = tuple(r for r in manifest.records if r.identity in chosen)
    return DatasetManifest(records=records, crop_size=manifest.crop_size,
                           version=manifest.version)


@dataclass(frozen=True)
class FinetuneEvalConfig:
    epochs: int = 1
    learning_rate: float = 1e-2
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgument("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise InvalidArgument("learning_rate and batch_size must be positive")


def _backbone_from_checkpoint(checkpoint, n_classes: int, seed: int,
                              d_in: int, hidden_dim: int, pool: int) -> ToyBackbone:
    """Trunk from the checkpoint (or random), always a fresh head."""
    backbone = ToyBackbone(hidden_dim=hidden_dim, pool=pool, seed=seed)
    rng = np.random.default_rng(seed)
    params = mlp_init(rng, d_in, hidden_dim, n_classes)
    if checkpoint is not None:
        donor = ToyBackbone(hidden_dim=hidden_dim, pool=pool)
        donor.load_params_vector(checkpoint.params, checkpoint.config["d_in"],
                                 len(checkpoint.config["classes"]))
        params["W1"] = donor.params_["W1"].copy()
        params["b1"] = donor.params_["b1"].copy()
    backbone.params_ = params
    backbone._adam_state = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}
    backbone._adam_t = 0
    backbone.image_shape_ = None
    return backbone


def finetune_eval(checkpoint, target_manifest: DatasetManifest,
                  ft_cfg: FinetuneEvalConfig, image_root):
    """Fine-tune on the target train split; evaluate retrieval per epoch.

    Returns (RetrievalResult, per-epoch mAP trace). With zero epochs the
    result is the direct evaluation of the (possibly random) initial
    trunk. The classification head is always re-initialized because the
    target identity set differs from pre-training.
    """
    splits = {}
    for rec in target_manifest.records:
        splits.setdefault(rec.split, []).append(rec)
    missing = [s for s in ("query", "gallery") if not splits.get(s)]
    if missing or (ft_cfg.epochs > 0 and not splits.get("train")):
        need = missing + (["train"] if ft_cfg.epochs > 0 and not splits.get("train") else [])
        raise InvalidArgument(f"target manifest is missing split tags: {sorted(set(need))}")

    train_recs = splits.get("train", [])
    X_train, y_train = _manifest_images(target_manifest, image_root, train_recs)
    X_query, y_query = _manifest_images(target_manifest, image_root, splits["query"])
    X_gallery, y_gallery = _manifest_images(target_manifest, image_root, splits["gallery"])
    q_cams = [r.camera for r in splits["query"]]
    g_cams = [r.camera for r in splits["gallery"]]
    if any(c is None for c in q_cams + g_cams):
        q_cams = g_cams = None

    classes = sorted(set(y_train)) if train_recs else ["_none_", "_none2_"]
    hidden_dim = checkpoint.config["hidden_dim"] if checkpoint else 64
    pool = checkpoint.config["pool"] if checkpoint else 2
    probe = ToyBackbone(hidden_dim=hidden_dim, pool=pool)
    d_in = (checkpoint.config["d_in"] if checkpoint
            else probe._features(probe._stack(X_query[:1])).shape[1])
    backbone = _backbone_from_checkpoint(checkpoint, len(classes), ft_cfg.seed,
                                         d_in, hidden_dim, pool)

    def evaluate() -> RetrievalResult:
        return evaluate_embeddings(backbone.transform(X_query), backbone.transform(X_gallery),
                                   y_query, y_gallery, q_cams, g_cams)

    if ft_cfg.epochs == 0:
        return evaluate(), []

    y_idx = np.array([classes.index(v) for v in y_train])
    onehot = np.eye(len(classes))[y_idx]
    batch_all = backbone._stack(X_train)
    rng = np.random.default_rng(ft_cfg.seed)
    trace = []
    result = None
    for _ in range(ft_cfg.epochs):
        order = rng.permutation(batch_all.shape[0])
        for start in range(0, batch_all.shape[0], ft_cfg.batch_size):
            idx = order[start:start + ft_cfg.batch_size]
            backbone._train_batch(batch_all[idx], onehot[idx], ft_cfg.learning_rate, rng)
        result = evaluate()
        trace.append(result.map_score)
    return result, trace


def append_run_ledger(path, run_id: str, config_hash: str, result: RetrievalResult):
    """One experiment per line: run id, config hash, mAP, rank-1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"{run_id}\t{config_hash}\t{result.map_score:.6f}\t{result.rank1:.6f}\n")

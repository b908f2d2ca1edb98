"""Attribute reference sets: base-model generations under the token-free prompt.

The prior term of the fine-tuning loss supervises against these images, so
they must be produced by the base (not yet fine-tuned) model and reused
unchanged across the whole fine-tune. The cache stores exact pixel data
with per-file checksums.
"""

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import sample
from .errors import IntegrityError, InvalidArgument, NotFoundError
from .prompts import PromptBundle, embed_prompt
from .schedules import NoiseSchedule

DEFAULT_REFERENCE_SIZE = 200
_META_NAME = "metadata.json"


@dataclass
class ReferenceSet:
    images: list
    prompt: str
    seeds: list
    source_model_id: str

    def __post_init__(self):
        if len(self.images) != len(self.seeds):
            raise InvalidArgument("images and seeds must have equal length")
        if not self.images:
            raise InvalidArgument("reference set must be non-empty")

    def __len__(self):
        return len(self.images)


def build_reference_set(base_model, bundle: PromptBundle, n: int = DEFAULT_REFERENCE_SIZE,
                        seed: int = 0, s: NoiseSchedule = None,
                        n_steps: int = 10) -> ReferenceSet:
    """Sample n images from the base model under bundle.lpe_prompt.

    Seeds are sequential from `seed`, so the set depends only on the
    token-free prompt and the seed, never on the IIR token.
    """
    if n < 1:
        raise InvalidArgument("reference set size must be >= 1")
    if s is None:
        raise InvalidArgument("a noise schedule is required")
    cond = embed_prompt(bundle.lpe_prompt, base_model.cond_dim)
    seeds = [seed + i for i in range(n)]
    images = [sample(base_model, cond, sd, n_steps, s) for sd in seeds]
    return ReferenceSet(images=images, prompt=bundle.lpe_prompt, seeds=seeds,
                        source_model_id=base_model.model_id)


def _set_id(ref: ReferenceSet) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([ref.prompt, ref.seeds, ref.source_model_id]).encode())
    for img in ref.images:
        h.update(np.ascontiguousarray(img, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def cache_reference_set(ref: ReferenceSet, store_path) -> str:
    """Persist a set under a content-addressed id; returns the id.

    A set already present under its id is left untouched (same content by
    construction), which also serializes concurrent writers per id.
    """
    set_id = _set_id(ref)
    final = Path(store_path) / set_id
    if (final / _META_NAME).exists():
        return set_id
    tmp = final.with_name(final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    checksums = {}
    for i, img in enumerate(ref.images):
        name = f"{i:05d}.npy"
        arr = np.asarray(img, dtype=np.float64)
        np.save(tmp / name, arr, allow_pickle=False)
        checksums[name] = hashlib.sha256((tmp / name).read_bytes()).hexdigest()
    meta = {
        "version": 1,
        "prompt": ref.prompt,
        "seeds": list(ref.seeds),
        "source_model_id": ref.source_model_id,
        "checksums": checksums,
    }
    (tmp / _META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    tmp.replace(final)
    return set_id


def load_reference_set(store_path, set_id: str) -> ReferenceSet:
    """Load a cached set, verifying every file against its checksum."""
    root = Path(store_path) / set_id
    meta_path = root / _META_NAME
    if not meta_path.exists():
        raise NotFoundError(f"reference set {set_id!r} not found under {store_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    images = []
    for name, expected in sorted(meta["checksums"].items()):
        path = root / name
        if not path.exists():
            raise IntegrityError(f"{path}: image file missing")
        if hashlib.sha256(path.read_bytes()).hexdigest() != expected:
            raise IntegrityError(f"{path}: checksum mismatch")
        images.append(np.load(path, allow_pickle=False))
    return ReferenceSet(images=images, prompt=meta["prompt"], seeds=list(meta["seeds"]),
                        source_model_id=meta["source_model_id"])

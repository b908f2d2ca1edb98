"""Synthetic sprite identities for desk-scale runs.

Each identity is a person-ish blob (head + body in identity-specific
colors on a shaded background); instances jitter in position, brightness
and pixel noise. Identities are easy to separate yet instances vary enough
to exercise captioning, filtering and retrieval end to end.
"""

from pathlib import Path

import numpy as np

from .images import save_png
from .manifest import DatasetManifest, ManifestRecord, write_manifest
from .seeding import derive_rng


def sprite_identity_params(rng) -> dict:
    return {
        "body_color": rng.uniform(0.2, 1.0, size=3),
        "head_color": rng.uniform(0.2, 1.0, size=3),
        "background": float(rng.uniform(0.05, 0.35)),
        "build": int(rng.integers(3, 6)),  # body half-width in pixels
    }


def render_sprite(params: dict, rng, image_shape=(3, 32, 16)) -> np.ndarray:
    c, h, w = image_shape
    img = np.full((c, h, w), params["background"])
    img += rng.normal(0.0, 0.02, size=img.shape)
    dx = int(rng.integers(-2, 3))
    dy = int(rng.integers(-1, 2))
    cx = w // 2 + dx
    half = params["build"]
    body_top, body_bot = h * 3 // 8 + dy, h * 7 // 8 + dy
    head_top, head_bot = h // 8 + dy, h * 3 // 8 + dy
    brightness = float(rng.uniform(0.85, 1.15))
    body = np.clip(np.asarray(params["body_color"]) * brightness, 0, 1)
    head = np.clip(np.asarray(params["head_color"]) * brightness, 0, 1)
    left, right = max(0, cx - half), min(w, cx + half)
    img[:, body_top:body_bot, left:right] = body[:, None, None]
    hw = max(1, half - 1)
    img[:, head_top:head_bot, max(0, cx - hw):min(w, cx + hw)] = head[:, None, None]
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_sprite_dataset(out_dir, n_identities: int = 3, images_per_identity: int = 8,
                            seed: int = 0, image_shape=(3, 32, 16),
                            source: str = "toy", n_query: int = 1,
                            n_gallery: int = 1) -> Path:
    """Write sprite PNGs plus a source manifest; returns the manifest path.

    Per identity the last n_query + n_gallery images become the query
    (camera c0) and gallery (camera c1) splits; the rest are train,
    alternating cameras.
    """
    out_dir = Path(out_dir)
    if images_per_identity < n_query + n_gallery + 1:
        raise ValueError("need at least one train image per identity")
    records = []
    n_train = images_per_identity - n_query - n_gallery
    for i in range(n_identities):
        identity = f"id{i:03d}"
        params = sprite_identity_params(derive_rng(seed, "sprite-identity", identity))
        for k in range(images_per_identity):
            rng = derive_rng(seed, "sprite-image", identity, k)
            img = render_sprite(params, rng, image_shape)
            rel = f"{source}/{identity}/{k:03d}.png"
            save_png(img, out_dir / rel)
            if k < n_train:
                split, camera = "train", f"c{k % 2}"
            elif k < n_train + n_query:
                split, camera = "query", "c0"
            else:
                split, camera = "gallery", "c1"
            records.append(ManifestRecord(path=rel, identity=identity, source=source,
                                          camera=camera, filter_kind="none",
                                          score=1.0, split=split))
    manifest = DatasetManifest(records=tuple(records),
                               crop_size=(image_shape[1], image_shape[2]))
    path = out_dir / f"{source}_manifest.tsv"
    write_manifest(manifest, path)
    return path

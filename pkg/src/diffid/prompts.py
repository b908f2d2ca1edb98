"""Caption-based prompt construction with a rare identity token.

An identity's image sequence is captioned (stub or external adapter), a
rare token absent from the text vocabulary is allocated for the identity,
and both the token-bearing prompt and the token-free prompt are assembled
from one template. Prompt text is turned into the toy engine's condition
vector by a deterministic hash embedding.
"""

import hashlib
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import BackendError, IirExhaustedError, InvalidArgument

IDENTITY_SLOT = "{identity}"
CAPTION_SLOT = "{caption}"
DEFAULT_TEMPLATE = "a photo of {identity}, {caption}"

# Words the stub captioner can emit, per attribute slot. Per-image slot
# values are picked by quantizing an image statistic into these lists.
SLOT_WORDS = {
    "clothing": (
        "wearing dark clothes",
        "wearing gray clothes",
        "wearing colorful clothes",
        "wearing bright clothes",
    ),
    "carried": ("empty-handed", "carrying a bag", "carrying a backpack"),
    "action": ("standing", "walking", "riding a bike"),
    "scene": ("in a corridor", "on a street", "at a crossing"),
}
DEFAULT_ATTRIBUTE_FOCUS = ("clothing", "carried", "action", "scene")

# Small stand-in for a text encoder's known-token list; rare-token
# allocation must avoid these plus any tokens already in use.
DEFAULT_VOCABULARY = frozenset(
    """a an the of and or person man woman people photo image picture red
    green blue gray black white dark bright walking standing riding bag
    backpack street corridor crossing camera view shirt coat jacket pants
    shoes hat with in on at by for to is are was has carrying wearing
    empty handed bike city day night light shadow background""".split()
)


@dataclass(frozen=True)
class PromptBundle:
    """Caption plus the token-bearing and token-free prompts.

    enhanced_prompt carries iir_token exactly once; lpe_prompt is the same
    text with the bare category word in the identity slot.
    """

    caption: str
    iir_token: str
    enhanced_prompt: str
    lpe_prompt: str

    def __post_init__(self):
        if not self.iir_token:
            raise InvalidArgument("iir_token must be non-empty")
        if self.enhanced_prompt.count(self.iir_token) != 1:
            raise InvalidArgument("enhanced_prompt must contain the IIR token exactly once")
        if self.iir_token in self.lpe_prompt:
            raise InvalidArgument("lpe_prompt must not contain the IIR token")
        if self.enhanced_prompt.replace(f"{self.iir_token} ", "", 1) != self.lpe_prompt:
            raise InvalidArgument("removing the IIR slot must yield lpe_prompt exactly")


@dataclass(frozen=True)
class CaptionerHandle:
    """Named captioner with the attribute slots it is steered toward."""

    name: str = "stub"
    attribute_focus: tuple = DEFAULT_ATTRIBUTE_FOCUS

    def __post_init__(self):
        if not self.name:
            raise InvalidArgument("captioner name must be non-empty")
        unknown = [s for s in self.attribute_focus if s not in SLOT_WORDS]
        if unknown:
            raise InvalidArgument(f"unknown attribute slots: {unknown}")


# External captioner adapters register here by name; the adapter maps a
# list of images to one UTF-8 caption.
CAPTIONER_ADAPTERS: dict[str, Callable] = {}


def register_captioner(name: str, fn: Callable):
    CAPTIONER_ADAPTERS[name] = fn


def _slot_statistic(image: np.ndarray, slot: str) -> float:
    img = np.asarray(image, dtype=np.float64)
    flat = img.reshape(img.shape[0], -1) if img.ndim == 3 else img.reshape(1, -1)
    h = img.shape[-2]
    if slot == "clothing":
        return float(np.mean(img[..., : h // 2 or 1, :]))
    if slot == "carried":
        return min(float(np.std(flat)) * 4.0, 0.999999)
    if slot == "action":
        dx = np.abs(np.diff(img, axis=-1))
        return min(float(np.mean(dx)) * 8.0, 0.999999)
    if slot == "scene":
        return float(np.mean(img[..., 3 * h // 4:, :]))
    raise InvalidArgument(f"unknown slot {slot!r}")


def stub_slots_for_image(image: np.ndarray, slots: Sequence[str] = DEFAULT_ATTRIBUTE_FOCUS) -> dict:
    """Per-slot word the stub captioner reads off one image's statistics."""
    out = {}
    for slot in slots:
        words = SLOT_WORDS[slot]
        stat = min(max(_slot_statistic(image, slot), 0.0), 0.999999)
        out[slot] = words[int(stat * len(words))]
    return out


def caption_sequence(images: Sequence[np.ndarray], captioner: CaptionerHandle) -> str:
    """One caption for an image sequence.

    The stub captioner fills each attribute slot by majority vote over the
    per-image slot words (ties break toward the lowest word index);
    external adapters pass through the backend's text.
    """
    images = list(images)
    if not images:
        raise InvalidArgument("caption_sequence needs at least one image")
    if captioner.name == "stub":
        per_image = [stub_slots_for_image(img, captioner.attribute_focus) for img in images]
        parts = []
        for slot in captioner.attribute_focus:
            votes = Counter(d[slot] for d in per_image)
            top = max(votes.values())
            order = SLOT_WORDS[slot]
            parts.append(min((w for w, c in votes.items() if c == top), key=order.index))
        return ", ".join(parts)
    fn = CAPTIONER_ADAPTERS.get(captioner.name)
    if fn is None:
        raise BackendError(f"captioner backend {captioner.name!r} is not registered")
    try:
        return str(fn(images))
    except Exception as exc:  # noqa: BLE001 - adapter faults become backend errors
        raise BackendError(f"captioner backend {captioner.name!r} failed: {exc}") from exc


def allocate_iir(vocabulary, candidates: Sequence[str], seed: int = 0) -> str:
    """First candidate (after a seeded shuffle) absent from vocabulary."""
    candidates = list(candidates)
    if not candidates:
        raise InvalidArgument("candidate list must be non-empty")
    vocab = set(vocabulary)
    rng = np.random.default_rng(seed)
    for idx in rng.permutation(len(candidates)):
        token = candidates[idx]
        if token not in vocab:
            return token
    raise IirExhaustedError("every candidate token is already in the vocabulary")


@lru_cache(maxsize=None)
def default_iir_candidates(n: int = 10000) -> tuple:
    """Fixed list of pronounceable 3-4 letter rare strings (CVC then CVCV)."""
    consonants = "bcdfghjklmnpqrstvwxz"
    vowels = "aeiou"
    out = []
    for c1 in consonants:
        for v1 in vowels:
            for c2 in consonants:
                out.append(c1 + v1 + c2)
    for c1 in consonants:
        for v1 in vowels:
            for c2 in consonants:
                for v2 in vowels:
                    out.append(c1 + v1 + c2 + v2)
                    if len(out) >= n:
                        return tuple(out[:n])
    return tuple(out[:n])


def load_iir_candidates(path) -> tuple:
    """Candidate tokens from a text file, one per line, blanks skipped."""
    with open(path, encoding="utf-8") as fh:
        tokens = tuple(line.strip() for line in fh if line.strip())
    if not tokens:
        raise InvalidArgument(f"{path}: no candidate tokens")
    return tokens


def build_prompts(caption: str, iir: str, template: str = DEFAULT_TEMPLATE) -> PromptBundle:
    """Fill the template's identity and caption slots both ways.

    The identity slot becomes "<iir> person" in the enhanced prompt and
    plain "person" in the token-free prompt.
    """
    if not iir or " " in iir:
        raise InvalidArgument(f"IIR token must be a non-empty single token, got {iir!r}")
    if template.count(IDENTITY_SLOT) != 1 or template.count(CAPTION_SLOT) != 1:
        raise InvalidArgument(
            "template must contain exactly one identity slot and one caption slot"
        )
    if iir in template or iir in caption:
        raise InvalidArgument("IIR token already occurs in the template or caption")
    enhanced = template.replace(IDENTITY_SLOT, f"{iir} person").replace(CAPTION_SLOT, caption)
    lpe = template.replace(IDENTITY_SLOT, "person").replace(CAPTION_SLOT, caption)
    return PromptBundle(caption=caption, iir_token=iir, enhanced_prompt=enhanced, lpe_prompt=lpe)


def embed_prompt(text: str, dim: int = 16) -> np.ndarray:
    """Deterministic unit-norm hash embedding of a prompt.

    Stands in for a text encoder: distinct prompts map to distinct
    directions, so adding or removing the IIR token changes the condition.
    """
    if dim < 1:
        raise InvalidArgument("embedding dim must be positive")
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)

"""The unit of work flowing from the sampler into filtering and assembly."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


@dataclass(eq=False)
class GeneratedSample:
    """A synthesized image plus the identity and provenance that made it."""

    image: np.ndarray
    identity: str
    prompt: str = ""
    seed: int = 0
    source: str = "synth"
    camera: str | None = None
    sample_id: str = ""
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.identity:
            raise InvalidArgument("identity label must be non-empty")
        if not self.sample_id:
            self.sample_id = f"{self.identity}-{self.seed:08d}"

    def score_for(self, kind: str) -> float:
        if kind not in self.scores:
            raise InvalidArgument(f"sample {self.sample_id} has no {kind!r} score")
        return self.scores[kind]

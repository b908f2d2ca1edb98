"""Generation-backend adapter seam.

Any full-scale engine can stand in for the toy one by implementing two
calls: fine_tune(images, prompts, config) -> opaque handle, and
sample(handle, prompt, seed, n) -> list of images. The toy backend
implements the same contract on the built-in denoiser, so the pipeline is
exercised through the exact seam an external adapter would use.
"""

from typing import Protocol, Sequence, runtime_checkable

from .denoiser import ToyDenoiser
from .diffusion import FineTuneConfig, LossConfig, fine_tune, sample
from .errors import BackendError
from .prompts import PromptBundle, embed_prompt
from .reference import build_reference_set
from .schedules import NoiseSchedule, make_schedule


@runtime_checkable
class GenerationBackend(Protocol):
    def fine_tune(self, images: Sequence, prompts: PromptBundle, config: dict) -> object: ...

    def sample(self, handle, prompt: str, seed: int, n: int) -> list: ...


BACKENDS: dict = {}


def register_backend(name: str, factory):
    BACKENDS[name] = factory


def get_backend(name: str, **kwargs) -> GenerationBackend:
    if name == "toy":
        return ToyDiffusionBackend(**kwargs)
    factory = BACKENDS.get(name)
    if factory is None:
        raise BackendError(f"generation backend {name!r} is not registered")
    return factory(**kwargs)


class ToyDiffusionBackend:
    """The built-in engine behind the adapter contract.

    config keys understood by fine_tune: steps, learning_rate, batch_size,
    seed, prior_lambda, reference_set (a prebuilt ReferenceSet),
    reference_set_size and reference_seed (to build one when absent),
    sample_steps.
    """

    def __init__(self, image_shape=(3, 32, 16), cond_dim=16, schedule: NoiseSchedule = None,
                 base_seed: int = 0, sample_steps: int = 10):
        self.schedule = schedule if schedule is not None else make_schedule(50, "cosine")
        self.base_model = ToyDenoiser(image_shape, cond_dim, seed=base_seed)
        self.sample_steps = sample_steps

    def fine_tune(self, images, prompts: PromptBundle, config: dict):
        config = dict(config or {})
        lam = float(config.get("prior_lambda", 1.0))
        ref = config.get("reference_set")
        if ref is None and lam > 0:
            ref = build_reference_set(
                self.base_model, prompts,
                n=int(config.get("reference_set_size", 200)),
                seed=int(config.get("reference_seed", 0)),
                s=self.schedule,
                n_steps=int(config.get("sample_steps", self.sample_steps)))
        cfg = FineTuneConfig(
            steps=int(config.get("steps", 1000)),
            learning_rate=float(config.get("learning_rate", 5.0)),
            seed=int(config.get("seed", 0)),
            batch_size=int(config.get("batch_size", 4)))
        model = self.base_model.copy()
        model, _ = fine_tune(model, images, prompts, ref, cfg, LossConfig(lambda_=lam),
                             self.schedule)
        return model

    def sample(self, handle, prompt: str, seed: int, n: int) -> list:
        cond = embed_prompt(prompt, handle.cond_dim)
        return [sample(handle, cond, seed + i, self.sample_steps, self.schedule)
                for i in range(n)]

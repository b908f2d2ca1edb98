"""Fine-grain prior-preservation training and seeded sampling.

The training objective has two pixelwise reconstruction terms: one on the
identity's own images under the token-bearing condition, and one on
reference images generated by the base model under the token-free
condition, weighted by lambda. Each term is

    w_t * mean_pixels( (x_hat(alpha_t x + sigma_t eps, c) - x)^2 )

averaged over its batch, so the scale is independent of image resolution.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .denoiser import Denoiser
from .errors import InvalidArgument
from .prompts import PromptBundle, embed_prompt
from .schedules import NoiseSchedule, add_noise


@dataclass(frozen=True)
class LossConfig:
    """Prior weight lambda and optional per-timestep weights.

    weight_t / weight_t_prime are length-T arrays (index t-1) or None for
    unit weights everywhere.
    """

    lambda_: float = 1.0
    weight_t: np.ndarray | None = None
    weight_t_prime: np.ndarray | None = None

    def __post_init__(self):
        if self.lambda_ < 0:
            raise InvalidArgument("lambda must be non-negative")
        for name in ("weight_t", "weight_t_prime"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if np.any(w < 0):
                    raise InvalidArgument(f"{name} must be non-negative")
                object.__setattr__(self, name, w)

    @staticmethod
    def _weight(w, t: int) -> float:
        if w is None:
            return 1.0
        if not 1 <= t <= len(w):
            raise InvalidArgument(f"no weight for timestep {t}")
        return float(w[t - 1])

    def recon_weight(self, t: int) -> float:
        return self._weight(self.weight_t, t)

    def prior_weight(self, t: int) -> float:
        return self._weight(self.weight_t_prime, t)


@dataclass(frozen=True)
class FineTuneConfig:
    """Gradient-descent settings for per-identity fine-tuning.

    The full-scale recipe uses learning rate 2e-6 over 1000 steps; the toy
    engine keeps the step count but needs a far larger rate because its
    loss is mean-reduced over very few pixels.
    """

    steps: int = 1000
    learning_rate: float = 5.0
    seed: int = 0
    batch_size: int = 4

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")


def _term(model, items, weight_of, s, grad_out=None, scale=1.0):
    """Mean weighted pixel-MSE over (x, cond, t, eps) items.

    With grad_out given, accumulates scale * d(term)/d(params) into it.
    """
    total = 0.0
    n = len(items)
    for x, cond, t, eps in items:
        x = np.asarray(x, dtype=np.float64)
        z = add_noise(x, np.asarray(eps, dtype=np.float64), t, s)
        residual = model.predict(z, t, cond) - x
        w = weight_of(t)
        total += w * float(np.mean(residual**2))
        if grad_out is not None and w != 0.0:
            cot = (2.0 * w * scale / (residual.size * n)) * residual
            grad_out += model.vjp(z, t, cond, cot)
    return total / n


def _check_batches(batch, ref_batch, cfg):
    if not batch:
        raise InvalidArgument("batch must be non-empty")
    if cfg.lambda_ > 0 and not ref_batch:
        raise InvalidArgument("ref_batch must be non-empty when lambda > 0")


def prior_preservation_loss(model: Denoiser, batch, ref_batch, cfg: LossConfig,
                            s: NoiseSchedule) -> float:
    """Reconstruction term plus lambda times the prior term.

    batch items are (image, condition, timestep, noise); ref_batch items
    are the same but built from reference images and the token-free
    condition.
    """
    _check_batches(batch, ref_batch, cfg)
    loss = _term(model, batch, cfg.recon_weight, s)
    if ref_batch:
        loss += cfg.lambda_ * _term(model, ref_batch, cfg.prior_weight, s)
    return loss


def prior_preservation_grad(model: Denoiser, batch, ref_batch, cfg: LossConfig,
                            s: NoiseSchedule):
    """(loss, flat parameter gradient) for the same objective."""
    _check_batches(batch, ref_batch, cfg)
    grad = np.zeros(model.params_vector.size)
    loss = _term(model, batch, cfg.recon_weight, s, grad_out=grad)
    if ref_batch and cfg.lambda_ > 0:
        loss += cfg.lambda_ * _term(model, ref_batch, cfg.prior_weight, s,
                                    grad_out=grad, scale=cfg.lambda_)
    return loss, grad


def fine_tune(model, id_images: Sequence[np.ndarray], prompts: PromptBundle,
              ref_set, cfg: FineTuneConfig, loss_cfg: LossConfig,
              s: NoiseSchedule):
    """Run cfg.steps SGD steps of the prior-preservation objective.

    Mutates and returns the model together with the per-step loss trace.
    Timesteps for the two terms are drawn uniformly and independently.
    ref_set needs .images and .prompt (the token-free prompt it was
    generated with) and may be None when loss_cfg.lambda_ == 0.
    """
    id_images = [np.asarray(im, dtype=np.float64) for im in id_images]
    if not id_images:
        raise InvalidArgument("id_images must be non-empty")
    ref_images = [np.asarray(im, dtype=np.float64) for im in ref_set.images] if ref_set else []
    if loss_cfg.lambda_ > 0 and not ref_images:
        raise InvalidArgument("reference set must be non-empty when lambda > 0")

    cond = embed_prompt(prompts.enhanced_prompt, model.cond_dim)
    ref_cond = embed_prompt(ref_set.prompt, model.cond_dim) if ref_images else None
    rng = np.random.default_rng(cfg.seed)
    use_prior = loss_cfg.lambda_ > 0

    trace = []
    for _ in range(cfg.steps):
        batch = []
        for idx in rng.integers(0, len(id_images), cfg.batch_size):
            t = int(rng.integers(1, s.T + 1))
            eps = rng.standard_normal(model.image_shape)
            batch.append((id_images[idx], cond, t, eps))
        ref_batch = []
        if use_prior:
            for idx in rng.integers(0, len(ref_images), cfg.batch_size):
                t = int(rng.integers(1, s.T + 1))
                eps = rng.standard_normal(model.image_shape)
                ref_batch.append((ref_images[idx], ref_cond, t, eps))
        loss, grad = prior_preservation_grad(model, batch, ref_batch, loss_cfg, s)
        model.load_params_vector(model.params_vector - cfg.learning_rate * grad)
        trace.append(loss)
    return model, trace


def sample(model, prompt_embedding: np.ndarray, seed: int, n_steps: int,
           s: NoiseSchedule) -> np.ndarray:
    """Deterministic ancestral sampling from seeded Gaussian noise.

    Walks n_steps timesteps from T down to 1. At each step the model's
    clean-image prediction is clipped to the model's pixel range, the
    implied noise (z - alpha_t x_hat) / sigma_t is extracted, and both are
    recombined at the next timestep's coefficients.
    """
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    cond = np.asarray(prompt_embedding, dtype=np.float64)
    lo, hi = model.clip_range
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(model.image_shape)

    ts = np.linspace(s.T, 1, n_steps).round().astype(int)
    x_hat = None
    for i, t in enumerate(ts):
        t = int(t)
        x_hat = np.clip(model.predict(z, t, cond), lo, hi)
        sigma_t = s.sigma(t)
        eps_hat = (z - s.alpha(t) * x_hat) / sigma_t if sigma_t > 0 else np.zeros_like(z)
        if i + 1 < len(ts):
            t_next = int(ts[i + 1])
            z = s.alpha(t_next) * x_hat + s.sigma(t_next) * eps_hat
    return x_hat

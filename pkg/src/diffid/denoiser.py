"""Toy conditional denoiser predicting the clean image from a noised one.

The model is affine in the flattened pixels and the condition vector:

    x_hat(z, c) = gain * z + mix @ c + bias        (elementwise gain)

Deliberately tiny: gradients of any pixelwise loss are available in closed
form through :meth:`vjp`, which is what the fine-tuning loop and the
finite-difference gradient checks rely on. Timestep is accepted for
interface parity with real backbones and ignored.
"""

import hashlib
import math
from typing import Protocol, runtime_checkable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidArgument


@runtime_checkable
class Denoiser(Protocol):
    """What the loss and sampler need from any denoiser implementation."""

    image_shape: tuple
    cond_dim: int
    clip_range: tuple

    def predict(self, z: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray: ...

    def vjp(self, z: np.ndarray, t: int, cond: np.ndarray, cotangent: np.ndarray) -> np.ndarray: ...


class ToyDenoiser:
    def __init__(self, image_shape=(3, 32, 16), cond_dim: int = 16, seed: int = 0,
                 clip_range=(0.0, 1.0)):
        if any(d < 1 for d in image_shape) or cond_dim < 1:
            raise InvalidArgument("image_shape and cond_dim must be positive")
        self.image_shape = tuple(int(d) for d in image_shape)
        self.cond_dim = int(cond_dim)
        self.clip_range = (float(clip_range[0]), float(clip_range[1]))
        d = math.prod(self.image_shape)
        rng = np.random.default_rng(seed)
        # Base-model init: pass some noise through, sit mid-range, react
        # weakly to the condition. Fine-tuning moves mix/bias toward the
        # conditioned identity's appearance.
        self.gain = np.full(d, 0.5)
        self.mix = rng.normal(0.0, 0.01, size=(d, self.cond_dim))
        self.bias = np.full(d, 0.25)

    @property
    def n_pixels(self) -> int:
        return math.prod(self.image_shape)

    @property
    def n_params(self) -> int:
        return self.n_pixels * (2 + self.cond_dim)

    @property
    def params_vector(self) -> np.ndarray:
        """Flat copy of all parameters: [gain, mix (row-major), bias]."""
        return np.concatenate([self.gain, self.mix.ravel(), self.bias])

    def load_params_vector(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.n_params:
            raise InvalidArgument(f"expected {self.n_params} parameters, got {vec.size}")
        d = self.n_pixels
        self.gain = vec[:d].copy()
        self.mix = vec[d:d + d * self.cond_dim].reshape(d, self.cond_dim).copy()
        self.bias = vec[d + d * self.cond_dim:].copy()

    @property
    def model_id(self) -> str:
        """Content hash identifying this exact parameter state."""
        h = hashlib.sha256()
        h.update(repr((self.image_shape, self.cond_dim)).encode())
        h.update(self.params_vector.astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def _check_inputs(self, z, cond):
        if z.shape != self.image_shape:
            raise InvalidArgument(f"image shape {z.shape} != {self.image_shape}")
        if cond.shape != (self.cond_dim,):
            raise InvalidArgument(f"condition shape {cond.shape} != ({self.cond_dim},)")

    def predict(self, z: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        self._check_inputs(z, cond)
        flat = self.gain * z.ravel() + self.mix @ cond + self.bias
        return flat.reshape(self.image_shape)

    def vjp(self, z: np.ndarray, t: int, cond: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Flat parameter gradient of sum(cotangent * predict(z, t, cond))."""
        z = np.asarray(z, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        self._check_inputs(z, cond)
        cot = np.asarray(cotangent, dtype=np.float64).ravel()
        g_gain = cot * z.ravel()
        g_mix = np.outer(cot, cond)
        g_bias = cot
        return np.concatenate([g_gain, g_mix.ravel(), g_bias])

    def copy(self) -> "ToyDenoiser":
        dup = ToyDenoiser(self.image_shape, self.cond_dim, seed=0, clip_range=self.clip_range)
        dup.load_params_vector(self.params_vector)
        return dup

    def save(self, path):
        save_checkpoint(path, self.params_vector, {
            "kind": "toy_denoiser",
            "image_shape": list(self.image_shape),
            "cond_dim": self.cond_dim,
            "clip_range": list(self.clip_range),
        })

    @classmethod
    def load(cls, path) -> "ToyDenoiser":
        params, config = load_checkpoint(path)
        if config.get("kind") != "toy_denoiser":
            raise InvalidArgument(f"{path}: checkpoint is not a toy_denoiser")
        model = cls(tuple(config["image_shape"]), config["cond_dim"],
                    clip_range=tuple(config["clip_range"]))
        model.load_params_vector(params)
        return model

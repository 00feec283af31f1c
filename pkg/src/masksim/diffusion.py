"""Linear-beta noise schedule shared by training and sampling."""

import numpy as np
import torch

N_TRAIN = 1000
N_TEST = 100
BETA_START = 1e-4
BETA_END = 2e-2


class DiffusionSchedule:
    """Precomputed float64 coefficients of a linear-beta schedule."""

    def __init__(self, n_train=N_TRAIN, beta_start=BETA_START,
                 beta_end=BETA_END):
        if n_train < 1:
            raise ValueError("n_train must be positive")
        self.n_train = n_train
        self.betas = np.linspace(beta_start, beta_end, n_train,
                                 dtype=np.float64)
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def q_sample(self, x0, t, eps):
        """Noise x0 to step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
        ab = torch.as_tensor(self.alpha_bar, device=x0.device)[t].to(x0.dtype)
        while ab.ndim < x0.ndim:
            ab = ab.unsqueeze(-1)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps

    def ddim_timesteps(self, n_steps):
        """n_steps evenly spread train steps, always ending at the last
        (noisiest) step so sampling can start from pure noise."""
        if not 1 <= n_steps <= self.n_train:
            raise ValueError(f"n_steps must be in [1, {self.n_train}]")
        if n_steps == 1:
            return np.array([self.n_train - 1], dtype=np.int64)
        ts = np.linspace(0, self.n_train - 1, n_steps)
        return np.round(ts).astype(np.int64)

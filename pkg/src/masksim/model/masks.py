"""Mask patterns: which observation positions and action chunks are hidden."""

from dataclasses import dataclass

import torch


@dataclass
class MaskPattern:
    """Batched visibility pattern over a context window.

    obs_mask: (B, T, P) bool, True where a trunk position is masked.
    act_mask: (B, T) bool, True where a frame's action chunk is masked.
    Loss flags say which streams the pattern supervises; supervised tokens
    are exactly the masked ones of each enabled stream.
    """
    obs_mask: torch.Tensor
    act_mask: torch.Tensor
    loss_on_obs: bool = True
    loss_on_acts: bool = False

    def __post_init__(self):
        if self.obs_mask.dtype != torch.bool or self.act_mask.dtype != torch.bool:
            raise ValueError("masks must be boolean tensors")
        if self.obs_mask.ndim != 3 or self.act_mask.ndim != 2:
            raise ValueError("obs_mask must be (B,T,P) and act_mask (B,T)")
        if self.obs_mask.shape[:2] != self.act_mask.shape:
            raise ValueError("obs_mask and act_mask disagree on batch/time")

    @property
    def batch(self):
        return self.obs_mask.shape[0]

    @property
    def frames(self):
        return self.obs_mask.shape[1]

    def to(self, device):
        return MaskPattern(self.obs_mask.to(device), self.act_mask.to(device),
                           self.loss_on_obs, self.loss_on_acts)


def visible_pattern(batch, frames, positions):
    """Everything visible, nothing supervised."""
    return MaskPattern(
        obs_mask=torch.zeros(batch, frames, positions, dtype=torch.bool),
        act_mask=torch.zeros(batch, frames, dtype=torch.bool),
        loss_on_obs=False, loss_on_acts=False)


def decode_step_pattern(batch, frames, positions, unmasked_last=None):
    """Rollout pattern: past frames and chunks visible, the newest frame's
    positions masked (minus any already-unmasked set) and its chunk masked."""
    p = visible_pattern(batch, frames, positions)
    p.obs_mask[:, -1, :] = True
    if unmasked_last is not None:
        p.obs_mask[:, -1, :] = ~unmasked_last
    p.act_mask[:, -1] = True
    return p

"""Frame-by-frame generation: iterative unmasking for discrete tokens,
DDIM for soft latents and action chunks, sliding-window rollout.

The decode loop mirrors training's aligned layout: the provider's action is
written onto the newest fully-decoded frame, then a masked slot is appended
and unmasked over a fixed number of trunk passes. Temporal attention carries
the action forward one frame, so the new slot is conditioned on it.
"""

import functools
import math

import numpy as np
import torch

from . import tokenizer as tk
from .diffusion import N_TEST, DiffusionSchedule
from .model import MaskPattern

# clip for predicted action chunks, in normalized units
ACTION_CLIP = 4.0


def unmask_counts(positions, m_passes):
    """Sizes of the pre-committed unmasking subsets under the cosine
    schedule; cumulative rounding makes them partition `positions` exactly."""
    if m_passes < 1:
        raise ValueError("m_passes must be >= 1")
    cum = [round(positions * (1.0 - math.cos(math.pi / 2 * i / m_passes)))
           for i in range(m_passes + 1)]
    return [b - a for a, b in zip(cum, cum[1:])]


@functools.lru_cache(maxsize=None)
def _cell_tables(patch):
    """Row/col token coordinates (P, patch^2) for each trunk position, in the
    same within-group order the heads emit."""
    side = tk.TOKEN_GRID // patch
    pos = torch.arange(side * side)
    k = torch.arange(patch * patch)
    rows = (pos // side * patch)[:, None] + (k // patch)[None]
    cols = (pos % side * patch)[:, None] + (k % patch)[None]
    return rows, cols


class SequenceState:
    """Rolling decode window for one generation session.

    Holds up to `context_frames` frames of observations (token grids or soft
    latents), their raw action chunks and known/unknown flags, plus the RNG
    all sampling in the session draws from. Single-owner, mutable.
    """

    def __init__(self, model, domain_id, seed=0):
        self.cfg = model.cfg
        self.domain_id = int(domain_id)
        self.chunk_dim = self.cfg.chunk_dim(self.domain_id)
        self.soft = self.cfg.objective == "soft"
        self.obs = []
        self.obs_known = []
        self.chunks = []
        self.chunk_known = []
        self.steps = 0
        self.generator = torch.Generator().manual_seed(int(seed))

    @classmethod
    def from_prompt(cls, model, domain_id, prompt_obs, prompt_chunks=None,
                    seed=0):
        """prompt_obs: (n, 16, 16) token grids or (n, 16, 16, 48) latents.
        prompt_chunks, if given, are the actions taken at the first len()
        prompt frames; the newest frame's chunk is set later by the caller."""
        state = cls(model, domain_id, seed)
        n = len(prompt_obs)
        if prompt_chunks is not None and len(prompt_chunks) > n:
            raise ValueError("more prompt chunks than prompt frames")
        for i in range(n):
            chunk = None
            if prompt_chunks is not None and i < len(prompt_chunks):
                chunk = prompt_chunks[i]
            state.append_frame(prompt_obs[i], chunk)
        return state

    @property
    def n_frames(self):
        return len(self.obs)

    def append_frame(self, obs=None, chunk=None):
        """Add a frame; obs=None appends a masked slot to be decoded. Evicts
        the oldest frame once the window exceeds the model context."""
        if obs is None:
            g = tk.TOKEN_GRID
            shape = (g, g, tk.PATCH_DIM) if self.soft else (g, g)
            dtype = torch.float32 if self.soft else torch.int64
            self.obs.append(torch.zeros(shape, dtype=dtype))
            self.obs_known.append(False)
        else:
            t = torch.as_tensor(np.asarray(obs))
            self.obs.append(t.float() if self.soft else t.long())
            self.obs_known.append(True)
        self.chunks.append(torch.zeros(self.chunk_dim))
        self.chunk_known.append(False)
        if chunk is not None:
            self.set_chunk(chunk)
        while len(self.obs) > self.cfg.context_frames:
            for lst in (self.obs, self.obs_known, self.chunks,
                        self.chunk_known):
                lst.pop(0)

    def set_chunk(self, chunk, index=-1):
        """Record the raw action chunk taken at a frame (newest by default)."""
        c = torch.as_tensor(np.asarray(chunk, dtype=np.float32)).reshape(-1)
        if c.numel() != self.chunk_dim:
            raise ValueError(
                f"chunk has {c.numel()} values, domain needs {self.chunk_dim}")
        self.chunks[index] = c
        self.chunk_known[index] = True

    def window(self):
        """Batched (obs, chunks) tensors over the current window."""
        return torch.stack(self.obs)[None], torch.stack(self.chunks)[None]

    def pattern(self, newest_obs_mask=None):
        """Visibility derived from the known/unknown flags; the newest
        frame's position mask can be overridden mid-decode."""
        w = self.n_frames
        obs_mask = torch.tensor([not k for k in self.obs_known])
        obs_mask = obs_mask[None, :, None].expand(1, w, self.cfg.positions)
        obs_mask = obs_mask.clone()
        if newest_obs_mask is not None:
            obs_mask[0, -1] = newest_obs_mask
        act_mask = torch.tensor([not k for k in self.chunk_known])[None]
        return MaskPattern(obs_mask, act_mask)

    def write_positions(self, positions, values):
        """Write decoded tokens (n, 4) or latents (n, 4, 48) into the newest
        frame's grid at the given trunk positions."""
        rows, cols = _cell_tables(self.cfg.trunk_patch)
        self.obs[-1][rows[positions], cols[positions]] = values

    def mark_decoded(self):
        self.obs_known[-1] = True
        self.steps += 1


def _sample_tokens(logits, temperature, greedy, generator):
    if greedy:
        return logits.argmax(dim=-1)
    if temperature <= 0:
        raise ValueError("temperature must be positive (or pass greedy=True)")
    probs = torch.softmax(logits / temperature, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    draws = torch.multinomial(flat, 1, generator=generator)
    return draws.reshape(logits.shape[:-1])


def maskgit_decode_frame(model, state, action_chunk, m_passes=2,
                         temperature=1.0, greedy=False):
    """Decode the next frame as tokens in exactly `m_passes` trunk passes.

    The position order is committed up front from the state RNG; pass i
    samples its subset with everything committed so far visible. Returns the
    (16, 16) token grid and advances the state.
    """
    if state.n_frames < 1:
        raise ValueError("cannot decode from an empty context")
    if model.cfg.objective != "discrete":
        raise ValueError("token decode needs a discrete-objective model")
    state.set_chunk(action_chunk)
    state.append_frame()
    p = model.cfg.positions
    perm = torch.randperm(p, generator=state.generator)
    still_masked = torch.ones(p, dtype=torch.bool)
    start = 0
    for n in unmask_counts(p, m_passes):
        subset = perm[start:start + n]
        start += n
        obs, chunks = state.window()
        pattern = state.pattern(newest_obs_mask=still_masked)
        with torch.no_grad():
            z = model.features(obs, chunks, pattern, state.domain_id)
            if n > 0:
                logits = model.video_logits(z)[0, -1, subset]
                toks = _sample_tokens(logits, temperature, greedy,
                                      state.generator)
                state.write_positions(subset, toks)
        still_masked[subset] = False
    state.mark_decoded()
    return state.obs[-1].clone()


def ddim_chain(eps_fn, shape, schedule, n_test, generator, lo, hi):
    """Deterministic (eta = 0) DDIM from pure noise over the strided test
    steps. The predicted clean value is clipped to [lo, hi] every step and
    the noise direction re-derived from it. eps_fn(x_t, t_int) -> eps."""
    ts = schedule.ddim_timesteps(n_test)
    ab = schedule.alpha_bar
    x = torch.randn(*shape, generator=generator)
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        a_t = float(ab[t])
        eps = eps_fn(x, t)
        x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        x0 = x0.clamp(lo, hi)
        if i == 0:
            x = x0
        else:
            a_prev = float(ab[int(ts[i - 1])])
            eps_adj = (x - math.sqrt(a_t) * x0) / math.sqrt(1.0 - a_t)
            x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps_adj
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite value in DDIM chain at step {t}")
    return x


def diffusion_decode_frame(model, state, action_chunk, schedule=None,
                           n_test=N_TEST, m_passes=2):
    """Soft-token decode: the same pre-committed subsets and trunk-pass count
    as token decode, but each subset is committed by running the DDIM chain
    through the lightweight noise head alone. Trunk cost is m_passes
    regardless of n_test. Returns the (16, 16, 48) latent grid."""
    if state.n_frames < 1:
        raise ValueError("cannot decode from an empty context")
    if model.cfg.objective != "soft":
        raise ValueError("latent decode needs a soft-objective model")
    if schedule is None:
        schedule = DiffusionSchedule()
    state.set_chunk(action_chunk)
    state.append_frame()
    p = model.cfg.positions
    perm = torch.randperm(p, generator=state.generator)
    still_masked = torch.ones(p, dtype=torch.bool)
    start = 0
    for n in unmask_counts(p, m_passes):
        subset = perm[start:start + n]
        start += n
        obs, chunks = state.window()
        pattern = state.pattern(newest_obs_mask=still_masked)
        with torch.no_grad():
            z = model.features(obs, chunks, pattern, state.domain_id)
            if n > 0:
                zf = model.obs_features(z)[:, -1:, subset]

                def eps_fn(x_t, t, zf=zf):
                    tt = torch.full((1,), t, dtype=torch.long)
                    return model.video_eps(zf, x_t, tt)

                lat = ddim_chain(
                    eps_fn,
                    (1, 1, n, model.cfg.tokens_per_position, tk.PATCH_DIM),
                    schedule, n_test, state.generator, 0.0, 1.0)
                state.write_positions(subset, lat[0, 0])
        still_masked[subset] = False
    state.mark_decoded()
    return state.obs[-1].clone()


def decode_frame(model, state, action_chunk, *, m_passes=2, temperature=1.0,
                 greedy=False, n_test=N_TEST, schedule=None):
    """Objective-dispatching decode of one frame."""
    if model.cfg.objective == "discrete":
        return maskgit_decode_frame(model, state, action_chunk,
                                    m_passes=m_passes,
                                    temperature=temperature, greedy=greedy)
    return diffusion_decode_frame(model, state, action_chunk,
                                  schedule=schedule, n_test=n_test,
                                  m_passes=m_passes)


def encode_prompt(model, codebook, frames):
    """(n, 64, 64, 3) uint8 frames -> stacked tokens or latents matching the
    model's objective."""
    frames = np.asarray(frames)
    if model.cfg.objective == "discrete":
        return np.stack([tk.encode(codebook, f) for f in frames])
    return np.stack([tk.encode_soft(f) for f in frames])


def rollout(model, codebook, prompt_frames, actions, domain_id, *,
            prompt_chunks=None, seed=0, m_passes=2, temperature=1.0,
            greedy=False, n_test=N_TEST, n_steps=None):
    """Generate one frame of pixels per action chunk.

    prompt_frames: (n, 64, 64, 3) uint8 context; actions: iterable of raw
    action chunks; n_steps, if given, caps the rollout and makes running out
    of actions early an error. Returns (T, 64, 64, 3) uint8.
    """
    if model.cfg.objective == "discrete" and model.cfg.vocab != codebook.size:
        raise ValueError("model vocab and codebook size disagree")
    enc = encode_prompt(model, codebook, prompt_frames)
    state = SequenceState.from_prompt(model, domain_id, enc, prompt_chunks,
                                      seed=seed)
    schedule = DiffusionSchedule() if model.cfg.objective == "soft" else None
    frames = []
    for a in actions:
        out = decode_frame(model, state, a, m_passes=m_passes,
                           temperature=temperature, greedy=greedy,
                           n_test=n_test, schedule=schedule)
        if model.cfg.objective == "discrete":
            frames.append(tk.decode(codebook, out.numpy()))
        else:
            frames.append(tk.decode_soft(out.numpy()))
        if n_steps is not None and len(frames) == n_steps:
            break
    if n_steps is not None and len(frames) < n_steps:
        raise ValueError(
            f"action provider ran out after {len(frames)} of {n_steps} steps")
    if not frames:
        raise ValueError("rollout produced no frames (no actions given)")
    return np.stack(frames)


def predict_actions(model, state, n_steps=1, schedule=None, n_test=N_TEST):
    """Read the model's own action chunks off the newest frame, one frame at
    a time; each predicted chunk is committed and a fully-masked slot appended
    so the next step sees the same pattern training's policy mode used.

    Returns (n_steps, chunk_dim) raw chunks and advances the state.
    """
    if state.n_frames < 1:
        raise ValueError("cannot predict actions from an empty context")
    dom = model.domain(state.domain_id)
    if model.cfg.objective == "soft" and schedule is None:
        schedule = DiffusionSchedule()
    out = []
    for k in range(n_steps):
        obs, chunks = state.window()
        pattern = state.pattern()
        with torch.no_grad():
            z = model.features(obs, chunks, pattern, state.domain_id)
            if model.cfg.objective == "discrete":
                norm = model.action_readout(z, state.domain_id)[0, -1]
            else:
                z_last = z[:, -1:]

                def eps_fn(x_t, t, z_last=z_last):
                    tt = torch.full((1,), t, dtype=torch.long)
                    return model.action_readout(z_last, state.domain_id,
                                                x_t=x_t, t=tt)

                norm = ddim_chain(eps_fn, (1, 1, state.chunk_dim), schedule,
                                  n_test, state.generator,
                                  -ACTION_CLIP, ACTION_CLIP)[0, 0]
        raw = norm * dom.act_std + dom.act_mean
        out.append(raw)
        state.set_chunk(raw)
        if k + 1 < n_steps:
            state.append_frame()
    return torch.stack(out)


def inverse_dynamics(model, obs, domain_id, seed=0, schedule=None,
                     n_test=N_TEST):
    """Infer the action chunk taken at every frame of a fully observed
    window. Needs bidirectional temporal attention, since the chunk at frame
    t is evidenced by frame t+1. Returns (W, chunk_dim) raw chunks."""
    if model.cfg.temporal_causal:
        raise ValueError("inverse dynamics needs a non-causal model")
    soft = model.cfg.objective == "soft"
    obs_t = torch.as_tensor(np.asarray(obs))
    obs_t = obs_t.float() if soft else obs_t.long()
    w = obs_t.shape[0]
    if not 1 <= w <= model.cfg.context_frames:
        raise ValueError(f"window of {w} frames outside model context")
    dom = model.domain(domain_id)
    cd = model.cfg.chunk_dim(domain_id)
    pattern = MaskPattern(
        torch.zeros(1, w, model.cfg.positions, dtype=torch.bool),
        torch.ones(1, w, dtype=torch.bool))
    chunks = torch.zeros(1, w, cd)
    with torch.no_grad():
        z = model.features(obs_t[None], chunks, pattern, domain_id)
        if not soft:
            norm = model.action_readout(z, domain_id)[0]
        else:
            if schedule is None:
                schedule = DiffusionSchedule()

            def eps_fn(x_t, t):
                tt = torch.full((1,), t, dtype=torch.long)
                return model.action_readout(z, domain_id, x_t=x_t, t=tt)

            gen = torch.Generator().manual_seed(int(seed))
            norm = ddim_chain(eps_fn, (1, w, cd), schedule, n_test, gen,
                              -ACTION_CLIP, ACTION_CLIP)[0]
    return norm * dom.act_std + dom.act_mean

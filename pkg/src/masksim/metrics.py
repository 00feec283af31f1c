"""Evaluation metrics: pixel fidelity (PSNR, SSIM), token perplexity, action
sensitivity probes against the exact oracles, and Pearson correlation.

Sensitivity conventions: the action-swap gap rolls the model out once under
the episode's true actions and K times under uniformly random ones, sharing
prompt and decode seed, and differences last-frame PSNR. The starred metrics
perturb the true actions with bounded Gaussian noise, re-render the ground
truth through the oracle from the episode seed, and score the model against
that re-render; sigma = 0 reduces them to the plain metrics exactly.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import tokenizer as tk
from .envs import make_env, rollout_oracle
from .model import config_hash, group_positions
from .sampling import rollout
from .training import (TrainBatch, loss_vq, prepare_domain, sample_pattern,
                       stack_patterns)

C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
PSNR_CAP = 99.0


def psnr(a, b):
    """10 log10(255^2 / MSE) between same-shape uint8 images, capped at 99."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP))


def _ssim_plane(x, y, window):
    xt = torch.from_numpy(np.ascontiguousarray(x))[None, None]
    yt = torch.from_numpy(np.ascontiguousarray(y))[None, None]

    def pool(z):
        return F.avg_pool2d(z, window, stride=1)

    mx, my = pool(xt), pool(yt)
    vx = pool(xt * xt) - mx * mx
    vy = pool(yt * yt) - my * my
    cxy = pool(xt * yt) - mx * my
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) \
        / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(s.mean())


def ssim(a, b, window=8):
    """Uniform-window SSIM, averaged over channels and window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    return float(np.mean([_ssim_plane(a[..., c], b[..., c], window)
                          for c in range(a.shape[-1])]))


def pearson(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("inputs must be equal-length 1-d sequences")
    if x.size < 2:
        raise ValueError("need at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    vx, vy = float((xc * xc).sum()), float((yc * yc).sum())
    if vx == 0.0 or vy == 0.0:
        raise ValueError("degenerate variance")
    return float(np.clip((xc * yc).sum() / math.sqrt(vx * vy), -1.0, 1.0))


def episode_2hz(spec, episode):
    """Native-rate episode -> (frames at 2 Hz, action chunks)."""
    frames = episode.frames[::spec.stride]
    steps = (len(episode.frames) - 1) // spec.stride
    chunks = episode.actions.reshape(steps, spec.chunk_dim).astype(np.float32)
    return frames, chunks


def _context_windows(model, data, n_windows, seed):
    rng = np.random.default_rng(seed)
    starts = [(e, s) for e in range(data.n_episodes)
              for s in range(data.n_starts(model.cfg.context_frames))]
    if not starts:
        raise ValueError("validation set has no full context windows")
    if n_windows is not None and len(starts) > n_windows:
        sel = rng.choice(len(starts), size=n_windows, replace=False)
        starts = [starts[i] for i in sel]
    return starts, rng


def _window_batch(model, data, group, rng, mode):
    cfg = model.cfg
    w = cfg.context_frames
    obs = torch.from_numpy(np.stack(
        [data.tokens[e, s:s + w] for e, s in group]).astype(np.int64))
    chunks = torch.from_numpy(np.stack(
        [data.chunks[e, s:s + w] for e, s in group]))
    pattern = stack_patterns(
        [sample_pattern(mode, 0.0, rng, w, cfg.prompt_frames,
                        cfg.positions) for _ in group])
    return TrainBatch(data.spec.id, obs, chunks, pattern)


def perplexity(model, data, n_windows=32, seed=0, batch=8, mode="forward"):
    """exp(mean CE) over supervised tokens under the deterministic u = 0 draw
    of the given masking mode (the newest frame is always fully masked).
    "forward" shows every action chunk and "passive" hides them all, with the
    same masked video positions either way, so the two scores differ only in
    what conditioning was available. `data` is a prepared DomainData; windows
    are subsampled when there are more than n_windows (None = use all)."""
    if model.cfg.objective != "discrete":
        raise ValueError("perplexity needs a discrete-objective model")
    if mode not in ("forward", "passive", "full"):
        raise ValueError(f"mode {mode!r} supervises no video tokens")
    cfg = model.cfg
    starts, rng = _context_windows(model, data, n_windows, seed)
    total_ce, total_n = 0.0, 0
    for i in range(0, len(starts), batch):
        tb = _window_batch(model, data, starts[i:i + batch], rng, mode)
        with torch.no_grad():
            _, parts = loss_vq(tb, model)
        n = int(tb.pattern.obs_mask.sum()) * cfg.tokens_per_position
        total_ce += parts["ce"] * n
        total_n += n
    return float(math.exp(total_ce / total_n))


def token_accuracy(model, data, n_windows=32, seed=0, batch=8,
                   last_frame_only=False):
    """Fraction of masked video tokens recovered exactly by argmax under the
    deterministic forward pattern. Near 1/vocab at initialization; climbing
    toward 1.0 on the training set is the standard memorization probe.
    last_frame_only scores just the newest frame, which the u = 0 draw masks
    completely, so it reads as next-frame prediction accuracy."""
    if model.cfg.objective != "discrete":
        raise ValueError("token accuracy needs a discrete-objective model")
    starts, rng = _context_windows(model, data, n_windows, seed)
    hits, total = 0, 0
    for i in range(0, len(starts), batch):
        tb = _window_batch(model, data, starts[i:i + batch], rng, "forward")
        with torch.no_grad():
            z = model.features(tb.obs, tb.chunks, tb.pattern, tb.domain_id)
            pred = model.video_logits(z).argmax(dim=-1)
        targets = group_positions(tb.obs, model.cfg.trunk_patch)
        mask = tb.pattern.obs_mask
        if last_frame_only:
            mask = mask.clone()
            mask[:, :-1] = False
        match = (pred == targets)[mask]
        hits += int(match.sum())
        total += int(match.numel())
    return hits / total


def random_chunks(spec, n_steps, rng):
    """Chunked action sequence drawn uniformly within the domain bounds."""
    lo = np.array([b[0] for b in spec.action_bounds])
    hi = np.array([b[1] for b in spec.action_bounds])
    native = rng.uniform(lo, hi, size=(n_steps * spec.stride, spec.action_dim))
    return native.astype(np.float32).reshape(n_steps, spec.chunk_dim)


def _episode_rollout(model, codebook, spec, frames, chunks, seed, greedy,
                     prompt):
    n_steps = len(frames) - prompt
    return rollout(model, codebook, frames[:prompt],
                   chunks[prompt - 1:prompt - 1 + n_steps], spec.id,
                   prompt_chunks=chunks[:prompt - 1], seed=seed,
                   greedy=greedy)


def rollout_fidelity(model, codebook, spec, episode, seed=0, greedy=True):
    """Mean per-frame PSNR and SSIM of a rollout under the true actions."""
    frames, chunks = episode_2hz(spec, episode)
    prompt = model.cfg.prompt_frames
    if len(frames) <= model.cfg.context_frames:
        raise ValueError("episode shorter than the model context")
    pred = _episode_rollout(model, codebook, spec, frames, chunks, seed,
                            greedy, prompt)
    truth = frames[prompt:]
    return (float(np.mean([psnr(p, g) for p, g in zip(pred, truth)])),
            float(np.mean([ssim(p, g) for p, g in zip(pred, truth)])))


def delta_psnr(model, codebook, spec, episode, k=5, seed=0, greedy=True,
               with_curves=False):
    """Last-frame PSNR under the true actions minus the mean over k rollouts
    with uniformly random actions; prompt and decode seed are shared, so an
    action-indifferent model scores exactly zero."""
    if k < 1:
        raise ValueError("k must be at least 1")
    frames, chunks = episode_2hz(spec, episode)
    prompt = model.cfg.prompt_frames
    if len(frames) <= model.cfg.context_frames:
        raise ValueError("episode shorter than the model context")
    n_steps = len(frames) - prompt
    rng = np.random.default_rng(seed)
    truth = frames[prompt:]

    def per_frame(pred):
        return [psnr(p, g) for p, g in zip(pred, truth)]

    true_curve = per_frame(_episode_rollout(
        model, codebook, spec, frames, chunks, seed, greedy, prompt))
    rand_curves = []
    for _ in range(k):
        acts = np.concatenate(
            [chunks[:prompt - 1], random_chunks(spec, n_steps, rng)])
        rand_curves.append(per_frame(_episode_rollout(
            model, codebook, spec, frames, acts, seed, greedy, prompt)))
    value = true_curve[-1] - float(np.mean([c[-1] for c in rand_curves]))
    if with_curves:
        return value, {"true": true_curve, "random": rand_curves}
    return value


def perturb_actions(spec, actions, sigma_scale, rng):
    """Gaussian noise with sigma = sigma_scale * per-dimension range, clamped
    back into the action bounds."""
    a = np.asarray(actions, dtype=np.float64)
    lo = np.array([b[0] for b in spec.action_bounds])
    hi = np.array([b[1] for b in spec.action_bounds])
    noisy = a + rng.normal(0.0, 1.0, a.shape) * (sigma_scale * (hi - lo))
    return np.clip(noisy, lo, hi)


def star_metrics(model, codebook, spec, episode, sigma_scale=0.1, seed=0,
                 n_windows=8, greedy=True):
    """PSNR (and perplexity for discrete models) of the model against ground
    truth re-rendered by the oracle under perturbed actions. Returns a dict
    with keys "psnr" and "perplexity" (None for soft models)."""
    rng = np.random.default_rng(seed)
    noisy = perturb_actions(spec, episode.actions, sigma_scale, rng)
    frames = rollout_oracle(make_env(spec.id, episode.seed), noisy)
    f2 = frames[::spec.stride]
    chunks = noisy.reshape(-1, spec.chunk_dim).astype(np.float32)
    prompt = model.cfg.prompt_frames
    if len(f2) <= model.cfg.context_frames:
        raise ValueError("episode shorter than the model context")
    pred = _episode_rollout(model, codebook, spec, f2, chunks, seed, greedy,
                            prompt)
    ps = float(np.mean([psnr(p, g) for p, g in zip(pred, f2[prompt:])]))
    px = None
    if model.cfg.objective == "discrete":
        toks = np.stack([tk.encode(codebook, f) for f in f2]).astype(np.int16)
        data = _SingleEpisode(spec, toks[None], chunks[None])
        px = perplexity(model, data, n_windows=n_windows, seed=seed)
    return {"psnr": ps, "perplexity": px}


# tiny stand-in with DomainData's window interface, for one re-rendered episode
class _SingleEpisode:
    def __init__(self, spec, tokens, chunks):
        self.spec = spec
        self.tokens = tokens
        self.chunks = chunks
        self.n_episodes = tokens.shape[0]

    def n_starts(self, context_frames=12):
        return max(0, self.tokens.shape[1] - context_frames)


def curves_to_text(curves):
    """Per-frame PSNR curves as plot-ready columns (frame, true, rand_i...)."""
    cols = ["frame", "true"] + [f"rand{i}" for i in range(len(curves["random"]))]
    lines = [",".join(cols)]
    for i, v in enumerate(curves["true"]):
        row = [str(i), f"{v:.6f}"] + [f"{c[i]:.6f}" for c in curves["random"]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    """Per-dataset and averaged evaluation results for one checkpoint."""
    datasets: dict
    averaged: dict
    counts: dict
    config_hash: str

    FIELDS = ("psnr", "ssim", "perplexity", "delta_psnr", "psnr_star",
              "perplexity_star")

    def to_json(self):
        return json.dumps(
            {"datasets": self.datasets, "averaged": self.averaged,
             "counts": self.counts, "config_hash": self.config_hash},
            indent=2, sort_keys=True)

    def summary_table(self):
        lines = ["dataset," + ",".join(self.FIELDS) + ",episodes"]
        rows = [*sorted(self.datasets), "mean"]
        for name in rows:
            vals = self.averaged if name == "mean" else self.datasets[name]
            cells = [name]
            for f in self.FIELDS:
                v = vals.get(f)
                cells.append("" if v is None else f"{v:.4f}")
            cells.append(str(sum(self.counts.values()) if name == "mean"
                             else self.counts[name]))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate(model, codebook, datasets, n_episodes=4, k_random=5,
             sigma_scale=0.1, n_windows=32, seed=0):
    """Full report over {name: (spec, episodes)} validation datasets."""
    per, counts = {}, {}
    discrete = model.cfg.objective == "discrete"
    for name in sorted(datasets):
        spec, episodes = datasets[name]
        eps = episodes[:n_episodes]
        if not eps:
            raise ValueError(f"dataset {name} has no episodes")
        row = {f: [] for f in MetricsReport.FIELDS}
        for ep in eps:
            ps, ss = rollout_fidelity(model, codebook, spec, ep, seed=seed)
            row["psnr"].append(ps)
            row["ssim"].append(ss)
            row["delta_psnr"].append(
                delta_psnr(model, codebook, spec, ep, k=k_random, seed=seed))
            star = star_metrics(model, codebook, spec, ep,
                                sigma_scale=sigma_scale, seed=seed)
            row["psnr_star"].append(star["psnr"])
            if star["perplexity"] is not None:
                row["perplexity_star"].append(star["perplexity"])
        if discrete:
            data = prepare_domain(spec, eps, codebook)
            row["perplexity"].append(
                perplexity(model, data, n_windows=n_windows, seed=seed))
        per[name] = {f: (float(np.mean(v)) if v else None)
                     for f, v in row.items()}
        counts[name] = len(eps)
    averaged = {}
    for f in MetricsReport.FIELDS:
        vals = [per[n][f] for n in per if per[n][f] is not None]
        averaged[f] = float(np.mean(vals)) if vals else None
    return MetricsReport(per, averaged, counts, config_hash(model.cfg))

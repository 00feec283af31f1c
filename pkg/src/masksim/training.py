"""Masking schedules, the two loss objectives, dataset mixing and the
optimization loop."""

import csv
import dataclasses
import math
from pathlib import Path

import numpy as np
import torch

from . import tokenizer as tk
from .diffusion import DiffusionSchedule
from .envs import load_dataset
from .model import MaskPattern, group_positions, save_checkpoint

MODES = ("forward", "passive", "full", "policy")
R_MIN = 0.15


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    iterations: int = 1000
    lr: float = 3e-4
    warmup: int = 100
    lr_floor: float = 0.1
    r_min: float = R_MIN
    mode_probs: tuple = (("forward", 0.25), ("passive", 0.25),
                         ("full", 0.25), ("policy", 0.25))
    seed: int = 0
    n_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    grad_clip: float = 1.0
    domain_lr_scale: float = 1.0
    log_every: int = 25
    val_every: int = 200
    val_batches: int = 2
    checkpoint_every: int = 0

    def __post_init__(self):
        probs = self.mode_probs
        if isinstance(probs, dict):
            probs = tuple(sorted(probs.items()))
        else:
            probs = tuple(sorted((str(k), float(v)) for k, v in probs))
        object.__setattr__(self, "mode_probs", probs)
        for name, p in probs:
            if name not in MODES:
                raise ValueError(f"unknown mode {name!r}")
            if p < 0:
                raise ValueError(f"negative probability for {name}")
        if abs(sum(p for _, p in probs) - 1.0) > 1e-6:
            raise ValueError("mode probabilities must sum to 1")
        if not 0.0 < self.r_min <= 1.0:
            raise ValueError("r_min must be in (0, 1]")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.domain_lr_scale <= 0:
            raise ValueError("domain_lr_scale must be positive")

    def to_flat_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "mode_probs":
                for name, p in v:
                    lines.append(f"mode_{name} = {p}")
            else:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat_text(cls, text):
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kw, probs = {}, {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key.startswith("mode_"):
                probs[key[len("mode_"):]] = float(raw)
            elif key in fields:
                typ = fields[key]
                kw[key] = int(raw) if typ == "int" or typ is int else float(raw)
            else:
                raise ValueError(f"unknown config key {key!r}")
        if probs:
            kw["mode_probs"] = probs
        return cls(**kw)


@dataclasses.dataclass
class TrainBatch:
    """One optimizer step's worth of data; a single domain per batch."""
    domain_id: int
    obs: torch.Tensor
    chunks: torch.Tensor
    pattern: MaskPattern
    t_obs: torch.Tensor = None
    eps_obs: torch.Tensor = None
    t_act: torch.Tensor = None
    eps_act: torch.Tensor = None


def mask_ratio(t, u, r_min=R_MIN, n_future=8):
    """Fraction of a future frame's positions to mask: cosine in the sample
    draw u, growing with the frame's distance t into the future."""
    if not 1 <= t <= n_future:
        raise ValueError(f"frame index {t} outside 1..{n_future}")
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must be in [0, 1]")
    return max(r_min, math.cos(math.pi * u / 2.0) * math.sqrt(t / n_future))


def sample_pattern(mode, u, rng, frames=12, prompt=4, positions=64,
                   r_min=R_MIN):
    """Single-sample MaskPattern realizing one prediction mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    obs = torch.zeros(1, frames, positions, dtype=torch.bool)
    act = torch.zeros(1, frames, dtype=torch.bool)
    n_future = frames - prompt
    for t in range(1, n_future + 1):
        if mode == "policy":
            n = positions
        else:
            n = round(positions * mask_ratio(t, u, r_min, n_future))
        idx = rng.permutation(positions)[:n]
        obs[0, prompt + t - 1, torch.from_numpy(idx)] = True
    if mode == "passive":
        act[:] = True
    elif mode in ("full", "policy"):
        act[0, prompt:] = True
    return MaskPattern(obs, act, loss_on_obs=mode != "policy",
                       loss_on_acts=mode in ("full", "policy"))


def stack_patterns(patterns):
    flags = {(p.loss_on_obs, p.loss_on_acts) for p in patterns}
    if len(flags) != 1:
        raise ValueError("cannot stack patterns with different loss flags")
    return MaskPattern(torch.cat([p.obs_mask for p in patterns]),
                       torch.cat([p.act_mask for p in patterns]),
                       *flags.pop())


def mix_sampler(dataset_sizes):
    """Sampling probabilities p_i proportional to 1 - exp(-n_i / mean(n))."""
    sizes = np.asarray(list(dataset_sizes), dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("no datasets to mix")
    if np.any(sizes < 1):
        raise ValueError("dataset sizes must be >= 1")
    w = 1.0 - np.exp(-sizes / sizes.mean())
    return w / w.sum()


def loss_vq(batch, model):
    """Cross-entropy on masked tokens plus MSE on supervised action chunks,
    weighted 1:1. Accumulates in float64."""
    pattern = batch.pattern
    z = model.features(batch.obs, batch.chunks, pattern, batch.domain_id)
    parts = {"ce": 0.0, "mse": 0.0}
    terms = []
    if pattern.loss_on_obs and pattern.obs_mask.any():
        logits = model.video_logits(z).to(torch.float64)
        targets = group_positions(batch.obs, model.cfg.trunk_patch)
        logp = torch.log_softmax(logits, dim=-1)
        tok_lp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        ce = -tok_lp[pattern.obs_mask].mean()
        parts["ce"] = float(ce.detach())
        terms.append(ce)
    if pattern.loss_on_acts and pattern.act_mask.any():
        dom = model.domain(batch.domain_id)
        pred = model.action_readout(z, batch.domain_id).to(torch.float64)
        target = ((batch.chunks - dom.act_mean) / dom.act_std).to(torch.float64)
        mse = ((pred - target)[pattern.act_mask] ** 2).mean()
        parts["mse"] = float(mse.detach())
        terms.append(mse)
    if not terms:
        raise ValueError("batch supervises no tokens and no actions")
    loss = sum(terms)
    parts["loss"] = float(loss.detach())
    return loss, parts


def loss_soft(batch, model, schedule):
    """Noise-prediction MSE on masked latent positions and supervised action
    chunks, with independent timesteps and noises per stream."""
    pattern = batch.pattern
    z = model.features(batch.obs, batch.chunks, pattern, batch.domain_id)
    parts = {"obs_mse": 0.0, "act_mse": 0.0}
    terms = []
    if pattern.loss_on_obs and pattern.obs_mask.any():
        x0 = group_positions(batch.obs, model.cfg.trunk_patch, soft=True)
        x_t = schedule.q_sample(x0, batch.t_obs, batch.eps_obs)
        pred = model.video_eps(z, x_t, batch.t_obs).to(torch.float64)
        err = (pred - batch.eps_obs.to(torch.float64))[pattern.obs_mask]
        term = (err ** 2).mean()
        parts["obs_mse"] = float(term.detach())
        terms.append(term)
    if pattern.loss_on_acts and pattern.act_mask.any():
        dom = model.domain(batch.domain_id)
        a0 = (batch.chunks - dom.act_mean) / dom.act_std
        x_t = schedule.q_sample(a0, batch.t_act, batch.eps_act)
        pred = model.action_readout(z, batch.domain_id, x_t=x_t,
                                    t=batch.t_act).to(torch.float64)
        err = (pred - batch.eps_act.to(torch.float64))[pattern.act_mask]
        term = (err ** 2).mean()
        parts["act_mse"] = float(term.detach())
        terms.append(term)
    if not terms:
        raise ValueError("batch supervises no tokens and no actions")
    loss = sum(terms)
    parts["loss"] = float(loss.detach())
    return loss, parts


@dataclasses.dataclass
class DomainData:
    """Pre-tokenized episodes of one domain at the 2 Hz model rate."""
    spec: object
    tokens: np.ndarray              # (E, F, 16, 16) int16
    chunks: np.ndarray              # (E, F-1, chunk_dim) float32
    frames: np.ndarray = None       # (E, F, 64, 64, 3) u8, soft models only
    source: Path = None

    @property
    def n_episodes(self):
        return self.tokens.shape[0]

    @property
    def n_frames(self):
        return self.tokens.shape[1]

    def n_starts(self, context_frames=12):
        # a window needs context_frames frames plus a chunk at each of them
        return max(0, self.n_frames - context_frames)

    @property
    def n_windows(self, context_frames=12):
        return self.n_episodes * self.n_starts(context_frames)


def prepare_domain(spec, episodes, codebook, keep_frames=False):
    """Tokenize episodes and chunk native actions to the 2 Hz rate."""
    if not episodes:
        raise ValueError("no episodes")
    toks, chunks, frames = [], [], []
    for ep in episodes:
        f2 = ep.frames[::spec.stride]
        steps = (len(ep.frames) - 1) // spec.stride
        if len(ep.frames) != steps * spec.stride + 1:
            raise ValueError("episode length is not a whole number of chunks")
        toks.append(np.stack([tk.encode(codebook, f) for f in f2]).astype(np.int16))
        chunks.append(ep.actions.reshape(steps, spec.chunk_dim))
        if keep_frames:
            frames.append(f2)
    return DomainData(spec, np.stack(toks), np.stack(chunks).astype(np.float32),
                      np.stack(frames) if keep_frames else None)


def prepare_dataset_dir(path, codebook, keep_frames=False):
    spec, episodes = load_dataset(path)
    dd = prepare_domain(spec, episodes, codebook, keep_frames=keep_frames)
    dd.source = Path(path)
    return dd


def action_stats(data):
    """Per-domain per-dimension mean and std over all training chunks."""
    stats = {}
    for did, dd in data.items():
        flat = dd.chunks.reshape(-1, dd.chunks.shape[-1]).astype(np.float64)
        stats[did] = (flat.mean(axis=0), flat.std(axis=0).clip(min=1e-6))
    return stats


def apply_action_stats(model, data):
    for did, (mean, std) in action_stats(data).items():
        dom = model.domain(did)
        with torch.no_grad():
            dom.act_mean.copy_(torch.from_numpy(mean).float())
            dom.act_std.copy_(torch.from_numpy(std).float())


class Batcher:
    """Draws single-domain batches: domain by dataset-size mixing, mode from
    config, one mask draw u per sample."""

    def __init__(self, data, cfg, objective="discrete", seed=None,
                 frames=12, prompt=4, positions=64, trunk_patch=2):
        if not data:
            raise ValueError("no datasets")
        self.data = dict(sorted(data.items()))
        self.cfg = cfg
        self.objective = objective
        self.frames, self.prompt, self.positions = frames, prompt, positions
        self.trunk_patch = trunk_patch
        for did, dd in self.data.items():
            if dd.n_starts(frames) < 1:
                raise ValueError(
                    f"domain {did} episodes too short for {frames} frames")
            if objective == "soft" and dd.frames is None:
                raise ValueError(f"domain {did} lacks frames for soft latents")
        self.ids = list(self.data)
        self.probs = mix_sampler([self.data[i].n_windows for i in self.ids])
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.mode_names = [m for m, _ in cfg.mode_probs]
        self.mode_p = np.array([p for _, p in cfg.mode_probs])
        self.mode_p = self.mode_p / self.mode_p.sum()

    def sample(self):
        rng = self.rng
        did = self.ids[rng.choice(len(self.ids), p=self.probs)]
        mode = self.mode_names[rng.choice(len(self.mode_names), p=self.mode_p)]
        dd = self.data[did]
        b = self.cfg.batch_size
        es = rng.integers(0, dd.n_episodes, size=b)
        ss = rng.integers(0, dd.n_starts(self.frames), size=b)
        patterns = [sample_pattern(mode, rng.random(), rng, self.frames,
                                   self.prompt, self.positions,
                                   self.cfg.r_min)
                    for _ in range(b)]
        chunks = np.stack([dd.chunks[e, s:s + self.frames]
                           for e, s in zip(es, ss)])
        if self.objective == "discrete":
            obs = np.stack([dd.tokens[e, s:s + self.frames]
                            for e, s in zip(es, ss)])
            obs_t = torch.from_numpy(obs.astype(np.int64))
            t_obs = eps_obs = t_act = eps_act = None
        else:
            lat = np.stack([
                np.stack([tk.encode_soft(f)
                          for f in dd.frames[e, s:s + self.frames]])
                for e, s in zip(es, ss)])
            obs_t = torch.from_numpy(lat)
            g = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
            n = self.cfg.n_train
            t_obs = torch.randint(0, n, (b,), generator=g)
            eps_obs = torch.randn(b, self.frames, self.positions,
                                  self.trunk_patch ** 2, tk.PATCH_DIM,
                                  generator=g)
            t_act = torch.randint(0, n, (b,), generator=g)
            eps_act = torch.randn(b, self.frames, chunks.shape[-1],
                                  generator=g)
        return TrainBatch(did, obs_t, torch.from_numpy(chunks),
                          stack_patterns(patterns), t_obs, eps_obs,
                          t_act, eps_act)


def make_random_batch(model_cfg, domain_id, mode, seed, batch=2,
                      n_train=1000, double=False):
    """Synthetic batch with the right shapes; for tests and benchmarks."""
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    t, p = model_cfg.context_frames, model_cfg.positions
    k = model_cfg.tokens_per_position
    cd = model_cfg.chunk_dim(domain_id)
    fdtype = torch.float64 if double else torch.float32
    if model_cfg.objective == "discrete":
        obs = torch.randint(0, model_cfg.vocab, (batch, t, 16, 16), generator=g)
        t_obs = eps_obs = t_act = eps_act = None
    else:
        obs = torch.rand(batch, t, 16, 16, 48, generator=g, dtype=fdtype)
        t_obs = torch.randint(0, n_train, (batch,), generator=g)
        eps_obs = torch.randn(batch, t, p, k, 48, generator=g, dtype=fdtype)
        t_act = torch.randint(0, n_train, (batch,), generator=g)
        eps_act = torch.randn(batch, t, cd, generator=g, dtype=fdtype)
    chunks = torch.randn(batch, t, cd, generator=g, dtype=fdtype)
    patterns = [sample_pattern(mode, rng.random(), rng,
                               t, model_cfg.prompt_frames, p)
                for _ in range(batch)]
    return TrainBatch(domain_id, obs, chunks, stack_patterns(patterns),
                      t_obs, eps_obs, t_act, eps_act)


def finite_diff_gradcheck(model, loss_fn, n_coords=200, seed=0, h=1e-5):
    """Max relative error between autograd and central finite differences
    over a random subset of parameter coordinates. Run in float64."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None
             else torch.zeros_like(p) for p in params]
    sizes = np.array([p.numel() for p in params])
    offsets = np.cumsum(sizes) - sizes
    rng = np.random.default_rng(seed)
    coords = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())),
                        replace=False)
    worst = 0.0
    with torch.no_grad():
        for c in sorted(coords.tolist()):
            pi = int(np.searchsorted(offsets, c, side="right")) - 1
            j = c - int(offsets[pi])
            flat = params[pi].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            f_plus = float(loss_fn())
            flat[j] = orig - h
            f_minus = float(loss_fn())
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = grads[pi].view(-1)[j].item()
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-5)
            worst = max(worst, rel)
    return worst


@dataclasses.dataclass
class TrainResult:
    checkpoint: Path
    metrics: list
    iterations: int
    stopped_early: bool


def _lr_lambda(cfg):
    def f(step):
        if step < cfg.warmup:
            return (step + 1) / max(1, cfg.warmup)
        span = max(1, cfg.iterations - cfg.warmup)
        p = min(1.0, (step - cfg.warmup) / span)
        return cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * p))
    return f


def train_loop(model, data, cfg, out_dir, val_data=None, stop_fn=None,
               meta=None):
    """Single-thread optimization; deterministic given cfg.seed. Writes a
    flat config file, an append-only metrics log, and checkpoints."""
    if not data:
        raise ValueError("no training data")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "train.cfg").write_text(cfg.to_flat_text())
    torch.manual_seed(cfg.seed)
    mcfg = model.cfg
    apply_action_stats(model, data)
    mk = dict(objective=mcfg.objective, frames=mcfg.context_frames,
              prompt=mcfg.prompt_frames, positions=mcfg.positions,
              trunk_patch=mcfg.trunk_patch)
    batcher = Batcher(data, cfg, seed=cfg.seed, **mk)
    val_batcher = Batcher(val_data or data, cfg, seed=cfg.seed + 101, **mk)
    schedule = DiffusionSchedule(cfg.n_train, cfg.beta_start, cfg.beta_end)
    if cfg.domain_lr_scale != 1.0:
        # per-domain modules (stems, heads, modulation tables) can run hotter
        # than the shared trunk; useful because the gain-0.1 stems start quiet
        groups = [
            {"params": [p for n, p in model.named_parameters()
                        if not n.startswith("domains.")]},
            {"params": [p for n, p in model.named_parameters()
                        if n.startswith("domains.")],
             "lr": cfg.lr * cfg.domain_lr_scale}]
        opt = torch.optim.Adam(groups, lr=cfg.lr)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(cfg))

    def compute_loss(batch):
        if mcfg.objective == "discrete":
            return loss_vq(batch, model)
        return loss_soft(batch, model, schedule)

    metrics = []
    stopped = False
    it = 0
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "obs_term", "act_term",
                         "lr", "val_loss"])

        def log(row):
            metrics.append(row)
            writer.writerow([row["iteration"], row["loss"], row["ce"],
                             row["mse"], row["lr"],
                             "" if row["val_loss"] is None else row["val_loss"]])
            fh.flush()

        for it in range(1, cfg.iterations + 1):
            batch = batcher.sample()
            loss, parts = compute_loss(batch)
            if not math.isfinite(parts["loss"]):
                log(_row(it, parts, sched, None))
                raise RuntimeError(
                    f"non-finite loss at iteration {it}: {parts}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            val = None
            if cfg.val_every and (it % cfg.val_every == 0 or it == cfg.iterations):
                with torch.no_grad():
                    vs = [compute_loss(val_batcher.sample())[1]["loss"]
                          for _ in range(cfg.val_batches)]
                val = sum(vs) / len(vs)
            if val is not None or it % max(1, cfg.log_every) == 0 or it == 1 \
                    or it == cfg.iterations:
                log(_row(it, parts, sched, val))
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"model_{it:07d}.ckpt",
                                meta=_meta(meta, it, cfg))
            if stop_fn is not None and cfg.val_every \
                    and it % cfg.val_every == 0 and stop_fn(model, it, parts):
                stopped = True
                break

    ckpt = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt, meta=_meta(meta, it, cfg))
    return TrainResult(ckpt, metrics, it, stopped)


def _row(it, parts, sched, val):
    return {"iteration": it, "loss": parts["loss"],
            "ce": parts.get("ce", parts.get("obs_mse", 0.0)),
            "mse": parts.get("mse", parts.get("act_mse", 0.0)),
            "lr": sched.get_last_lr()[0], "val_loss": val}


def _meta(meta, it, cfg):
    out = dict(meta or {})
    out["iteration"] = it
    out["train_config"] = cfg.to_flat_text()
    return out

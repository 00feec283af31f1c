"""Downstream uses of a trained dynamics model: behavior-cloned policies,
policy evaluation inside the learned simulator (paired against the exact
oracle), model-generated training data, and the data-augmentation study.

Evaluation pairing: the oracle and learned-simulator loops reset episode i
from the same seed, and stateful policies get a reset(seed) call at each
episode boundary. In the learned simulator the policy only ever observes the
reset frame and the model's own generated frames.
"""

import copy
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tokenizer as tk
from .envs import (DOMAINS, load_dataset, make_env, render, step_oracle,
                   success, success_from_frame)
from .metrics import pearson
from .model import config_hash
from .sampling import SequenceState, decode_frame, predict_actions, rollout


@dataclass
class EvalRun:
    """One policy evaluated by one evaluator."""
    tag: str
    evaluator: str          # "oracle" or "learned"
    n_episodes: int
    success_rate: float
    wall_time: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate must be within [0, 1]")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


class BcPolicy(nn.Module):
    """Small frame-to-action-chunk regressor; quality graded by how long it
    was trained (the tag records the iteration count)."""

    def __init__(self, spec, tag="bc"):
        super().__init__()
        self.domain_id = spec.id
        self.action_dim = spec.action_dim
        self.stride = spec.stride
        self.chunk_dim = spec.chunk_dim
        self.bounds = tuple(tuple(b) for b in spec.action_bounds)
        self.tag = tag
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=4), nn.ReLU(),
            nn.Conv2d(16, 32, 4, stride=4), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(32 * 4 * 4, 128), nn.ReLU(),
            nn.Linear(128, self.chunk_dim))

    def forward(self, frames):
        # frames: (B, 64, 64, 3) float in [0, 1]
        return self.net(frames.permute(0, 3, 1, 2) - 0.5)

    def act(self, frame):
        """uint8 frame -> action chunk, clamped per native step to bounds."""
        x = torch.from_numpy(np.asarray(frame)).float()[None] / 255.0
        with torch.no_grad():
            out = self(x)[0].numpy().astype(np.float64)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        native = out.reshape(self.stride, self.action_dim)
        return np.clip(native, lo, hi).reshape(-1)


def bc_pairs(spec, episodes):
    """All (2 Hz frame, action chunk taken there) pairs of the episodes."""
    frames, chunks = [], []
    for ep in episodes:
        f2 = ep.frames[::spec.stride]
        steps = (len(ep.frames) - 1) // spec.stride
        frames.append(f2[:steps])
        chunks.append(ep.actions.reshape(steps, spec.chunk_dim))
    return np.concatenate(frames), np.concatenate(chunks).astype(np.float32)


def train_bc_ladder(spec, pairs, marks, seed=0, batch_size=64, lr=1e-3):
    """One Adam run on frame->chunk MSE, snapshotted at each iteration mark;
    returns the snapshots (graded-quality policies) in mark order."""
    frames, chunks = pairs
    if len(frames) == 0:
        raise ValueError("empty dataset")
    marks = sorted(int(m) for m in marks)
    if not marks or marks[0] < 0:
        raise ValueError("marks must be non-negative iteration counts")
    torch.manual_seed(seed)
    policy = BcPolicy(spec)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    ft = torch.from_numpy(np.ascontiguousarray(frames))
    ct = torch.from_numpy(chunks)
    out = []

    def snap(mark):
        p = copy.deepcopy(policy).eval()
        p.tag = f"bc-{mark}"
        out.append(p)

    if marks[0] == 0:
        snap(0)
    for it in range(1, marks[-1] + 1):
        idx = torch.from_numpy(rng.integers(0, len(ft), size=batch_size))
        batch = ft[idx].float() / 255.0
        loss = F.mse_loss(policy(batch), ct[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it in marks:
            snap(it)
    return out


def train_bc(spec, pairs, iterations, seed=0, batch_size=64, lr=1e-3):
    return train_bc_ladder(spec, pairs, [iterations], seed=seed,
                           batch_size=batch_size, lr=lr)[0]


def _maybe_reset(policy, seed):
    reset = getattr(policy, "reset", None)
    if callable(reset):
        reset(seed)


def eval_in_oracle(policy, n=50, max_steps=100, seed=0):
    """Success rate over n episodes in the exact environment, judged on
    ground-truth state, horizon max_steps native timesteps."""
    if n < 1:
        raise ValueError("n must be at least 1")
    t0 = time.perf_counter()
    wins = 0
    for i in range(n):
        state = make_env(policy.domain_id, seed + i)
        _maybe_reset(policy, seed + i)
        solved = success(state)
        steps = 0
        while not solved and steps < max_steps:
            chunk = np.asarray(policy.act(render(state)))
            for a in chunk.reshape(policy.stride, policy.action_dim):
                state = step_oracle(state, a)
                steps += 1
                solved = solved or success(state)
                if solved or steps >= max_steps:
                    break
        wins += bool(solved)
    return EvalRun(policy.tag, "oracle", n, wins / n,
                   time.perf_counter() - t0, seed)


def eval_in_learned_sim(policy, model, codebook, n=50, max_steps=100, seed=0,
                        greedy=True, m_passes=2, n_test=100):
    """Closed-loop evaluation inside the model: the policy reads generated
    frames, the model steps on the policy's actions, success is judged by the
    pixel judge. Episode i shares its reset seed with the oracle loop."""
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = DOMAINS[policy.domain_id]
    soft = model.cfg.objective == "soft"
    t0 = time.perf_counter()
    wins = 0
    for i in range(n):
        f0 = render(make_env(policy.domain_id, seed + i))
        _maybe_reset(policy, seed + i)
        enc = tk.encode_soft(f0) if soft else tk.encode(codebook, f0)
        sim = SequenceState.from_prompt(
            model, policy.domain_id, np.stack([enc] * 4),
            prompt_chunks=np.zeros((3, spec.chunk_dim), dtype=np.float32),
            seed=seed + i)
        frame = f0
        solved = success_from_frame(f0)
        steps = 0
        while not solved and steps < max_steps:
            chunk = np.asarray(policy.act(frame))
            out = decode_frame(model, sim, chunk, greedy=greedy,
                               m_passes=m_passes, n_test=n_test)
            frame = (tk.decode_soft(out.numpy()) if soft
                     else tk.decode(codebook, out.numpy()))
            steps += policy.stride
            solved = success_from_frame(frame)
        wins += bool(solved)
    return EvalRun(policy.tag, "learned", n, wins / n,
                   time.perf_counter() - t0, seed)


def correlate_evaluators(policies, model, codebook, n=50, max_steps=100,
                         seed=0, greedy=True):
    """Paired oracle/learned success rates for each policy and their Pearson
    correlation. Raises on degenerate rate variance."""
    if len(policies) < 2:
        raise ValueError("need at least two policies to correlate")
    rows = []
    for p in policies:
        o = eval_in_oracle(p, n=n, max_steps=max_steps, seed=seed)
        s = eval_in_learned_sim(p, model, codebook, n=n, max_steps=max_steps,
                                seed=seed, greedy=greedy)
        rows.append({"tag": p.tag, "oracle": o.success_rate,
                     "learned": s.success_rate, "oracle_time": o.wall_time,
                     "learned_time": s.wall_time})
    r = pearson([row["oracle"] for row in rows],
                [row["learned"] for row in rows])
    return r, rows


def correlation_table(r, rows):
    lines = ["tag,oracle,learned"]
    for row in rows:
        lines.append(f"{row['tag']},{row['oracle']:.4f},{row['learned']:.4f}")
    lines.append(f"pearson,{r:.4f},")
    return "\n".join(lines) + "\n"


def gen_synthetic(model, codebook, domain_id, trajectories, init_seeds,
                  out_dir, seed=0, greedy=True, skills=None, provenance=None):
    """Generate a dataset directory of (video, action) episodes: each held-out
    native action trajectory is replayed through the model from an oracle
    reset frame. Written in the standard dataset format; frames are generated
    at 2 Hz and each native slot in between holds the latest generated frame,
    so 2 Hz consumers recover exactly the generated video. The manifest gains
    a provenance entry naming the generator."""
    spec = DOMAINS[domain_id]
    trajectories = [np.asarray(t, dtype=np.float32) for t in trajectories]
    if len(trajectories) != len(init_seeds):
        raise ValueError("need one init seed per trajectory")
    if not trajectories:
        raise ValueError("no trajectories")
    length = len(trajectories[0])
    for i, traj in enumerate(trajectories):
        if traj.ndim != 2 or traj.shape[1] != spec.action_dim:
            raise ValueError(
                f"trajectory {i} shape {traj.shape} does not match "
                f"{spec.name} action dim {spec.action_dim}")
        if len(traj) != length or length % spec.stride or length == 0:
            raise ValueError(
                "trajectories must share one positive length divisible "
                f"by stride {spec.stride}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = length // spec.stride
    index = []
    for i, traj in enumerate(trajectories):
        f0 = render(make_env(domain_id, int(init_seeds[i])))
        chunks = traj.reshape(steps, spec.chunk_dim)
        vid = rollout(model, codebook, np.stack([f0] * 4), chunks, domain_id,
                      prompt_chunks=np.zeros((3, spec.chunk_dim),
                                             dtype=np.float32),
                      seed=seed + i, greedy=greedy)
        f2 = np.concatenate([f0[None], vid])
        native = f2[np.arange(length + 1) // spec.stride]
        solved = bool(any(success_from_frame(f) for f in f2))
        fname, aname = f"ep{i:05d}.frames", f"ep{i:05d}.actions"
        (out_dir / fname).write_bytes(native.tobytes())
        (out_dir / aname).write_bytes(traj.astype("<f4").tobytes())
        index.append({
            "id": i,
            "seed": int(init_seeds[i]),
            "skill": float(skills[i]) if skills is not None else 0.0,
            "success": solved,
            "frames": fname,
            "actions": aname,
            "n_frames": int(native.shape[0]),
            "n_actions": int(traj.shape[0]),
        })
    manifest = {
        "format": "hma-ds/1",
        "domain": spec.to_json(),
        "n_episodes": len(trajectories),
        "episode_len": length,
        "seed": seed,
        "episodes": index,
        "provenance": provenance or {
            "generated-by": "dynamics-model",
            "model_config": config_hash(model.cfg),
        },
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))
    return out_dir


def augmentation_study(model, codebook, domain_id, real_episodes,
                       held_out_episodes, out_dir, synthetic_counts=(0, 10,
                       50, 90), real_subset=10, bc_iterations=2000, n_eval=50,
                       max_steps=100, seed=0, greedy=True):
    """Train BC on a fixed small real set plus increasing numbers of
    model-generated episodes (actions and reset states from held-out real
    episodes); report oracle success per mixture as {count: rate}."""
    spec = DOMAINS[domain_id]
    reals = list(real_episodes[:real_subset])
    counts = sorted(set(int(c) for c in synthetic_counts))
    need = max(counts)
    if need > len(held_out_episodes):
        raise ValueError(
            f"need {need} held-out episodes, have {len(held_out_episodes)}")
    syn_eps = []
    if need > 0:
        syn_dir = gen_synthetic(
            model, codebook, domain_id,
            [ep.actions for ep in held_out_episodes[:need]],
            [ep.seed for ep in held_out_episodes[:need]],
            Path(out_dir) / "synthetic", seed=seed, greedy=greedy,
            skills=[ep.skill for ep in held_out_episodes[:need]])
        _, syn_eps = load_dataset(syn_dir)
    rates = {}
    for c in counts:
        pairs = bc_pairs(spec, reals + syn_eps[:c])
        policy = train_bc(spec, pairs, bc_iterations, seed=seed)
        run = eval_in_oracle(policy, n=n_eval, max_steps=max_steps,
                             seed=seed + 10_000)
        rates[c] = run.success_rate
    return rates


def augmentation_table(rates):
    lines = ["synthetic_episodes,success_rate"]
    for c in sorted(rates):
        lines.append(f"+{c},{rates[c]:.4f}")
    return "\n".join(lines) + "\n"


def dynamics_as_policy_eval(model, codebook, domain_id, n=50, max_steps=100,
                            seed=0, n_test=100):
    """Use the model's own action readout as a policy in the exact
    environment: it observes real frames, its predicted chunks (clamped to
    bounds) drive the oracle. Reported for measurement, not performance."""
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = DOMAINS[domain_id]
    soft = model.cfg.objective == "soft"
    lo = np.array([b[0] for b in spec.action_bounds])
    hi = np.array([b[1] for b in spec.action_bounds])

    def encode(frame):
        return tk.encode_soft(frame) if soft else tk.encode(codebook, frame)

    t0 = time.perf_counter()
    wins = 0
    for i in range(n):
        state = make_env(domain_id, seed + i)
        sim = SequenceState.from_prompt(
            model, domain_id, np.stack([encode(render(state))] * 4),
            prompt_chunks=np.zeros((3, spec.chunk_dim), dtype=np.float32),
            seed=seed + i)
        solved = success(state)
        steps = 0
        while not solved and steps < max_steps:
            chunk = predict_actions(model, sim, 1, n_test=n_test)[0].numpy()
            native = np.clip(chunk.reshape(spec.stride, spec.action_dim),
                             lo, hi)
            for a in native:
                state = step_oracle(state, a)
                steps += 1
                solved = solved or success(state)
                if solved or steps >= max_steps:
                    break
            sim.append_frame(encode(render(state)))
        wins += bool(solved)
    return EvalRun("dynamics", "oracle", n, wins / n,
                   time.perf_counter() - t0, seed)

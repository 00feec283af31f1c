"""Episode generation and the on-disk dataset format (version hma-ds/1).

A dataset is a directory:
  manifest.json          format tag, domain spec, counts, seeds, per-episode index
  epNNNNN.frames         raw uint8 blob, (T+1) * 64 * 64 * 3 bytes
  epNNNNN.actions        little-endian float32, T * action_dim values

Same arguments and seed produce a byte-identical directory.
"""

import json
from pathlib import Path

import numpy as np

from . import registry
from .core import Episode
from .policy import scripted_policy


def run_episode(domain_id, seed, episode_len, skill):
    """Roll the scripted policy for episode_len native steps."""
    env = registry.env_module(domain_id)
    state = env.init_state(np.random.default_rng(seed))
    rng = np.random.default_rng([seed, 17])
    frames = [env.render(state)]
    actions = np.zeros((episode_len, env.SPEC.action_dim), dtype=np.float32)
    solved = env.success(state)
    for t in range(episode_len):
        a = scripted_policy(state, skill, rng)
        actions[t] = a
        state = env.step(state, a)
        frames.append(env.render(state))
        solved = solved or env.success(state)
    return Episode(domain_id, np.stack(frames), actions, bool(solved),
                   seed=seed, skill=skill)


def generate_dataset(domain_id, n_episodes, episode_len, skill_mix, seed, out_dir):
    spec = registry.DOMAINS[domain_id] if domain_id in registry.DOMAINS else None
    if spec is None:
        raise KeyError(f"unknown domain id {domain_id}")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if episode_len < 1 or episode_len % spec.stride != 0:
        raise ValueError(
            f"episode_len {episode_len} must be a positive multiple of stride {spec.stride}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    skills = sorted(skill_mix)
    probs = np.array([skill_mix[s] for s in skills], dtype=np.float64)
    probs = probs / probs.sum()
    pick = np.random.default_rng(seed)

    index = []
    for i in range(n_episodes):
        skill = float(skills[int(pick.choice(len(skills), p=probs))])
        ep_seed = seed * 1_000_003 + i
        ep = run_episode(domain_id, ep_seed, episode_len, skill)
        fname, aname = f"ep{i:05d}.frames", f"ep{i:05d}.actions"
        (out_dir / fname).write_bytes(ep.frames.tobytes())
        (out_dir / aname).write_bytes(ep.actions.astype("<f4").tobytes())
        index.append({
            "id": i,
            "seed": ep_seed,
            "skill": skill,
            "success": ep.success,
            "frames": fname,
            "actions": aname,
            "n_frames": int(ep.frames.shape[0]),
            "n_actions": int(ep.actions.shape[0]),
        })

    manifest = {
        "format": "hma-ds/1",
        "domain": spec.to_json(),
        "n_episodes": n_episodes,
        "episode_len": episode_len,
        "seed": seed,
        "episodes": index,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))
    return out_dir


def load_dataset(path):
    """Read a dataset directory; returns (DomainSpec, list[Episode])."""
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    if man.get("format") != "hma-ds/1":
        raise ValueError(f"unsupported dataset format {man.get('format')!r}")
    spec = registry.DOMAINS[man["domain"]["id"]]
    eps = []
    for rec in man["episodes"]:
        frames = np.fromfile(path / rec["frames"], dtype=np.uint8)
        frames = frames.reshape(rec["n_frames"], 64, 64, 3)
        actions = np.fromfile(path / rec["actions"], dtype="<f4")
        actions = actions.reshape(rec["n_actions"], spec.action_dim)
        eps.append(Episode(spec.id, frames, actions.astype(np.float32),
                           bool(rec["success"]), seed=rec["seed"],
                           skill=rec["skill"]))
    return spec, eps

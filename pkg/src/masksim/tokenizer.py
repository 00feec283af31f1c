"""Exact patch-palette tokenizer.

Frames are split into a 16x16 grid of 4x4 pixel patches (48 values each,
normalized to [0, 1]). The codebook enumerates every distinct patch seen
during calibration, so encode/decode round-trips are bit-exact whenever a
frame's patches were covered; beyond 512 distinct patches a seeded k-means
caps the vocabulary. A parallel "soft" path skips quantization entirely and
keeps the normalized patches as 48-dim continuous latents.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PATCH = 4
TOKEN_GRID = 16
PATCH_DIM = PATCH * PATCH * 3
TOKENS_PER_FRAME = TOKEN_GRID * TOKEN_GRID
MAX_VOCAB = 512

MAGIC = b"HMACB1"


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (V, 48) float32 in [0, 1], lexicographically sorted
    version_hash: str

    @property
    def size(self):
        return int(self.entries.shape[0])


def patchify(frame):
    """(64, 64, 3) -> (256, 48), row-major patch order."""
    f = np.asarray(frame)
    p = f.reshape(TOKEN_GRID, PATCH, TOKEN_GRID, PATCH, 3)
    return p.transpose(0, 2, 1, 3, 4).reshape(TOKENS_PER_FRAME, PATCH_DIM)


def unpatchify(patches):
    p = np.asarray(patches).reshape(TOKEN_GRID, TOKEN_GRID, PATCH, PATCH, 3)
    return p.transpose(0, 2, 1, 3, 4).reshape(64, 64, 3)


def _hash_entries(entries):
    h = hashlib.sha256()
    h.update(struct.pack("<II", entries.shape[0], entries.shape[1]))
    h.update(entries.astype("<f4").tobytes())
    return h.hexdigest()


def _as_frame_array(frames):
    arr = np.asarray(frames, dtype=np.uint8)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (64, 64, 3):
        raise ValueError(f"expected (N, 64, 64, 3) u8 frames, got {arr.shape}")
    return arr


def _distinct_patches(frames_iter):
    seen = {}
    n = 0
    for f in frames_iter:
        n += 1
        for p in np.unique(patchify(f), axis=0):
            seen.setdefault(p.tobytes(), p)
    if n == 0:
        raise ValueError("need at least one calibration frame")
    return np.unique(np.stack(list(seen.values())), axis=0)


def _codebook_from_distinct(distinct_u8, seed):
    distinct = distinct_u8.astype(np.float64) / 255.0
    if len(distinct) > MAX_VOCAB:
        distinct = _kmeans(distinct, MAX_VOCAB, seed)
    entries = np.unique(distinct.astype(np.float32), axis=0)
    return Codebook(entries=entries, version_hash=_hash_entries(entries))


def build_codebook(frames, seed=0):
    """Enumerate distinct patches; k-means down to 512 if they overflow."""
    if not hasattr(frames, "shape"):
        frames = list(frames)
        if frames and np.asarray(frames[0]).ndim == 3:
            frames = np.stack(frames)
    arr = _as_frame_array(frames)
    return _codebook_from_distinct(_distinct_patches(arr), seed)


def _kmeans(points, k, seed, iters=30):
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(len(points), size=k, replace=False)]
    assign = None
    for _ in range(iters):
        d = _sq_dists(points, centers)
        new_assign = d.argmin(1)
        if assign is not None and (new_assign == assign).all():
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = points[sel].mean(0)
    centers = np.unique(centers, axis=0)
    while len(centers) < k:
        # re-seed collapsed centroids with the most distant point
        d = _sq_dists(points, centers).min(1)
        centers = np.concatenate([centers, points[[d.argmax()]]])
    return centers


def _sq_dists(p, e):
    return ((p ** 2).sum(1)[:, None] - 2.0 * (p @ e.T)
            + (e ** 2).sum(1)[None, :])


def encode(codebook, frame):
    """Nearest codebook entry per patch; returns (16, 16) token ids."""
    p = patchify(frame).astype(np.float64) / 255.0
    e = codebook.entries.astype(np.float64)
    ids = _sq_dists(p, e).argmin(1)
    return ids.reshape(TOKEN_GRID, TOKEN_GRID)


def decode(codebook, tokens):
    """Token ids back to a frame."""
    ids = np.asarray(tokens).reshape(TOKEN_GRID, TOKEN_GRID)
    if ids.min() < 0 or ids.max() >= codebook.size:
        raise ValueError("token id out of range")
    patches = codebook.entries[ids.reshape(-1)].astype(np.float64)
    return unpatchify(np.rint(patches * 255.0).astype(np.uint8))


def encode_soft(frame):
    """(64, 64, 3) u8 -> (16, 16, 48) float32 in [0, 1]."""
    p = patchify(frame).astype(np.float32) / 255.0
    return p.reshape(TOKEN_GRID, TOKEN_GRID, PATCH_DIM)


def decode_soft(latent):
    p = np.asarray(latent, dtype=np.float64).reshape(-1, PATCH_DIM)
    p = np.clip(p, 0.0, 1.0)
    return unpatchify(np.rint(p * 255.0).astype(np.uint8))


def save_codebook(codebook, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = MAGIC + struct.pack("<II", codebook.size, PATCH_DIM)
    blob += codebook.entries.astype("<f4").tobytes()
    path.write_bytes(blob)


def load_codebook(path):
    blob = Path(path).read_bytes()
    if blob[:6] != MAGIC:
        raise ValueError("not a codebook file (bad magic)")
    v, dim = struct.unpack("<II", blob[6:14])
    if dim != PATCH_DIM:
        raise ValueError(f"unsupported patch dim {dim}")
    body = blob[14:]
    if len(body) != v * dim * 4:
        raise ValueError("truncated codebook file")
    entries = np.frombuffer(body, dtype="<f4").reshape(v, dim).copy()
    return Codebook(entries=entries, version_hash=_hash_entries(entries))


# calibration sweep shared by training, serving and tests: enough mixed-skill
# episodes per domain that the distinct-patch sets saturate
CALIBRATION_EPISODES = 120
CALIBRATION_STEPS = 50
CALIBRATION_SKILLS = (1.0, 0.5, 0.0)


def calibration_frames():
    """Yields oracle frames from mixed-skill rollouts of every domain."""
    from .envs import DOMAINS, make_env, render, scripted_policy, step_oracle

    rng = np.random.default_rng(0)
    for did in sorted(DOMAINS):
        for seed in range(CALIBRATION_EPISODES):
            s = make_env(did, seed=seed)
            skill = CALIBRATION_SKILLS[seed % len(CALIBRATION_SKILLS)]
            for _ in range(CALIBRATION_STEPS):
                yield render(s)
                s = step_oracle(s, scripted_policy(s, skill, rng))


def default_codebook(cache_dir=".cache"):
    """The canonical codebook over all built-in domains, cached on disk."""
    cache = Path(cache_dir) / "codebook.bin"
    if cache.exists():
        return load_codebook(cache)
    cb = _codebook_from_distinct(_distinct_patches(calibration_frames()), seed=0)
    save_codebook(cb, cache)
    return cb

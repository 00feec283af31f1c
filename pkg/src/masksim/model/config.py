"""Model configuration and its canonical serialized form."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

CONDITIONINGS = ("modulation", "concat", "add", "xattn")
OBJECTIVES = ("discrete", "soft")

TOKEN_GRID = 16
SOFT_DIM = 48


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    domain_chunk_dims: tuple  # ((domain_id, chunk_dim), ...)
    n_blocks: int = 8
    dim: int = 128
    n_heads: int = 4
    trunk_patch: int = 2
    context_frames: int = 12
    prompt_frames: int = 4
    predict_frames: int = 8
    conditioning: str = "modulation"
    objective: str = "discrete"
    temporal_causal: bool = True

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        if self.context_frames != self.prompt_frames + self.predict_frames:
            raise ValueError("context_frames must equal prompt + predict frames")
        if TOKEN_GRID % self.trunk_patch != 0:
            raise ValueError("trunk_patch must divide the 16-token grid")
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")
        object.__setattr__(self, "domain_chunk_dims",
                           tuple((int(i), int(c)) for i, c in self.domain_chunk_dims))

    @property
    def positions_side(self):
        return TOKEN_GRID // self.trunk_patch

    @property
    def positions(self):
        # trunk positions per frame: 64 for patch size 2
        return self.positions_side ** 2

    @property
    def tokens_per_position(self):
        return self.trunk_patch ** 2

    @property
    def position_soft_dim(self):
        return self.tokens_per_position * SOFT_DIM

    def chunk_dim(self, domain_id):
        for i, c in self.domain_chunk_dims:
            if i == domain_id:
                return c
        raise KeyError(f"model has no modules for domain {domain_id}")

    def to_dict(self):
        d = asdict(self)
        d["domain_chunk_dims"] = [list(p) for p in self.domain_chunk_dims]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["domain_chunk_dims"] = tuple(tuple(p) for p in d["domain_chunk_dims"])
        return cls(**d)


def config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

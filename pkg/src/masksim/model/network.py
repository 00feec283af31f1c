"""Spatial-temporal transformer trunk with per-domain stems, heads and
modulation.

Layout: every frame contributes P=64 trunk positions (each one a 2x2 group
of tokens) plus one action-chunk embedding. Spatial attention mixes the
positions of a single frame bidirectionally; temporal attention runs per
position across frames, causal unless configured otherwise. The chunk taken
at frame t is injected at frame t, so it reaches frame t+1 through temporal
attention (forward dynamics) and is read out at frame t (policy).
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import SOFT_DIM, TOKEN_GRID, ModelConfig
from .masks import MaskPattern


def group_positions(x, patch, soft=False):
    """(..., 16, 16) -> (..., P, patch^2) grouping each patch x patch block
    of the token grid into one trunk position (row-major within the block).
    With soft=True a trailing 48-dim axis rides along."""
    side = TOKEN_GRID // patch
    rest = (SOFT_DIM,) if soft else ()
    lead = x.shape[:x.ndim - 2 - len(rest)]
    x = x.reshape(*lead, side, patch, side, patch, *rest)
    nl = len(lead)
    perm = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3]
    if soft:
        perm.append(nl + 4)
    x = x.permute(*perm)
    return x.reshape(*lead, side * side, patch * patch, *rest)


def ungroup_positions(g, patch, soft=False):
    """Inverse of group_positions."""
    side = TOKEN_GRID // patch
    rest = (SOFT_DIM,) if soft else ()
    lead = g.shape[:g.ndim - 2 - len(rest)]
    g = g.reshape(*lead, side, side, patch, patch, *rest)
    nl = len(lead)
    perm = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3]
    if soft:
        perm.append(nl + 4)
    g = g.permute(*perm)
    return g.reshape(*lead, TOKEN_GRID, TOKEN_GRID, *rest)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, causal=False):
        n, l, d = x.shape
        qkv = self.qkv(x).reshape(n, l, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.proj(y.transpose(1, 2).reshape(n, l, d))


class CrossAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, ctx):
        n, l, d = x.shape
        q = self.q(x).reshape(n, l, self.n_heads, d // self.n_heads).transpose(1, 2)
        kv = self.kv(ctx).reshape(n, ctx.shape[1], 2, self.n_heads,
                                  d // self.n_heads)
        k, v = kv.permute(2, 0, 3, 1, 4).unbind(0)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.proj(y.transpose(1, 2).reshape(n, l, d))


class STBlock(nn.Module):
    """One trunk block: spatial attention, temporal attention, MLP, and an
    optional conditioning sublayer (cross-attention or per-domain modulation)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.norm_s = nn.LayerNorm(d)
        self.attn_s = Attention(d, cfg.n_heads)
        self.norm_t = nn.LayerNorm(d)
        self.attn_t = Attention(d, cfg.n_heads)
        self.norm_m = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(),
                                 nn.Linear(4 * d, d))
        self.causal = cfg.temporal_causal
        if cfg.conditioning == "xattn":
            self.norm_x = nn.LayerNorm(d)
            self.xattn = CrossAttention(d, cfg.n_heads)
        elif cfg.conditioning == "modulation":
            # parameter-free norm; scale/shift/gate come from the domain table
            self.norm_c = nn.LayerNorm(d, elementwise_affine=False)

    def forward(self, x, cond, mod_table=None):
        b, t, s, d = x.shape
        h = self.attn_s(self.norm_s(x).reshape(b * t, s, d))
        x = x + h.reshape(b, t, s, d)
        h = self.norm_t(x).permute(0, 2, 1, 3).reshape(b * s, t, d)
        h = self.attn_t(h, causal=self.causal)
        x = x + h.reshape(b, s, t, d).permute(0, 2, 1, 3)
        if hasattr(self, "xattn"):
            h = self.xattn(self.norm_x(x).reshape(b * t, s, d),
                           cond.reshape(b * t, 1, d))
            x = x + h.reshape(b, t, s, d)
        x = x + self.mlp(self.norm_m(x))
        if mod_table is not None:
            scale, shift, gate = mod_table(cond).unsqueeze(2).chunk(3, dim=-1)
            # (1 + scale): at zero init the gated branch is norm_c(x), not 0,
            # so the gate gets a gradient and the pathway can leave identity
            x = x + gate * ((1 + scale) * self.norm_c(x) + shift)
        return x


class DomainModules(nn.Module):
    """Everything owned by a single embodiment: action stem, action head,
    modulation tables, mask embeddings, and action normalization stats."""

    def __init__(self, cfg: ModelConfig, chunk_dim):
        super().__init__()
        d = cfg.dim
        self.chunk_dim = chunk_dim
        self.stem = nn.Sequential(nn.Linear(chunk_dim, d), nn.SiLU(),
                                  nn.Linear(d, d))
        for m in self.stem:
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight, gain=0.1)
                nn.init.zeros_(m.bias)
        # the low-gain stem starts out emitting ~1e-2 magnitude features;
        # normalizing restores the O(1) input scale that the zero-initialized
        # modulation tables (and the other conditioning routes) are sized for,
        # without touching the stem's own initialization
        self.act_norm = nn.LayerNorm(d)
        head_in = d if cfg.objective == "discrete" else d + chunk_dim + d
        self.action_head = nn.Sequential(
            nn.Linear(head_in, 2 * d), nn.SiLU(),
            nn.Linear(2 * d, 2 * d), nn.SiLU(),
            nn.Linear(2 * d, chunk_dim))
        if cfg.conditioning == "modulation":
            self.mod_tables = nn.ModuleList(
                [nn.Linear(d, 3 * d) for _ in range(cfg.n_blocks)])
            for m in self.mod_tables:
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)
        self.video_mask_emb = nn.Parameter(torch.randn(d) * 0.02)
        self.act_mask_emb = nn.Parameter(torch.randn(d) * 0.02)
        self.register_buffer("act_mean", torch.zeros(chunk_dim))
        self.register_buffer("act_std", torch.ones(chunk_dim))


class DynamicsModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        if cfg.objective == "discrete":
            self.token_emb = nn.Embedding(cfg.vocab, d)
            self.video_head = nn.Linear(d, cfg.tokens_per_position * cfg.vocab)
        else:
            self.soft_in = nn.Linear(cfg.position_soft_dim, d)
            eps_in = d + cfg.position_soft_dim + d
            self.video_head = nn.Sequential(
                nn.Linear(eps_in, 2 * d), nn.SiLU(),
                nn.Linear(2 * d, 2 * d), nn.SiLU(),
                nn.Linear(2 * d, cfg.position_soft_dim))
        self.pos_spatial = nn.Parameter(torch.randn(cfg.positions, d) * 0.02)
        self.pos_temporal = nn.Parameter(
            torch.randn(cfg.context_frames, d) * 0.02)
        if cfg.conditioning == "concat":
            self.act_slot = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList(STBlock(cfg) for _ in range(cfg.n_blocks))
        self.final_norm = nn.LayerNorm(d)
        self.domains = nn.ModuleDict(
            {str(i): DomainModules(cfg, c) for i, c in cfg.domain_chunk_dims})
        # inference bookkeeping, not parameters
        self.trunk_passes = 0
        self.head_evals = 0

    def domain(self, domain_id):
        key = str(int(domain_id))
        if key not in self.domains:
            raise KeyError(f"model has no modules for domain {domain_id}")
        return self.domains[key]

    def encode_action(self, chunks, act_mask, domain_id):
        """Normalized chunk -> stem embedding; masked -> the domain's
        action-mask embedding."""
        dom = self.domain(domain_id)
        if chunks.shape[-1] != dom.chunk_dim:
            raise ValueError(
                f"chunk dim {chunks.shape[-1]} != {dom.chunk_dim} for domain {domain_id}")
        a = (chunks - dom.act_mean) / dom.act_std
        e = dom.stem(a)
        return torch.where(act_mask[..., None], dom.act_mask_emb.to(e.dtype), e)

    def embed_frames(self, obs, obs_mask, domain_id):
        cfg = self.cfg
        dom = self.domain(domain_id)
        if cfg.objective == "discrete":
            if obs.ndim != 4 or obs.shape[-2:] != (TOKEN_GRID, TOKEN_GRID):
                raise ValueError(f"expected (B,T,16,16) tokens, got {tuple(obs.shape)}")
            g = group_positions(obs, cfg.trunk_patch)
            e = self.token_emb(g).sum(dim=-2)
        else:
            if obs.ndim != 5 or obs.shape[-3:] != (TOKEN_GRID, TOKEN_GRID, SOFT_DIM):
                raise ValueError(f"expected (B,T,16,16,48) latents, got {tuple(obs.shape)}")
            g = group_positions(obs, cfg.trunk_patch, soft=True)
            e = self.soft_in(g.flatten(-2))
        e = torch.where(obs_mask[..., None], dom.video_mask_emb.to(e.dtype), e)
        t = obs.shape[1]
        e = e + self.pos_spatial[None, None]
        e = e + self.pos_temporal[:t][None, :, None]
        return e

    def features(self, obs, chunks, pattern: MaskPattern, domain_id):
        """Full trunk pass; returns z of shape (B, T, S, d) where S is 64,
        or 128 with concat conditioning (action tokens appended)."""
        cfg = self.cfg
        dom = self.domain(domain_id)
        if obs.shape[:2] != chunks.shape[:2] or obs.shape[:2] != pattern.obs_mask.shape[:2]:
            raise ValueError(
                f"obs {tuple(obs.shape[:2])}, chunks {tuple(chunks.shape[:2])} and "
                f"pattern {tuple(pattern.obs_mask.shape[:2])} disagree on (B, T)")
        cond = self.encode_action(chunks, pattern.act_mask, domain_id)
        x = self.embed_frames(obs, pattern.obs_mask, domain_id)
        if cfg.conditioning == "add":
            x = x + cond[:, :, None, :]
        elif cfg.conditioning == "concat":
            t = x.shape[1]
            act_tok = cond[:, :, None, :] + self.act_slot.to(x.dtype)
            act_tok = act_tok + self.pos_temporal[:t][None, :, None].to(x.dtype)
            act_tok = act_tok.expand(-1, -1, cfg.positions, -1)
            x = torch.cat([x, act_tok], dim=2)
        self.trunk_passes += 1
        for i, block in enumerate(self.blocks):
            mod = dom.mod_tables[i] if cfg.conditioning == "modulation" else None
            x = block(x, cond, mod)
        return self.final_norm(x)

    def obs_features(self, z):
        return z[:, :, :self.cfg.positions]

    def _act_features(self, z):
        if self.cfg.conditioning == "concat":
            return z[:, :, self.cfg.positions:].mean(dim=2)
        return z.mean(dim=2)

    def video_logits(self, z):
        """(B,T,S,d) -> (B,T,P,4,V) categorical logits per grouped token."""
        if self.cfg.objective != "discrete":
            raise RuntimeError("video_logits requires the discrete objective")
        cfg = self.cfg
        out = self.video_head(self.obs_features(z))
        return out.reshape(*out.shape[:-1], cfg.tokens_per_position, cfg.vocab)

    def video_eps(self, z, x_t, t):
        """Predict the noise on grouped latents x_t (B,T,P,4,48) at step t (B,)."""
        if self.cfg.objective != "soft":
            raise RuntimeError("video_eps requires the soft objective")
        cfg = self.cfg
        zo = self.obs_features(z)
        temb = timestep_embedding(t, cfg.dim).to(zo.dtype)
        temb = temb[:, None, None, :].expand(*zo.shape[:3], cfg.dim)
        flat = x_t.reshape(*x_t.shape[:3], cfg.position_soft_dim).to(zo.dtype)
        self.head_evals += 1
        out = self.video_head(torch.cat([zo, flat, temb], dim=-1))
        return out.reshape(*x_t.shape)

    def action_readout(self, z, domain_id, x_t=None, t=None):
        """Pooled frame features -> action chunk (discrete/regression mode)
        or predicted noise on a noisy chunk (soft mode). Normalized space."""
        dom = self.domain(domain_id)
        pooled = self._act_features(z)
        if self.cfg.objective == "discrete":
            return dom.action_head(pooled)
        if x_t is None or t is None:
            raise ValueError("soft action readout needs x_t and t")
        temb = timestep_embedding(t, self.cfg.dim).to(pooled.dtype)
        temb = temb[:, None, :].expand(*pooled.shape[:2], self.cfg.dim)
        self.head_evals += 1
        return dom.action_head(torch.cat([pooled, x_t.to(pooled.dtype), temb], dim=-1))

    def reset_counters(self):
        self.trunk_passes = 0
        self.head_evals = 0


def parameter_partition(model: DynamicsModel):
    """Split parameter names into the shared trunk set and per-domain sets."""
    parts = {"trunk": []}
    for name, _ in model.named_parameters():
        if name.startswith("domains."):
            did = name.split(".")[1]
            parts.setdefault(did, []).append(name)
        else:
            parts["trunk"].append(name)
    return parts

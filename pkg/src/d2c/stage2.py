"""Masked bidirectional encoder-decoder producing per-token diffusion conditions.

The encoder sees ``[P class tokens | L refined queries (q-former only) |
visible continuous tokens]``; the decoder re-inserts a learnable mask token
at every hidden cell and emits one condition vector per grid cell. Discrete
tokens from the first stage enter either through cross-attention inside
every block or through a q-former that compresses them into L queries.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from . import layers as L
from . import rng as rngmod
from .autodiff import Tensor
from .diffusion import DenoiserMLP, NoiseSchedule, diffusion_loss
from .errors import ConfigError, ContractError, InputError

FUSION_KINDS = ("cross_attention", "q_former", "none")
CONDITION_SOURCES = ("teacher", "ground_truth")
QFORMER_ARCHS = ("encoder_decoder", "decoder")


@dataclass
class Stage2Config:
    K: int = 32
    C: int = 4
    h: int = 8
    w: int = 8
    d: int = 4
    width: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_hidden: int | None = None
    fusion: str = "q_former"
    prefix: int = 64
    queries: int = 16
    query_dim: int | None = None
    qformer_arch: str = "encoder_decoder"
    qformer_layers: int = 1
    discrete_dim: int = 64
    cond_dim: int = 64
    mask_lo: float = 0.7
    mask_hi: float = 1.0
    mask_mean: float = 1.0
    mask_std: float = 0.25
    p_drop: float = 0.1
    # "teacher": tokens sampled from the frozen prior given the true prefix;
    # "ground_truth": the data tokens themselves (diagnostic only)
    condition_source: str = "teacher"

    def __post_init__(self):
        if self.condition_source not in CONDITION_SOURCES:
            raise ConfigError(f"condition_source must be one of {CONDITION_SOURCES}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.qformer_arch not in QFORMER_ARCHS:
            raise ConfigError(f"qformer_arch must be one of {QFORMER_ARCHS}")
        if self.prefix < 1 or self.queries < 1:
            raise ConfigError("prefix and query counts must be >= 1")
        if not self.mask_lo < self.mask_hi <= 1.0:
            raise ConfigError("mask-rate bounds must satisfy lo < hi <= 1")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")
        if self.query_dim is None:
            self.query_dim = self.width
        if self.query_dim % self.heads:
            raise ConfigError("query_dim must be divisible by heads")

    @property
    def ffn(self) -> int:
        return self.ffn_hidden or L.ffn_hidden(self.width)

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def n_queries(self) -> int:
        """Query slots occupying the encoder prefix (0 unless fusing with a q-former)."""
        return self.queries if self.fusion == "q_former" else 0

    @property
    def fake_class(self) -> int:
        return self.C

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPlan:
    """Random generation orders (B, n) and the shared number of hidden cells.

    The hidden cells of sample b are ``order[b, n - num_masked:]``.
    """

    order: np.ndarray
    num_masked: int

    def __post_init__(self):
        self.order = np.atleast_2d(np.asarray(self.order, dtype=np.int64))
        n = self.order.shape[1]
        if not 0 <= self.num_masked <= n:
            raise InputError(f"num_masked {self.num_masked} outside [0, {n}]")
        if not np.array_equal(np.sort(self.order, axis=1), np.broadcast_to(np.arange(n), self.order.shape)):
            raise InputError("order is not a permutation")

    @property
    def n(self) -> int:
        return self.order.shape[1]

    @property
    def visible(self) -> np.ndarray:
        return self.order[:, : self.n - self.num_masked]

    @property
    def masked_positions(self) -> np.ndarray:
        return self.order[:, self.n - self.num_masked:]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.order.shape, dtype=bool)
        np.put_along_axis(m, self.masked_positions, True, axis=1)
        return m


def sample_mask_rate(g: np.random.Generator, config: Stage2Config, size=None):
    a = (config.mask_lo - config.mask_mean) / config.mask_std
    b = (config.mask_hi - config.mask_mean) / config.mask_std
    u = g.random(size)
    return truncnorm.ppf(u, a, b, loc=config.mask_mean, scale=config.mask_std)


def draw_mask_plan(g: np.random.Generator, h: int, w: int, config: Stage2Config, batch: int = 1,
                   mask_rate: float | None = None) -> MaskPlan:
    """One mask rate for the batch, one uniformly random order per sample."""
    n = h * w
    m_r = float(sample_mask_rate(g, config)) if mask_rate is None else float(mask_rate)
    orders = np.stack([g.permutation(n) for _ in range(batch)])
    return MaskPlan(orders, int(round(m_r * n)))


class Stage2Model:
    def __init__(self, config: Stage2Config, seed: int = 0, discrete_table: np.ndarray | None = None):
        self.config = cfg = config
        g = rngmod.stream(seed, "stage2-init")
        ps = self.params = L.ParamStore()
        D, n = cfg.width, cfg.n
        n_prefix = cfg.prefix + cfg.n_queries
        ps.add("cls_emb", L.normal(g, cfg.C + 1, D))
        ps.add("z_in.w", L.normal(g, cfg.d, D, std=1.0 / math.sqrt(cfg.d)))
        ps.add("z_in.b", np.zeros(D))
        ps.add("enc_pos", L.normal(g, n_prefix + n, D))
        ps.add("mask_token", L.normal(g, D))
        ps.add("dec_pos", L.normal(g, n_prefix + n, D))
        for i in range(cfg.enc_layers):
            self._init_block(g, f"enc.{i}")
        L.init_norm(ps, "enc_norm", D)
        for i in range(cfg.dec_layers):
            self._init_block(g, f"dec.{i}")
        L.init_norm(ps, "dec_norm", D)
        ps.add("out.w", L.normal(g, D, cfg.cond_dim, std=1.0 / math.sqrt(D)))
        ps.add("out.b", np.zeros(cfg.cond_dim))
        if cfg.fusion != "none":
            if discrete_table is None:
                discrete_table = L.normal(g, cfg.K, cfg.discrete_dim)
            if discrete_table.shape != (cfg.K, cfg.discrete_dim):
                raise ConfigError(f"discrete table {discrete_table.shape} != ({cfg.K}, {cfg.discrete_dim})")
            ps.add("disc.emb", np.array(discrete_table), trainable=False)
            ps.add("disc.proj.w", L.normal(g, cfg.discrete_dim, D))
            ps.add("disc.proj.b", np.zeros(D))
            ps.add("disc.pos", L.normal(g, n, D))
            ps.add("disc.fake", L.normal(g, n, D))
        if cfg.fusion == "q_former":
            self._init_qformer(g)

    # ------------------------------------------------------------------ init

    def _init_block(self, g, p: str) -> None:
        cfg, ps = self.config, self.params
        L.init_norm(ps, f"{p}.norm1", cfg.width)
        L.init_attention(ps, g, f"{p}.attn", cfg.width)
        if cfg.fusion == "cross_attention":
            L.init_norm(ps, f"{p}.norm_x", cfg.width)
            L.init_attention(ps, g, f"{p}.xattn", cfg.width)
        L.init_norm(ps, f"{p}.norm2", cfg.width)
        L.init_ffn(ps, g, f"{p}.ffn", cfg.width, cfg.ffn)

    def _init_qformer(self, g) -> None:
        cfg, ps = self.config, self.params
        D, dq = cfg.width, cfg.query_dim
        ps.add("qformer.query", L.normal(g, cfg.queries, dq))
        if cfg.qformer_arch == "encoder_decoder":
            for i in range(cfg.qformer_layers):
                p = f"qformer.enc.{i}"
                L.init_norm(ps, f"{p}.norm1", D)
                L.init_attention(ps, g, f"{p}.attn", D)
                L.init_norm(ps, f"{p}.norm2", D)
                L.init_ffn(ps, g, f"{p}.ffn", D, cfg.ffn)
            L.init_norm(ps, "qformer.enc_norm", D)
        for i in range(cfg.qformer_layers):
            p = f"qformer.dec.{i}"
            L.init_norm(ps, f"{p}.norm1", dq)
            L.init_attention(ps, g, f"{p}.attn", dq)
            L.init_norm(ps, f"{p}.norm_x", dq)
            L.init_attention(ps, g, f"{p}.xattn", dq, d_kv=D)
            L.init_norm(ps, f"{p}.norm2", dq)
            L.init_ffn(ps, g, f"{p}.ffn", dq, L.ffn_hidden(dq))
        L.init_norm(ps, "qformer.out_norm", dq)
        ps.add("qformer.out", L.normal(g, dq, D))

    def qformer_param_count(self) -> int:
        return sum(t.size for k, t in self.params.items() if k.startswith("qformer."))

    # --------------------------------------------------------------- pieces

    def embed_discrete(self, tokens) -> Tensor:
        """``Linear(Embed(q)) + pos`` with the embedding table frozen: (B, n, D)."""
        ps, cfg = self.params, self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != cfg.n:
            raise InputError(f"token grid has {tokens.shape[1]} cells, expected {cfg.n}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.K):
            raise InputError(f"token index outside [0, {cfg.K})")
        e = ad.embedding(ps["disc.emb"], tokens)
        return L.linear(e, ps["disc.proj.w"], ps["disc.proj.b"]) + ps["disc.pos"]

    def discrete_states(self, tokens, drop: np.ndarray) -> Tensor:
        """Discrete hidden states; dropped samples get the learnable fake states.

        Token grids of dropped samples are never read.
        """
        B = len(drop)
        keep = np.flatnonzero(~drop)
        fake = self.params["disc.fake"].reshape(1, self.config.n, self.config.width)
        if len(keep) == 0:
            return ad.take(fake, np.zeros(B, dtype=np.int64))
        real = self.embed_discrete(np.asarray(tokens)[keep])
        stacked = ad.concat([real, fake], axis=0)
        slot = np.full(B, len(keep), dtype=np.int64)
        slot[keep] = np.arange(len(keep))
        return ad.take(stacked, slot)

    def qformer_refine(self, h_q: Tensor) -> Tensor:
        """Compress discrete states (B, n, D) into L query outputs (B, L, D)."""
        ps, cfg = self.params, self.config
        B = h_q.shape[0]
        memory = h_q
        if cfg.qformer_arch == "encoder_decoder":
            for i in range(cfg.qformer_layers):
                p = f"qformer.enc.{i}"
                a = L.norm(ps, f"{p}.norm1", memory)
                memory = memory + L.attention(ps, f"{p}.attn", a, a, cfg.heads)
                memory = memory + L.ffn(ps, f"{p}.ffn", L.norm(ps, f"{p}.norm2", memory))
            memory = L.norm(ps, "qformer.enc_norm", memory)
        q = ps["qformer.query"].reshape(1, cfg.queries, cfg.query_dim) + np.zeros((B, 1, 1))
        for i in range(cfg.qformer_layers):
            p = f"qformer.dec.{i}"
            a = L.norm(ps, f"{p}.norm1", q)
            q = q + L.attention(ps, f"{p}.attn", a, a, cfg.heads)
            q = q + L.attention(ps, f"{p}.xattn", L.norm(ps, f"{p}.norm_x", q), memory, cfg.heads)
            q = q + L.ffn(ps, f"{p}.ffn", L.norm(ps, f"{p}.norm2", q))
        return ad.matmul(L.norm(ps, "qformer.out_norm", q), ps["qformer.out"])

    def fuse_cross_attention(self, prefix: str, h_c: Tensor, h_q: Tensor) -> Tensor:
        """Pre-normalized cross-attention from continuous states into discrete states, residual."""
        ps = self.params
        a = L.norm(ps, f"{prefix}.norm_x", h_c)
        return h_c + L.attention(ps, f"{prefix}.xattn", a, h_q, self.config.heads)

    def _block(self, p: str, x: Tensor, h_q: Tensor | None) -> Tensor:
        ps, cfg = self.params, self.config
        a = L.norm(ps, f"{p}.norm1", x)
        x = x + L.attention(ps, f"{p}.attn", a, a, cfg.heads)
        if cfg.fusion == "cross_attention":
            x = self.fuse_cross_attention(p, x, h_q)
        return x + L.ffn(ps, f"{p}.ffn", L.norm(ps, f"{p}.norm2", x))

    # --------------------------------------------------------------- forward

    def forward_condition(self, classes, latents, plan: MaskPlan, tokens=None, drop=None,
                          _trace: dict | None = None) -> Tensor:
        """Condition vectors (B, n, cond_dim) for every grid cell.

        ``drop`` (bool per sample) swaps in the fake class and fake discrete
        states; the class id and token grid of dropped samples are not read.
        Only rows at ``plan.masked_positions`` are meaningful to callers.
        """
        ps, cfg = self.params, self.config
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim == 2:
            latents = latents[None]
        B, n = latents.shape[0], cfg.n
        if latents.shape[1:] != (n, cfg.d):
            raise InputError(f"latent grid shape {latents.shape[1:]} != {(n, cfg.d)}")
        if plan.order.shape != (B, n):
            raise InputError(f"mask plan shape {plan.order.shape} does not match batch {(B, n)}")
        drop = np.zeros(B, dtype=bool) if drop is None else np.broadcast_to(np.asarray(drop, dtype=bool), (B,))
        cls_in = np.zeros(B, dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64).reshape(-1)
        live = cls_in[~drop]
        if live.size and (live.min() < 0 or live.max() >= cfg.C):
            raise InputError(f"class id outside [0, {cfg.C})")
        cls_ids = np.where(drop, cfg.fake_class, cls_in)

        h_q = None
        if cfg.fusion != "none":
            if tokens is None and not drop.all():
                raise InputError("this fusion kind needs a discrete token grid")
            h_q = self.discrete_states(tokens, drop)

        n_pre = cfg.prefix + cfg.n_queries
        vis = plan.visible
        V = vis.shape[1]
        parts = [ad.embedding(ps["cls_emb"], np.repeat(cls_ids[:, None], cfg.prefix, axis=1))]
        if cfg.fusion == "q_former":
            parts.append(self.qformer_refine(h_q))
        x_vis = L.linear(np.take_along_axis(latents, vis[:, :, None], axis=1), ps["z_in.w"], ps["z_in.b"])
        parts.append(x_vis)
        x = ad.concat(parts, axis=1)
        pos_idx = np.concatenate([np.broadcast_to(np.arange(n_pre), (B, n_pre)), n_pre + vis], axis=1)
        x = x + ad.embedding(ps["enc_pos"], pos_idx)
        if _trace is not None:
            _trace["encoder_len"] = x.shape[1]
        for i in range(cfg.enc_layers):
            x = self._block(f"enc.{i}", x, h_q)
        x = L.norm(ps, "enc_norm", x)

        # scatter visible encoder rows back to their cells; mask token elsewhere
        mask_row = ps["mask_token"].reshape(1, 1, cfg.width) + np.zeros((B, 1, 1))
        ext = ad.concat([x, mask_row], axis=1)
        slot = np.full((B, n), n_pre + V, dtype=np.int64)
        np.put_along_axis(slot, vis, n_pre + np.arange(V)[None].repeat(B, 0), axis=1)
        slot = np.concatenate([np.broadcast_to(np.arange(n_pre), (B, n_pre)), slot], axis=1)
        y = ad.take(ext, (np.arange(B)[:, None], slot)) + ps["dec_pos"]
        for i in range(cfg.dec_layers):
            y = self._block(f"dec.{i}", y, h_q)
        y = L.norm(ps, "dec_norm", y)[:, n_pre:]
        return L.linear(y, ps["out.w"], ps["out.b"])


def gather_cells(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rows ``x[b, positions[b, j]]`` flattened to (B * J, F)."""
    B, J = positions.shape
    out = ad.take(x, (np.arange(B)[:, None], positions))
    return out.reshape(B * J, x.shape[-1])


def teacher_forced_probs(stage1, classes, tokens, chunk: int = 256) -> np.ndarray:
    """p(q_i | ground-truth q_<i, c) for every position, shape (N, n, K)."""
    classes = np.asarray(classes)
    tokens = np.asarray(tokens)
    out = []
    with ad.no_grad():
        for s in range(0, len(classes), chunk):
            logits = stage1.forward_logits(classes[s:s + chunk], tokens[s:s + chunk, :-1]).data
            z = logits - logits.max(axis=-1, keepdims=True)
            p = np.exp(z)
            out.append(p / p.sum(axis=-1, keepdims=True))
    return np.concatenate(out)


def sample_from_probs(probs: np.ndarray, g: np.random.Generator) -> np.ndarray:
    """Vectorized inverse-CDF categorical draws over the last axis."""
    cdf = np.cumsum(probs, axis=-1)
    u = g.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


def loss_stage2(model: Stage2Model, denoiser: DenoiserMLP, schedule: NoiseSchedule, classes, latents,
                cond_tokens, g: np.random.Generator, plan: MaskPlan | None = None,
                drop: np.ndarray | None = None, t=None, eps=None, batch_mul: int = 1) -> Tensor:
    """Diffusion loss averaged over hidden cells only.

    ``cond_tokens`` are the discrete conditioning grids (teacher-forced
    first-stage samples during training). ``plan``, ``drop``, ``t`` and
    ``eps`` are drawn from ``g`` unless injected.
    """
    cfg = model.config
    latents = np.asarray(latents, dtype=np.float64)
    B = latents.shape[0]
    if plan is None:
        plan = draw_mask_plan(g, cfg.h, cfg.w, cfg, batch=B)
    if plan.num_masked == 0:
        raise ContractError("no masked positions: the loss average is undefined")
    if drop is None:
        drop = g.random(B) < cfg.p_drop
    cond = model.forward_condition(classes, latents, plan, cond_tokens, drop)
    pos = plan.masked_positions
    z = gather_cells(cond, pos)
    x0 = np.take_along_axis(latents, pos[:, :, None], axis=1).reshape(-1, cfg.d)
    if batch_mul > 1:
        z = ad.take(z, np.tile(np.arange(z.shape[0]), batch_mul))
        x0 = np.tile(x0, (batch_mul, 1))
    return diffusion_loss(denoiser, z, x0, schedule, g, t=t, eps=eps)

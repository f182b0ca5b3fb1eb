"""Trajectory CVAE: latent-bottleneck encoder, endpoint prior, causal decoder.

The posterior encoder cross-attends K learned latents over the embedded
trajectory and refines them with a shared self-attention block; the
conditional prior is the same architecture (its own weights) fed only the two
endpoints at their true temporal positions. The decoder is a causal
transformer over the token sequence [x_T, x_1, x_2, ...] (the target is the
first input token so generation reads left to right from x_1), with the
latent code injected through per-layer cross-attention, and a diagonal
Gaussian head per step.

All forward passes run through the autodiff tensor ops; an equivalent
incremental numpy path with cached keys/values serves sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .distributions import DiagGaussian
from .tensor import (
    LN_EPS,
    RngStream,
    Tensor,
    add,
    default_dtype,
    layer_norm,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    softplus,
    transpose,
)
from .trajectory import Trajectory

__all__ = ["ModelConfig", "Model", "DecoderState", "LatentCode"]

_LOG_2PI = math.log(2.0 * math.pi)
_NEG_INF = -1e9  # additive attention mask; finite so the tensor checks pass


@dataclass
class ModelConfig:
    d: int
    T: int = 64
    K: int = 32
    m: int = 16
    embed_dim: int = 16
    encoder_depth: int = 3
    encoder_heads: int = 4
    decoder_layers: int = 10
    decoder_heads: int = 8
    sigma_floor: float = 1e-5
    t_max: int = 64

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.embed_dim % self.encoder_heads or self.embed_dim % self.decoder_heads:
            raise ValueError("embed_dim must be divisible by the head counts")
        if self.t_max < self.T:
            self.t_max = self.T

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class LatentCode:
    """K x m latent sequence encoding a motion; K=1 is a single vector."""

    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z)
        if self.z.ndim != 2:
            raise ValueError(f"latent must be (K, m), got {self.z.shape}")


# ---------------------------------------------------------------------------
# parameter containers


def _normal(rng: RngStream, shape, std=0.02):
    return Tensor(rng.normal(shape) * std, requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=True)


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng, d_in, d_out):
        return cls(_normal(rng, (d_in, d_out)), _zeros((d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data


@dataclass
class LayerNormP:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim):
        return cls(_ones((dim,)), _zeros((dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def np(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + LN_EPS) * self.gain.data + self.bias.data


@dataclass
class Attention:
    heads: int
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear

    @classmethod
    def create(cls, rng, q_dim, kv_dim, heads):
        return cls(
            heads,
            Linear.create(rng, q_dim, q_dim),
            Linear.create(rng, kv_dim, q_dim),
            Linear.create(rng, kv_dim, q_dim),
            Linear.create(rng, q_dim, q_dim),
        )

    def _split(self, x: Tensor, B: int, L: int) -> Tensor:
        E = x.shape[-1]
        hd = E // self.heads
        x = reshape(x, (B, L, self.heads, hd))
        x = transpose(x, (0, 2, 1, 3))
        return reshape(x, (B * self.heads, L, hd))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: Tensor | None = None) -> Tensor:
        B, Lq, E = q_in.shape
        Lkv = kv_in.shape[1]
        hd = E // self.heads
        # scale q (small) rather than the Lq x Lkv score matrix (large)
        q = mul(self._split(self.wq(q_in), B, Lq), Tensor(np.asarray(1.0 / math.sqrt(hd))))
        k = self._split(self.wk(kv_in), B, Lkv)
        v = self._split(self.wv(kv_in), B, Lkv)
        scores = matmul(q, transpose(k, (0, 2, 1)))
        if mask is not None:
            scores = add(scores, mask)
        att = softmax(scores, axis=-1)
        out = matmul(att, v)
        out = reshape(out, (B, self.heads, Lq, hd))
        out = transpose(out, (0, 2, 1, 3))
        out = reshape(out, (B, Lq, E))
        return self.wo(out)

    def np_kv(self, kv_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project context to per-head keys/values: (B, H, L, hd)."""
        B, L, _ = kv_in.shape
        E = self.wq.w.shape[0]
        hd = E // self.heads
        k = self.wk.np(kv_in).reshape(B, L, self.heads, hd).transpose(0, 2, 1, 3)
        v = self.wv.np(kv_in).reshape(B, L, self.heads, hd).transpose(0, 2, 1, 3)
        return np.ascontiguousarray(k), np.ascontiguousarray(v)

    def np_attend_one(self, q_in: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Single-query attention against cached keys/values.

        q_in: (B, E); k, v: (B, H, L, hd). Returns (B, E).
        """
        B, E = q_in.shape
        hd = E // self.heads
        q = self.wq.np(q_in).reshape(B, self.heads, 1, hd)
        scores = (q * k).sum(axis=-1) / math.sqrt(hd)  # (B, H, L)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        out = (att[..., None] * v).sum(axis=2)  # (B, H, hd)
        return self.wo.np(out.reshape(B, E))


@dataclass
class Mlp:
    """One-hidden-layer residual MLP body (relu keeps the step cheap on CPU)."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def create(cls, rng, dim, hidden):
        return cls(Linear.create(rng, dim, hidden), Linear.create(rng, hidden, dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))

    def np(self, x: np.ndarray) -> np.ndarray:
        h = self.fc1.np(x)
        return self.fc2.np(np.maximum(h, 0.0))


@dataclass
class PerceiverStack:
    """Latent-bottleneck encoder: one cross-attention read, L shared refinements."""

    h0: Tensor
    ca: Attention
    ln_ca: LayerNormP
    mlp_ca: Mlp
    ln_mlp_ca: LayerNormP
    sa: Attention
    ln_sa: LayerNormP
    mlp_sa: Mlp
    ln_mlp_sa: LayerNormP
    head_mu: Mlp
    head_sigma: Mlp
    depth: int

    @classmethod
    def create(cls, rng, cfg: ModelConfig):
        E, K, m, H = cfg.embed_dim, cfg.K, cfg.m, cfg.encoder_heads
        return cls(
            h0=_normal(rng, (K, E)),
            ca=Attention.create(rng, E, E, H),
            ln_ca=LayerNormP.create(E),
            mlp_ca=Mlp.create(rng, E, 4 * E),
            ln_mlp_ca=LayerNormP.create(E),
            sa=Attention.create(rng, E, E, H),
            ln_sa=LayerNormP.create(E),
            mlp_sa=Mlp.create(rng, E, 4 * E),
            ln_mlp_sa=LayerNormP.create(E),
            head_mu=Mlp.create(rng, E, 4 * E),
            head_sigma=Mlp.create(rng, E, 4 * E),
            depth=cfg.encoder_depth,
        )

    def __call__(self, tokens: Tensor, sigma_floor: float) -> tuple[Tensor, Tensor]:
        B = tokens.shape[0]
        K, E = self.h0.shape
        h = add(self.h0, Tensor(np.zeros((B, K, E), dtype=tokens.dtype)))
        h = self.ln_ca(add(h, self.ca(h, tokens)))
        h = self.ln_mlp_ca(add(h, self.mlp_ca(h)))
        for _ in range(self.depth):
            h = self.ln_sa(add(h, self.sa(h, h)))
            h = self.ln_mlp_sa(add(h, self.mlp_sa(h)))
        mu = self.head_mu(h)
        sigma = add(softplus(self.head_sigma(h)), Tensor(np.asarray(sigma_floor)))
        return mu, sigma


@dataclass
class DecoderLayer:
    csa: Attention
    ln1: LayerNormP
    ca: Attention
    ln2: LayerNormP
    mlp: Mlp
    ln3: LayerNormP

    @classmethod
    def create(cls, rng, cfg: ModelConfig):
        E, H = cfg.embed_dim, cfg.decoder_heads
        return cls(
            csa=Attention.create(rng, E, E, H),
            ln1=LayerNormP.create(E),
            ca=Attention.create(rng, E, cfg.m, H),
            ln2=LayerNormP.create(E),
            mlp=Mlp.create(rng, E, 4 * E),
            ln3=LayerNormP.create(E),
        )


@dataclass
class DecoderState:
    """Cached keys/values for incremental decoding; batch row = beam slot."""

    layer_kv: list  # per layer: [k, v] with shape (B, H, L, hd)
    z_kv: list  # per layer: (k_z, v_z) with shape (B, H, K, hd)
    length: int = 0
    batch: int = 1

    def select(self, rows) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.intp)
        return DecoderState(
            layer_kv=[[kv[0][rows].copy(), kv[1][rows].copy()] for kv in self.layer_kv],
            z_kv=[(zk[rows].copy(), zv[rows].copy()) for zk, zv in self.z_kv],
            length=self.length,
            batch=len(rows),
        )


class Model:
    """Bundles config and parameters; forward passes for training and sampling."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = RngStream(seed, path=(0xE,))
        E = cfg.embed_dim
        self.embed_w = _normal(rng, (cfg.d, E))
        self.embed_tau = _normal(rng, (cfg.t_max, E))
        self.encoder = PerceiverStack.create(rng, cfg)
        self.prior_net = PerceiverStack.create(rng, cfg)
        self.dec_layers = [DecoderLayer.create(rng, cfg) for _ in range(cfg.decoder_layers)]
        self.dec_head_mu = Mlp.create(rng, E, 4 * E)
        self.dec_head_sigma = Mlp.create(rng, E, 4 * E)
        # output heads map embed_dim -> d / m through their second linear
        self.dec_head_mu.fc2 = Linear.create(rng, 4 * E, cfg.d)
        self.dec_head_sigma.fc2 = Linear.create(rng, 4 * E, cfg.d)
        self.encoder.head_mu.fc2 = Linear.create(rng, 4 * E, cfg.m)
        self.encoder.head_sigma.fc2 = Linear.create(rng, 4 * E, cfg.m)
        self.prior_net.head_mu.fc2 = Linear.create(rng, 4 * E, cfg.m)
        self.prior_net.head_sigma.fc2 = Linear.create(rng, 4 * E, cfg.m)
        # start sigma heads near 0.1 rather than softplus(0) ~ 0.69: an
        # informative latent from the first steps speeds encoder learning
        sigma_bias = math.log(math.expm1(0.1))
        for head in (self.dec_head_sigma, self.encoder.head_sigma, self.prior_net.head_sigma):
            head.fc2.b.data = np.full_like(head.fc2.b.data, sigma_bias)

    # -- parameter walking ---------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed.w": self.embed_w, "embed.tau": self.embed_tau}

        def walk(prefix, obj):
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif isinstance(obj, (Linear, LayerNormP, Attention, Mlp, PerceiverStack, DecoderLayer)):
                for f in fields(obj):
                    if f.name in ("heads", "depth"):
                        continue
                    walk(f"{prefix}.{f.name}", getattr(obj, f.name))

        walk("enc", self.encoder)
        walk("prior", self.prior_net)
        for i, layer in enumerate(self.dec_layers):
            walk(f"dec.{i}", layer)
        walk("dec.head_mu", self.dec_head_mu)
        walk("dec.head_sigma", self.dec_head_sigma)
        return out

    # -- embedding -----------------------------------------------------------

    def embed(self, x: np.ndarray, t: int) -> np.ndarray:
        """Embed one setpoint at timestep t (1-based): W x + tau_t."""
        if not 1 <= t <= self.cfg.t_max:
            raise IndexError(f"timestep {t} outside 1..{self.cfg.t_max}")
        x = np.asarray(x, dtype=self.embed_w.dtype)
        return x @ self.embed_w.data + self.embed_tau.data[t - 1]

    def _embed_tokens(self, raw: np.ndarray, positions) -> Tensor:
        """raw (B, L, d), positions length-L 1-based timesteps -> (B, L, E)."""
        pos = np.asarray(positions, dtype=np.intp) - 1
        if pos.min() < 0 or pos.max() >= self.cfg.t_max:
            raise IndexError(f"positions outside 1..{self.cfg.t_max}")
        raw_t = Tensor(np.asarray(raw, dtype=default_dtype()))
        # gather tau rows via a constant one-hot matmul; keeps the graph simple
        onehot = np.zeros((len(positions), self.cfg.t_max), dtype=default_dtype())
        onehot[np.arange(len(positions)), pos] = 1.0
        tau_rows = matmul(Tensor(onehot), self.embed_tau)
        return add(matmul(raw_t, self.embed_w), tau_rows)

    # -- encoder / prior -----------------------------------------------------

    def encode_t(self, batch: np.ndarray) -> tuple[Tensor, Tensor]:
        """batch (B, T, d) -> posterior (mu, sigma) Tensors of shape (B, K, m)."""
        B, T, _ = batch.shape
        tokens = self._embed_tokens(batch, list(range(1, T + 1)))
        return self.encoder(tokens, self.cfg.sigma_floor)

    def prior_t(self, x1: np.ndarray, xT: np.ndarray, T: int | None = None) -> tuple[Tensor, Tensor]:
        """Endpoint pair -> prior (mu, sigma); x1 sits at position 1, xT at T."""
        T = T or self.cfg.T
        x1 = np.atleast_2d(x1)
        xT = np.atleast_2d(xT)
        raw = np.stack([x1, xT], axis=1)  # (B, 2, d)
        tokens = self._embed_tokens(raw, [1, T])
        return self.prior_net(tokens, self.cfg.sigma_floor)

    def encode(self, traj: Trajectory | np.ndarray) -> DiagGaussian:
        pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj)
        with no_grad():
            mu, sigma = self.encode_t(pts[None])
        return DiagGaussian(mu.data[0].astype(np.float64), sigma.data[0].astype(np.float64))

    def prior(self, x1, xT, T: int | None = None) -> DiagGaussian:
        with no_grad():
            mu, sigma = self.prior_t(np.asarray(x1), np.asarray(xT), T=T)
        return DiagGaussian(mu.data[0].astype(np.float64), sigma.data[0].astype(np.float64))

    # -- decoder (full sequence, differentiable) ------------------------------

    def _causal_mask(self, L: int) -> Tensor:
        mask = np.triu(np.full((L, L), _NEG_INF, dtype=default_dtype()), k=1)
        return Tensor(mask)

    def decoder_forward_t(self, tokens_raw: np.ndarray, positions, z: Tensor) -> tuple[Tensor, Tensor]:
        """tokens_raw (B, L, d) ordered [x_T, x_1, ...]; z (B, K, m) Tensor."""
        B, L, _ = tokens_raw.shape
        h = self._embed_tokens(tokens_raw, positions)
        mask = self._causal_mask(L)
        for layer in self.dec_layers:
            h = layer.ln1(add(h, layer.csa(h, h, mask)))
            h = layer.ln2(add(h, layer.ca(h, z)))
            h = layer.ln3(add(h, layer.mlp(h)))
        mu = self.dec_head_mu(h)
        sigma = add(
            softplus(self.dec_head_sigma(h)),
            Tensor(np.asarray(self.cfg.sigma_floor)),
        )
        return mu, sigma

    @staticmethod
    def decoder_token_layout(points: np.ndarray) -> tuple[np.ndarray, list[int]]:
        """Teacher-forcing layout: [x_T, x_1 .. x_{T-2}] with true positions."""
        T = points.shape[-2]
        raw = np.concatenate([points[..., -1:, :], points[..., : T - 2, :]], axis=-2)
        positions = [T] + list(range(1, T - 1))
        return raw, positions

    def decode_step(self, prefix: np.ndarray, x1, xT, z: LatentCode | np.ndarray) -> DiagGaussian:
        """Predictive Gaussian for the next setpoint after the given prefix.

        prefix (n, d) must start at x1 (n >= 1); output depends only on
        tokens at positions <= n plus the endpoint token.
        """
        prefix = np.atleast_2d(np.asarray(prefix))
        if prefix.shape[0] < 1:
            raise ValueError("prefix must contain at least x1")
        if prefix.shape[0] + 1 > self.cfg.t_max:
            raise ValueError("prefix exceeds t_max")
        zarr = z.z if isinstance(z, LatentCode) else np.asarray(z)
        T = self.cfg.T
        raw = np.concatenate([np.asarray(xT)[None], prefix], axis=0)[None]
        positions = [T] + list(range(1, prefix.shape[0] + 1))
        with no_grad():
            mu, sigma = self.decoder_forward_t(raw, positions, Tensor(zarr[None]))
        return DiagGaussian(
            mu.data[0, -1].astype(np.float64), sigma.data[0, -1].astype(np.float64)
        )

    # -- decoder (incremental numpy path) -------------------------------------

    def init_decode(self, z: np.ndarray) -> DecoderState:
        """z (B, K, m) -> state with per-layer latent keys/values cached."""
        z = np.asarray(z, dtype=default_dtype())
        if z.ndim == 2:
            z = z[None]
        B = z.shape[0]
        E, H = self.cfg.embed_dim, self.cfg.decoder_heads
        hd = E // H
        z_kv = [layer.ca.np_kv(z) for layer in self.dec_layers]
        layer_kv = [
            [np.empty((B, H, 0, hd), dtype=z.dtype), np.empty((B, H, 0, hd), dtype=z.dtype)]
            for _ in self.dec_layers
        ]
        return DecoderState(layer_kv=layer_kv, z_kv=z_kv, batch=B)

    def decode_append(self, state: DecoderState, token_raw: np.ndarray, position: int) -> tuple[np.ndarray, np.ndarray]:
        """Append one token per batch row; return its head (mu, sigma).

        token_raw (B, d); position is the 1-based timestep of this token.
        """
        B = state.batch
        E, H = self.cfg.embed_dim, self.cfg.decoder_heads
        hd = E // H
        x = np.asarray(token_raw, dtype=default_dtype()).reshape(B, self.cfg.d)
        h = x @ self.embed_w.data + self.embed_tau.data[position - 1]
        for i, layer in enumerate(self.dec_layers):
            kv = state.layer_kv[i]
            k_new = layer.csa.wk.np(h).reshape(B, 1, H, hd).transpose(0, 2, 1, 3)
            v_new = layer.csa.wv.np(h).reshape(B, 1, H, hd).transpose(0, 2, 1, 3)
            kv[0] = np.concatenate([kv[0], k_new], axis=2)
            kv[1] = np.concatenate([kv[1], v_new], axis=2)
            h = layer.ln1.np(h + layer.csa.np_attend_one(h, kv[0], kv[1]))
            zk, zv = state.z_kv[i]
            h = layer.ln2.np(h + layer.ca.np_attend_one(h, zk, zv))
            h = layer.ln3.np(h + layer.mlp.np(h))
        state.length += 1
        mu = self.dec_head_mu.np(h)
        sigma = np.logaddexp(0.0, self.dec_head_sigma.np(h)) + self.cfg.sigma_floor
        return mu.astype(np.float64), sigma.astype(np.float64)

    def begin_rollout(self, x1, xT, z, T: int | None = None) -> tuple[DecoderState, np.ndarray, np.ndarray]:
        """Prime an incremental decode with [x_T, x_1]; returns (state, mu, sigma) for x_2."""
        T = T or self.cfg.T
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
        xT = np.atleast_2d(np.asarray(xT, dtype=np.float64))
        z = np.asarray(z)
        if z.ndim == 2:
            z = z[None]
        state = self.init_decode(z)
        self.decode_append(state, xT, T)
        mu, sigma = self.decode_append(state, x1, 1)
        return state, mu, sigma

    def rollout(self, x1, xT, z, T: int | None = None, rng: RngStream | None = None,
                temperature: float = 1.0) -> np.ndarray:
        """Autoregressive generation of x_2..x_{T-1} between fixed endpoints.

        Returns (T, d) float64 points for a single query or (B, T, d) when
        the inputs are batched. Sampling std is temperature * sigma.
        """
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        if rng is None:
            raise ValueError("rollout requires an RngStream")
        T = T or self.cfg.T
        x1a = np.asarray(x1, dtype=np.float64)
        batched = x1a.ndim == 2
        x1b = np.atleast_2d(x1a)
        xTb = np.atleast_2d(np.asarray(xT, dtype=np.float64))
        B = x1b.shape[0]
        state, mu, sigma = self.begin_rollout(x1b, xTb, z, T=T)
        points = np.empty((B, T, self.cfg.d), dtype=np.float64)
        points[:, 0] = x1b
        points[:, T - 1] = xTb
        for t in range(2, T):
            eps = rng.normal((B, self.cfg.d), dtype=np.float64)
            x = mu + temperature * sigma * eps
            points[:, t - 1] = x
            if t < T - 1:
                mu, sigma = self.decode_append(state, x, t)
        return points if batched else points[0]

    # -- likelihood / rollout --------------------------------------------------

    def log_likelihood(self, traj: Trajectory | np.ndarray, x1, xT, z) -> float:
        """Teacher-forced sum of per-step Gaussian log-densities over x_2..x_{T-1}."""
        pts = np.asarray(traj.points if isinstance(traj, Trajectory) else traj, dtype=np.float64)
        T = pts.shape[0]
        zarr = z.z if isinstance(z, LatentCode) else np.asarray(z)
        body = pts.copy()
        body[0] = np.asarray(x1, dtype=np.float64)
        body[-1] = np.asarray(xT, dtype=np.float64)
        raw, positions = self.decoder_token_layout(body[None])
        with no_grad():
            mu, sigma = self.decoder_forward_t(raw, positions, Tensor(zarr[None]))
        mu = mu.data[0, 1:].astype(np.float64)
        sigma = sigma.data[0, 1:].astype(np.float64)
        targets = pts[1 : T - 1]
        zsc = (targets - mu) / sigma
        return float((-0.5 * zsc * zsc - np.log(sigma) - 0.5 * _LOG_2PI).sum())

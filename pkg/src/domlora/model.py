"""Miniature decoder-only transformer with exact per-projection weight gradients.

The architecture is deliberately plain: learned absolute position embeddings,
pre-normalization (RMS with learnable gain), causal multi-head attention, a
gated SiLU feed-forward block, and no biases anywhere.  Every layer exposes
seven candidate projection sites (Q, K, V, O, Up, Gate, Down); the backward
pass returns the exact loss gradient for any requested subset of them, which
is what the sensitivity probe consumes.

All math is float64 on single sequences; batching is a loop at the call site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .linalg import RngState
from .serialize import load_arrays, save_arrays

RMS_EPS = 1e-6


class ProjKind(Enum):
    Q = "Q"
    K = "K"
    V = "V"
    O = "O"
    UP = "Up"
    GATE = "Gate"
    DOWN = "Down"

    def __str__(self) -> str:
        return self.value


PROJ_KINDS: tuple[ProjKind, ...] = tuple(ProjKind)
_KIND_INDEX = {k: i for i, k in enumerate(PROJ_KINDS)}
_KIND_FROM_VALUE = {k.value: k for k in PROJ_KINDS}
_KIND_FROM_LOWER = {k.value.lower(): k for k in PROJ_KINDS}


def parse_kind(name: str) -> ProjKind:
    try:
        return _KIND_FROM_LOWER[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown projection kind {name!r}; expected one of "
                         f"{[k.value for k in PROJ_KINDS]}") from None


@dataclass(frozen=True)
class ModuleId:
    """Address of one candidate adapter site: (layer index, projection kind)."""

    layer: int
    kind: ProjKind

    @property
    def name(self) -> str:
        return f"L{self.layer}.{self.kind.value}"

    def __str__(self) -> str:
        return self.name

    @staticmethod
    def parse(name: str) -> "ModuleId":
        layer_part, _, kind_part = name.partition(".")
        if not layer_part.startswith("L") or not kind_part:
            raise ValueError(f"bad module name {name!r}; expected 'L<layer>.<kind>'")
        return ModuleId(int(layer_part[1:]), _KIND_FROM_VALUE[kind_part])


def module_sort_key(module: ModuleId) -> tuple[int, int]:
    return (module.layer, _KIND_INDEX[module.kind])


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 96
    vocab_size: int = 64
    max_seq_len: int = 64

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in d.items()})


def projection_shape(config: ModelConfig, kind: ProjKind) -> tuple[int, int]:
    """(d_out, d_in) of one projection; weights act as y = x @ W.T."""
    d, f = config.d_model, config.d_ff
    if kind in (ProjKind.Q, ProjKind.K, ProjKind.V, ProjKind.O):
        return (d, d)
    if kind in (ProjKind.UP, ProjKind.GATE):
        return (f, d)
    return (d, f)  # Down


def input_dim(config: ModelConfig, module: ModuleId) -> int:
    return projection_shape(config, module.kind)[1]


def candidate_modules(config: ModelConfig) -> list[ModuleId]:
    """All adapter sites, layer-major then kind order; 7 per layer."""
    return [ModuleId(l, k) for l in range(config.n_layers) for k in PROJ_KINDS]


def input_dims(config: ModelConfig) -> dict[ModuleId, int]:
    return {m: input_dim(config, m) for m in candidate_modules(config)}


@dataclass
class ModelParams:
    """All model weights.  Arrays are treated as immutable by the forward and
    backward passes; only optimizers write into them."""

    config: ModelConfig
    embed: np.ndarray       # (vocab, d_model)
    pos: np.ndarray         # (max_seq_len, d_model)
    unembed: np.ndarray     # (vocab, d_model)
    attn_gain: np.ndarray   # (n_layers, d_model)
    ffn_gain: np.ndarray    # (n_layers, d_model)
    final_gain: np.ndarray  # (d_model,)
    proj: dict[ModuleId, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            embed=self.embed.copy(), pos=self.pos.copy(), unembed=self.unembed.copy(),
            attn_gain=self.attn_gain.copy(), ffn_gain=self.ffn_gain.copy(),
            final_gain=self.final_gain.copy(),
            proj={m: w.copy() for m, w in self.proj.items()},
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Stable name -> array mapping used by optimizers and checkpoints."""
        out: dict[str, np.ndarray] = {
            "embed": self.embed, "pos": self.pos, "unembed": self.unembed,
            "final_gain": self.final_gain,
        }
        for l in range(self.config.n_layers):
            out[f"L{l}.attn_gain"] = self.attn_gain[l]
            out[f"L{l}.ffn_gain"] = self.ffn_gain[l]
        for m in sorted(self.proj, key=module_sort_key):
            out[m.name] = self.proj[m]
        return out


def init_params(config: ModelConfig, rng: RngState, embed_scale: float = 0.02) -> ModelParams:
    """Random initialization: uniform +-1/sqrt(d_in) projections, small normal
    embeddings, unit gains."""
    gen = rng.generator()
    d = config.d_model
    proj = {}
    for m in candidate_modules(config):
        d_out, d_in = projection_shape(config, m.kind)
        bound = 1.0 / np.sqrt(d_in)
        proj[m] = gen.uniform(-bound, bound, size=(d_out, d_in))
    return ModelParams(
        config=config,
        embed=gen.normal(0.0, embed_scale, size=(config.vocab_size, d)),
        pos=gen.normal(0.0, embed_scale, size=(config.max_seq_len, d)),
        unembed=gen.normal(0.0, embed_scale, size=(config.vocab_size, d)),
        attn_gain=np.ones((config.n_layers, d)),
        ffn_gain=np.ones((config.n_layers, d)),
        final_gain=np.ones(d),
        proj=proj,
    )


def zeros_params(config: ModelConfig) -> ModelParams:
    d = config.d_model
    proj = {m: np.zeros(projection_shape(config, m.kind)) for m in candidate_modules(config)}
    return ModelParams(
        config=config,
        embed=np.zeros((config.vocab_size, d)),
        pos=np.zeros((config.max_seq_len, d)),
        unembed=np.zeros((config.vocab_size, d)),
        attn_gain=np.zeros((config.n_layers, d)),
        ffn_gain=np.zeros((config.n_layers, d)),
        final_gain=np.zeros(d),
        proj=proj,
    )


# --- activation helpers -----------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _rmsnorm_forward(x: np.ndarray, gain: np.ndarray):
    ms = np.mean(x * x, axis=-1, keepdims=True)       # (S, 1)
    inv = 1.0 / np.sqrt(ms + RMS_EPS)
    xhat = x * inv
    return xhat * gain, (x, inv, xhat)


def _rmsnorm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    x, inv, xhat = cache
    d = x.shape[-1]
    dgain = np.sum(dy * xhat, axis=0)
    dxhat = dy * gain
    # xhat = x * inv with inv = (mean(x^2) + eps)^(-1/2)
    dot = np.sum(dxhat * x, axis=-1, keepdims=True)
    dx = dxhat * inv - x * (dot * inv**3 / d)
    return dx, dgain


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=-1, keepdims=True)


# --- forward / backward ------------------------------------------------------

@dataclass
class ForwardCache:
    params: ModelParams
    tokens: np.ndarray
    layers: list[dict]
    final_norm: tuple
    x_final: np.ndarray


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("tokens must be a nonempty 1-D sequence")
    if t.size > config.max_seq_len:
        raise ValueError(f"sequence length {t.size} exceeds max_seq_len {config.max_seq_len}")
    if (t < 0).any() or (t >= config.vocab_size).any():
        raise ValueError("token id out of range")
    return t


def forward(params: ModelParams, tokens) -> tuple[np.ndarray, ForwardCache]:
    """Run the decoder on one token sequence.

    Returns per-position logits of shape (seq_len, vocab_size) and the
    activation cache needed for an exact backward pass.
    """
    cfg = params.config
    t = _check_tokens(cfg, tokens)
    S, H, hd = t.size, cfg.n_heads, cfg.head_dim
    causal = np.triu(np.ones((S, S), dtype=bool), k=1)

    x = params.embed[t] + params.pos[:S]              # (S, d)
    layer_caches = []
    for l in range(cfg.n_layers):
        c: dict = {"x_in": x}
        a, c["attn_norm"] = _rmsnorm_forward(x, params.attn_gain[l])
        c["a"] = a
        q = a @ params.proj[ModuleId(l, ProjKind.Q)].T    # (S, d)
        k = a @ params.proj[ModuleId(l, ProjKind.K)].T
        v = a @ params.proj[ModuleId(l, ProjKind.V)].T
        qh = q.reshape(S, H, hd).transpose(1, 0, 2)       # (H, S, hd)
        kh = k.reshape(S, H, hd).transpose(1, 0, 2)
        vh = v.reshape(S, H, hd).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(hd)  # (H, S, S)
        scores[:, causal] = -np.inf
        p = _softmax_rows(scores)
        ctx = p @ vh                                       # (H, S, hd)
        ctx2 = ctx.transpose(1, 0, 2).reshape(S, cfg.d_model)
        attn_out = ctx2 @ params.proj[ModuleId(l, ProjKind.O)].T
        c.update(qh=qh, kh=kh, vh=vh, p=p, ctx2=ctx2)
        x = x + attn_out

        c["x_mid"] = x
        f, c["ffn_norm"] = _rmsnorm_forward(x, params.ffn_gain[l])
        c["f"] = f
        g = f @ params.proj[ModuleId(l, ProjKind.GATE)].T  # (S, d_ff)
        u = f @ params.proj[ModuleId(l, ProjKind.UP)].T
        sig = _sigmoid(g)
        h = (g * sig) * u                                  # SiLU(gate) * up
        ffn_out = h @ params.proj[ModuleId(l, ProjKind.DOWN)].T
        c.update(g=g, u=u, sig=sig, h=h)
        x = x + ffn_out
        layer_caches.append(c)

    x_final, final_norm = _rmsnorm_forward(x, params.final_gain)
    logits = x_final @ params.unembed.T                    # (S, vocab)
    return logits, ForwardCache(params, t, layer_caches, final_norm, x_final)


@dataclass
class FullGradients:
    """Exact loss gradients for every parameter array, keyed like ModelParams."""

    embed: np.ndarray
    pos: np.ndarray
    unembed: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray
    final_gain: np.ndarray
    proj: dict[ModuleId, np.ndarray]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "embed": self.embed, "pos": self.pos, "unembed": self.unembed,
            "final_gain": self.final_gain,
        }
        for l in range(self.attn_gain.shape[0]):
            out[f"L{l}.attn_gain"] = self.attn_gain[l]
            out[f"L{l}.ffn_gain"] = self.ffn_gain[l]
        for m in sorted(self.proj, key=module_sort_key):
            out[m.name] = self.proj[m]
        return out


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> FullGradients:
    """Exact reverse-mode gradients of a scalar loss given d(loss)/d(logits)."""
    if cache.params is not params:
        raise ValueError("cache does not belong to these parameters")
    cfg = params.config
    t = cache.tokens
    S, H, hd = t.size, cfg.n_heads, cfg.head_dim
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (S, cfg.vocab_size):
        raise ValueError(f"dlogits shape {dlogits.shape} != {(S, cfg.vocab_size)}")

    d_unembed = dlogits.T @ cache.x_final
    dx = dlogits @ params.unembed                          # grad at final norm output
    dx, d_final_gain = _rmsnorm_backward(dx, params.final_gain, cache.final_norm)

    d_attn_gain = np.zeros_like(params.attn_gain)
    d_ffn_gain = np.zeros_like(params.ffn_gain)
    d_proj: dict[ModuleId, np.ndarray] = {}

    for l in reversed(range(cfg.n_layers)):
        c = cache.layers[l]
        w_down = params.proj[ModuleId(l, ProjKind.DOWN)]
        w_gate = params.proj[ModuleId(l, ProjKind.GATE)]
        w_up = params.proj[ModuleId(l, ProjKind.UP)]

        # x_out = x_mid + h @ W_down.T
        d_ffn_out = dx
        d_proj[ModuleId(l, ProjKind.DOWN)] = d_ffn_out.T @ c["h"]
        dh = d_ffn_out @ w_down                            # (S, d_ff)
        g, u, sig = c["g"], c["u"], c["sig"]
        silu = g * sig
        du = dh * silu
        dg = dh * u * (sig * (1.0 + g * (1.0 - sig)))      # dSiLU
        d_proj[ModuleId(l, ProjKind.GATE)] = dg.T @ c["f"]
        d_proj[ModuleId(l, ProjKind.UP)] = du.T @ c["f"]
        df = dg @ w_gate + du @ w_up
        d_from_norm, d_ffn_gain[l] = _rmsnorm_backward(df, params.ffn_gain[l], c["ffn_norm"])
        dx = dx + d_from_norm                              # grad at x_mid

        # x_mid = x_in + ctx2 @ W_o.T
        w_q = params.proj[ModuleId(l, ProjKind.Q)]
        w_k = params.proj[ModuleId(l, ProjKind.K)]
        w_v = params.proj[ModuleId(l, ProjKind.V)]
        w_o = params.proj[ModuleId(l, ProjKind.O)]
        d_attn_out = dx
        d_proj[ModuleId(l, ProjKind.O)] = d_attn_out.T @ c["ctx2"]
        d_ctx2 = d_attn_out @ w_o
        d_ctx = d_ctx2.reshape(S, H, hd).transpose(1, 0, 2)
        p, qh, kh, vh = c["p"], c["qh"], c["kh"], c["vh"]
        dp = d_ctx @ vh.transpose(0, 2, 1)                 # (H, S, S)
        dvh = p.transpose(0, 2, 1) @ d_ctx
        dscores = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dqh = dscores @ kh / np.sqrt(hd)
        dkh = dscores.transpose(0, 2, 1) @ qh / np.sqrt(hd)
        dq = dqh.transpose(1, 0, 2).reshape(S, cfg.d_model)
        dk = dkh.transpose(1, 0, 2).reshape(S, cfg.d_model)
        dv = dvh.transpose(1, 0, 2).reshape(S, cfg.d_model)
        a = c["a"]
        d_proj[ModuleId(l, ProjKind.Q)] = dq.T @ a
        d_proj[ModuleId(l, ProjKind.K)] = dk.T @ a
        d_proj[ModuleId(l, ProjKind.V)] = dv.T @ a
        da = dq @ w_q + dk @ w_k + dv @ w_v
        d_from_norm, d_attn_gain[l] = _rmsnorm_backward(da, params.attn_gain[l], c["attn_norm"])
        dx = dx + d_from_norm                              # grad at x_in

    d_embed = np.zeros_like(params.embed)
    np.add.at(d_embed, t, dx)
    d_pos = np.zeros_like(params.pos)
    d_pos[:S] = dx
    return FullGradients(
        embed=d_embed, pos=d_pos, unembed=d_unembed,
        attn_gain=d_attn_gain, ffn_gain=d_ffn_gain, final_gain=d_final_gain,
        proj=d_proj,
    )


GradientSet = dict[ModuleId, np.ndarray]


def backward_projection_grads(params: ModelParams, cache: ForwardCache,
                              dlogits: np.ndarray,
                              wanted: Iterable[ModuleId]) -> GradientSet:
    """Exact gradients of the scalar loss for each requested projection."""
    wanted = list(wanted)
    for m in wanted:
        if m not in params.proj:
            raise KeyError(f"model has no module {m.name}")
    full = backward(params, cache, dlogits)
    return {m: full.proj[m] for m in wanted}


# --- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Write all weights to the flat binary container (see serialize module).

    Header carries the model config; arrays are keyed 'embed', 'pos',
    'unembed', 'final_gain', 'L{l}.attn_gain', 'L{l}.ffn_gain', and
    'L{l}.{kind}' for the seven projections per layer.
    """
    save_arrays(path, {"kind": "model-checkpoint", "config": params.config.to_dict()},
                params.named_arrays())


def load_checkpoint(path) -> ModelParams:
    header, arrays = load_arrays(path)
    if header.get("kind") != "model-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    params = zeros_params(cfg)
    params.embed = arrays["embed"]
    params.pos = arrays["pos"]
    params.unembed = arrays["unembed"]
    params.final_gain = arrays["final_gain"]
    for l in range(cfg.n_layers):
        params.attn_gain[l] = arrays[f"L{l}.attn_gain"]
        params.ffn_gain[l] = arrays[f"L{l}.ffn_gain"]
    for m in candidate_modules(cfg):
        params.proj[m] = arrays[m.name]
    return params


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of every weight array."""
    na, nb = a.named_arrays(), b.named_arrays()
    if na.keys() != nb.keys():
        return False
    return all(np.array_equal(na[k], nb[k]) for k in na)

"""Decoder-only byte-level backbone: pre-norm RMSNorm blocks, causal multi-head
attention, SwiGLU FFN, learned positions, bias-free LM head.

The hidden state handed to the LM head (and cached for the projector) is the
post-final-norm state.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint


class ModelError(ValueError):
    pass


class ContextLengthError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    ffn_ratio: float = 8 / 3
    norm_eps: float = nx.RMS_EPS
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ModelError("; ".join(errs))

    def problems(self) -> list[str]:
        errs = []
        if self.vocab_size < 2:
            errs.append("vocab_size must be >= 2")
        if self.max_seq_len < 8:
            errs.append("max_seq_len must be >= 8")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            errs.append("d_model must be divisible by n_heads")
        if self.n_layers < 1:
            errs.append("n_layers must be >= 1")
        if self.ffn_ratio <= 0 or self.norm_eps <= 0:
            errs.append("ffn_ratio and norm_eps must be positive")
        return errs

    @property
    def d_ff(self) -> int:
        return int(round(self.ffn_ratio * self.d_model))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, f = cfg.d_model, cfg.vocab_size, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d),
            p + "wk": (d, d),
            p + "wv": (d, d),
            p + "wo": (d, d),
            p + "ffn_norm": (d,),
            p + "w_gate": (d, f),
            p + "w_up": (d, f),
            p + "w_down": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and float64 bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class KVCache:
    """Per-layer keys/values for one decode session, preallocated to max_seq_len."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    length: int = 0

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[0]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys) + sum(a.nbytes for a in self.values)


@dataclass
class Backbone:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig) -> "Backbone":
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("norm"):
                params[name] = np.ones(shape)
            else:
                params[name] = rng.normal(0.0, config.init_std, size=shape)
        return cls(config, params)

    def digest(self) -> str:
        return params_digest(self.params)

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.config.to_dict(), component="backbone")

    @classmethod
    def load(cls, path) -> "Backbone":
        params, config, component = load_checkpoint(path)
        if component != "backbone":
            raise CheckpointError(f"{path} holds a {component!r} checkpoint, not a backbone")
        cfg = ModelConfig(**config)
        expected = param_shapes(cfg)
        if {k: v.shape for k, v in params.items()} != expected:
            raise CheckpointError(f"{path}: parameter names/shapes do not match its config")
        return cls(cfg, params)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.params.values())

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2):
            raise ModelError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
        if tokens.shape[-1] > self.config.max_seq_len:
            raise ContextLengthError(
                f"sequence length {tokens.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ModelError(f"token id out of range [0, {self.config.vocab_size})")
        return tokens

    # -- full-sequence path ---------------------------------------------------

    def forward(self, tokens, *, keep: bool = False):
        """Causal forward over ``tokens`` of shape (T,) or (B, T).

        Returns ``(hidden, logits)`` with hidden the post-final-norm states. With
        ``keep=True`` a third element holds activations for :meth:`backward`.
        """
        tokens = self._check_tokens(tokens)
        squeeze = tokens.ndim == 1
        tok = tokens[None, :] if squeeze else tokens
        cfg, P = self.config, self.params
        B, T = tok.shape
        H, dh = cfg.n_heads, cfg.head_dim
        eps = cfg.norm_eps
        mask = np.triu(np.full((T, T), -np.inf), k=1)
        scale = 1.0 / np.sqrt(dh)

        x = P["tok_emb"][tok] + P["pos_emb"][:T]
        acts: list[dict] = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a_in = x
            a, a_inv = nx.rmsnorm(x, P[p + "attn_norm"], eps)
            q = (a @ P[p + "wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (a @ P[p + "wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = (a @ P[p + "wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) * scale + mask
            s = s - s.max(axis=-1, keepdims=True)
            probs = np.exp(s)
            probs /= probs.sum(axis=-1, keepdims=True)
            o = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + o @ P[p + "wo"]
            f_in = x
            m, m_inv = nx.rmsnorm(x, P[p + "ffn_norm"], eps)
            u = m @ P[p + "w_gate"]
            w = m @ P[p + "w_up"]
            su = nx.silu(u)
            g = su * w
            x = x + g @ P[p + "w_down"]
            if keep:
                acts.append(dict(a_in=a_in, a=a, a_inv=a_inv, q=q, k=k, v=v, probs=probs, o=o,
                                 f_in=f_in, m=m, m_inv=m_inv, u=u, w=w, su=su, g=g))
        h, h_inv = nx.rmsnorm(x, P["final_norm"], eps)
        logits = h @ P["lm_head"]
        if squeeze:
            h_out, l_out = h[0], logits[0]
        else:
            h_out, l_out = h, logits
        if keep:
            return h_out, l_out, dict(tokens=tok, acts=acts, x_final=x, h=h, h_inv=h_inv, squeeze=squeeze)
        return h_out, l_out

    def backward(self, grad_logits: np.ndarray, saved: dict, grad_hidden: np.ndarray | None = None):
        """Parameter gradients given d(loss)/d(logits) (and optionally d/d(hidden))."""
        cfg, P = self.config, self.params
        tok = saved["tokens"]
        B, T = tok.shape
        H, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(dh)
        if saved["squeeze"]:
            grad_logits = grad_logits[None]
            if grad_hidden is not None:
                grad_hidden = grad_hidden[None]
        grads: dict[str, np.ndarray] = {}

        gh, grads["lm_head"] = nx.matmul_backward(grad_logits, saved["h"], P["lm_head"])
        if grad_hidden is not None:
            gh = gh + grad_hidden
        gx, grads["final_norm"] = nx.rmsnorm_backward(gh, saved["x_final"], P["final_norm"], saved["h_inv"])

        for i in reversed(range(cfg.n_layers)):
            p = f"layers.{i}."
            c = saved["acts"][i]
            # FFN block
            gg, grads[p + "w_down"] = nx.matmul_backward(gx, c["g"], P[p + "w_down"])
            gsu, gw = nx.mul_backward(gg, c["su"], c["w"])
            gu = nx.silu_backward(gsu, c["u"])
            gm_u, grads[p + "w_gate"] = nx.matmul_backward(gu, c["m"], P[p + "w_gate"])
            gm_w, grads[p + "w_up"] = nx.matmul_backward(gw, c["m"], P[p + "w_up"])
            gfin, grads[p + "ffn_norm"] = nx.rmsnorm_backward(gm_u + gm_w, c["f_in"], P[p + "ffn_norm"], c["m_inv"])
            gx = gx + gfin
            # attention block
            go, grads[p + "wo"] = nx.matmul_backward(gx, c["o"], P[p + "wo"])
            go = go.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            gprobs = go @ c["v"].transpose(0, 1, 3, 2)
            gv = c["probs"].transpose(0, 1, 3, 2) @ go
            gs = nx.softmax_backward(gprobs, c["probs"]) * scale
            gq = gs @ c["k"]
            gk = gs.transpose(0, 1, 3, 2) @ c["q"]
            merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)  # noqa: E731
            ga_q, grads[p + "wq"] = nx.matmul_backward(merge(gq), c["a"], P[p + "wq"])
            ga_k, grads[p + "wk"] = nx.matmul_backward(merge(gk), c["a"], P[p + "wk"])
            ga_v, grads[p + "wv"] = nx.matmul_backward(merge(gv), c["a"], P[p + "wv"])
            gain, grads[p + "attn_norm"] = nx.rmsnorm_backward(
                ga_q + ga_k + ga_v, c["a_in"], P[p + "attn_norm"], c["a_inv"]
            )
            gx = gx + gain

        grads["pos_emb"] = np.zeros_like(P["pos_emb"])
        grads["pos_emb"][:T] = gx.sum(axis=0)
        grads["tok_emb"] = nx.embedding_backward(gx, tok, cfg.vocab_size)
        return grads

    # -- incremental path -----------------------------------------------------

    def new_cache(self) -> KVCache:
        cfg = self.config
        shape = (cfg.max_seq_len, cfg.d_model)
        return KVCache(
            keys=[np.zeros(shape) for _ in range(cfg.n_layers)],
            values=[np.zeros(shape) for _ in range(cfg.n_layers)],
        )

    def step(self, token: int, cache: KVCache) -> tuple[np.ndarray, np.ndarray]:
        """Consume one token at position ``cache.length``; returns ``(h_t, logits_t)``."""
        cfg, P = self.config, self.params
        t = cache.length
        if t >= cfg.max_seq_len:
            raise ContextLengthError(f"KV cache full at max_seq_len={cfg.max_seq_len}")
        token = int(token)
        if not 0 <= token < cfg.vocab_size:
            raise ModelError(f"token id {token} out of range [0, {cfg.vocab_size})")
        H, dh, eps = cfg.n_heads, cfg.head_dim, cfg.norm_eps
        scale = 1.0 / np.sqrt(dh)

        x = P["tok_emb"][token] + P["pos_emb"][t]
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a, _ = nx.rmsnorm(x, P[p + "attn_norm"], eps)
            cache.keys[i][t] = a @ P[p + "wk"]
            cache.values[i][t] = a @ P[p + "wv"]
            q = (a @ P[p + "wq"]).reshape(H, dh)
            K = cache.keys[i][: t + 1].reshape(t + 1, H, dh)
            V = cache.values[i][: t + 1].reshape(t + 1, H, dh)
            s = np.einsum("hd,thd->ht", q, K) * scale
            s = s - s.max(axis=-1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=-1, keepdims=True)
            o = np.einsum("ht,thd->hd", w, V).reshape(cfg.d_model)
            x = x + o @ P[p + "wo"]
            m, _ = nx.rmsnorm(x, P[p + "ffn_norm"], eps)
            x = x + (nx.silu(m @ P[p + "w_gate"]) * (m @ P[p + "w_up"])) @ P[p + "w_down"]
        cache.length = t + 1
        h, _ = nx.rmsnorm(x, P["final_norm"], eps)
        return h, h @ P["lm_head"]

    def logits_from_hidden(self, h: np.ndarray) -> np.ndarray:
        return h @ self.params["lm_head"]

"""Conditional multi-token projector.

One shared module maps a stale hidden state ``h`` and a step offset ``k`` to a
hidden state that the frozen LM head turns into a prediction ``k`` tokens
further ahead::

    gamma, beta = split(e_k @ W_ada + b_ada)
    h_mod = rmsnorm(h) * (1 + gamma) + beta
    out = h + W_down(silu(W_gate h_mod) * W_up h_mod)

``W_down`` starts at zero, so an untrained projector returns ``h`` unchanged and
its amateur distribution is the stale state's own next-token distribution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import Backbone, params_digest


class ProjectorError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectorConfig:
    d_model: int = 128
    max_offset: int = 3
    expansion_ratio: float = 2.7
    norm_eps: float = nx.RMS_EPS
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.max_offset < 1:
            raise ProjectorError(f"max_offset must be >= 1, got {self.max_offset}")
        if self.d_model < 1 or self.expansion_ratio <= 0:
            raise ProjectorError("d_model and expansion_ratio must be positive")

    @property
    def d_ff(self) -> int:
        # round half away from zero; Python's round() would send 0.5 to even
        return int(np.floor(self.expansion_ratio * self.d_model + 0.5))

    @property
    def d_step(self) -> int:
        return self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def projector_shapes(cfg: ProjectorConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        "step_emb": (cfg.max_offset, cfg.d_step),
        "ada_w": (cfg.d_step, 2 * d),
        "ada_b": (2 * d,),
        "norm": (d,),
        "w_gate": (d, f),
        "w_up": (d, f),
        "w_down": (f, d),
    }


def init_projector(config: ProjectorConfig, seed: int | None = None) -> "Projector":
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.d_model
    params = {}
    for name, shape in projector_shapes(config).items():
        params[name] = rng.normal(0.0, config.init_std, size=shape)
    params["ada_w"][:, :d] = 0.0  # gamma half: neutral modulation at init
    params["ada_b"][:] = 0.0
    params["norm"][:] = 1.0
    params["w_down"][:] = 0.0
    return Projector(config, params)


@dataclass
class Projector:
    config: ProjectorConfig
    params: dict[str, np.ndarray]

    def digest(self) -> str:
        return params_digest(self.params)

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.config.to_dict(), component="projector")

    @classmethod
    def load(cls, path) -> "Projector":
        params, config, component = load_checkpoint(path)
        if component != "projector":
            raise CheckpointError(f"{path} holds a {component!r} checkpoint, not a projector")
        cfg = ProjectorConfig(**config)
        if {k: v.shape for k, v in params.items()} != projector_shapes(cfg):
            raise CheckpointError(f"{path}: parameter names/shapes do not match its config")
        return cls(cfg, params)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.params.values())

    def modulation(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``(gamma, beta)`` for offset ``k``."""
        self._check_offset(k)
        d = self.config.d_model
        gb = self.params["step_emb"][k - 1] @ self.params["ada_w"] + self.params["ada_b"]
        return gb[:d], gb[d:]

    def _check_offset(self, k: int) -> None:
        if not 1 <= k <= self.config.max_offset:
            raise ProjectorError(f"offset {k} outside supported range 1..{self.config.max_offset}")

    def forward(self, h: np.ndarray, k: int, *, keep: bool = False):
        """Project hidden state(s) ``h`` of shape (..., d) for offset ``k``."""
        self._check_offset(k)
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.config.d_model:
            raise ProjectorError(f"hidden dimension {h.shape[-1]} != d_model {self.config.d_model}")
        P = self.params
        gamma, beta = self.modulation(k)
        n, inv = nx.rmsnorm(h, P["norm"], self.config.norm_eps)
        hm = n * (1.0 + gamma) + beta
        u = hm @ P["w_gate"]
        v = hm @ P["w_up"]
        su = nx.silu(u)
        f = su * v
        out = h + f @ P["w_down"]
        if keep:
            return out, dict(k=k, h=h, n=n, inv=inv, gamma=gamma, hm=hm, u=u, v=v, su=su, f=f)
        return out

    def plan(self) -> "DecodePlan":
        return DecodePlan(self)

    def backward(self, grad_out: np.ndarray, saved: dict) -> dict[str, np.ndarray]:
        """Gradients for every projector array. The input ``h`` gets none: the
        backbone is frozen."""
        P, d = self.params, self.config.d_model
        k = saved["k"]
        g2 = grad_out.reshape(-1, d)
        grads = {name: np.zeros_like(a) for name, a in P.items()}

        gf, grads["w_down"] = nx.matmul_backward(g2, saved["f"].reshape(-1, saved["f"].shape[-1]), P["w_down"])
        su = saved["su"].reshape(gf.shape)
        gsu, gv = gf * saved["v"].reshape(gf.shape), gf * su
        gu = nx.silu_backward(gsu, saved["u"].reshape(gf.shape))
        hm = saved["hm"].reshape(-1, d)
        ghm_u, grads["w_gate"] = nx.matmul_backward(gu, hm, P["w_gate"])
        ghm_v, grads["w_up"] = nx.matmul_backward(gv, hm, P["w_up"])
        ghm = ghm_u + ghm_v
        n = saved["n"].reshape(-1, d)
        g_gamma = (ghm * n).sum(axis=0)
        g_beta = ghm.sum(axis=0)
        gn = ghm * (1.0 + saved["gamma"])
        xhat = saved["h"].reshape(-1, d) * saved["inv"].reshape(-1, 1)
        grads["norm"] = (gn * xhat).sum(axis=0)
        g_gb = np.concatenate([g_gamma, g_beta])
        grads["ada_b"] = g_gb
        e_k = P["step_emb"][k - 1]
        grads["ada_w"] = np.outer(e_k, g_gb)
        grads["step_emb"][k - 1] = P["ada_w"] @ g_gb
        return grads


class DecodePlan:
    """Inference view of a projector for one decode session.

    Per-offset ``(gamma, beta)`` and a fused gate/up matrix are computed once,
    so each call is three matmuls. Parameters must not change while a plan is
    in use.
    """

    def __init__(self, projector: Projector):
        P = projector.params
        self.d_ff = projector.config.d_ff
        self.eps = projector.config.norm_eps
        self.max_offset = projector.config.max_offset
        self.norm = P["norm"]
        self.w_gate_up = np.concatenate([P["w_gate"], P["w_up"]], axis=1)
        self.w_down = P["w_down"]
        self.mod = [projector.modulation(k) for k in range(1, self.max_offset + 1)]

    def __call__(self, h: np.ndarray, k: int) -> np.ndarray:
        if not 1 <= k <= self.max_offset:
            raise ProjectorError(f"offset {k} outside supported range 1..{self.max_offset}")
        gamma, beta = self.mod[k - 1]
        n, _ = nx.rmsnorm(h, self.norm, self.eps)
        gu = (n * (1.0 + gamma) + beta) @ self.w_gate_up
        u, v = gu[..., : self.d_ff], gu[..., self.d_ff :]
        return h + (nx.silu(u) * v) @ self.w_down


def cmtpp_forward(projector: Projector, h: np.ndarray, k: int) -> np.ndarray:
    return projector.forward(h, k)


def amateur_logprobs_at(h_stale: np.ndarray, k: int, backbone: Backbone, projector: Projector) -> np.ndarray:
    """Log-probabilities for the token ``k`` steps past the one ``h_stale`` predicts."""
    return nx.log_softmax(backbone.logits_from_hidden(projector.forward(h_stale, k)))

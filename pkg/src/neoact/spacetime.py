"""Divided space-time attention classifier with a CLS-token head.

Token layout per clip: a CLS vector plus ``T x N_p`` patch tokens.  In the
spatial stage the CLS token is prepended to every frame's patch sequence
and its per-frame outputs are averaged; in the temporal stage it is
prepended to every patch position's frame sequence and averaged again.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as ops
from .checkpoint import load_tensors, save_tensors
from .tensor import DimensionError, Tensor, parameter

N_CLASSES = 4


@dataclass(frozen=True)
class PatchConfig:
    P: int = 8
    d: int = 64
    H: int = 32
    W: int = 32
    T: int = 8

    def __post_init__(self):
        if self.H % self.P or self.W % self.P:
            raise DimensionError(f"resolution {self.H}x{self.W} not divisible by patch size {self.P}")

    @property
    def n_patches(self) -> int:
        return (self.H * self.W) // (self.P * self.P)

    @property
    def patch_dim(self) -> int:
        return self.P * self.P * 3


@dataclass(frozen=True)
class SpaceTimeConfig:
    patch: PatchConfig = field(default_factory=PatchConfig)
    depth: int = 2
    n_heads: int = 4
    ffn_ratio: int = 4
    n_classes: int = N_CLASSES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SpaceTimeConfig":
        raw = dict(raw)
        raw["patch"] = PatchConfig(**raw["patch"])
        return cls(**raw)


def init_head_bias(priors) -> np.ndarray:
    """Log-odds of the class priors: ``log(p) - log(1 - p)``."""
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("class priors must lie strictly inside (0, 1)")
    return np.log(p) - np.log1p(-p)


def extract_patches(frames: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """``(..., T, H, W, 3)`` -> ``(..., T, N_p, P*P*3)``; row-major patch grid, pixels (row, col, channel)."""
    *lead, T, H, W, C = frames.shape
    if (H, W) != (cfg.H, cfg.W) or C != 3:
        raise DimensionError(f"frames {H}x{W}x{C} do not match model input {cfg.H}x{cfg.W}x3")
    P = cfg.P
    x = frames.reshape(*lead, T, H // P, P, W // P, P, C)
    nl = len(lead)
    x = np.moveaxis(x, nl + 3, nl + 2)
    return x.reshape(*lead, T, cfg.n_patches, cfg.patch_dim)


def patch_embed(frames: np.ndarray, cfg: PatchConfig, e_patch: Tensor) -> Tensor:
    return ops.as_tensor(extract_patches(np.asarray(frames, dtype=np.float64), cfg)) @ ops.transpose(e_patch)


def add_positional(tokens: Tensor, p_space: Tensor, p_time: Tensor) -> Tensor:
    """``h[t, j] = z[t, j] + p_space[j] + p_time[t]`` for tokens ``(..., T, N_p, d)``."""
    T, n_p, d = tokens.shape[-3:]
    if p_space.shape != (n_p, d) or p_time.shape != (T, d):
        raise DimensionError("positional encodings do not match the token grid")
    return tokens + p_space + p_time.reshape(T, 1, d)


def divided_block(tokens: Tensor, params: dict, T: int, n_p: int, n_heads: int,
                  cls: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """One block: spatial MSA per frame, temporal MSA per patch position, then FFN.

    ``tokens`` is ``(..., T*N_p, d)``; ``cls`` (``(..., d)``) is optional.
    Returns the updated ``(tokens, cls)``.
    """
    *lead, n, d = tokens.shape
    if n != T * n_p:
        raise DimensionError(f"{n} tokens, expected T*N_p = {T * n_p}")
    nl = len(lead)
    x = tokens.reshape(*lead, T, n_p, d)

    sp = nn.sub_params(params, "space")
    if cls is not None:
        c = ops.broadcast_to(cls.reshape(*lead, 1, 1, d), (*lead, T, 1, d))
        seq = nn.mhsa(ops.concat([c, x], axis=nl + 1), sp, n_heads)
        cls = seq[..., 0, :].mean(axis=nl)
        x = seq[..., 1:, :]
    else:
        x = nn.mhsa(x, sp, n_heads)

    tp = nn.sub_params(params, "time")
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    xt = ops.transpose(x, perm)                      # (..., N_p, T, d)
    if cls is not None:
        c = ops.broadcast_to(cls.reshape(*lead, 1, 1, d), (*lead, n_p, 1, d))
        seq = nn.mhsa(ops.concat([c, xt], axis=nl + 1), tp, n_heads)
        cls = seq[..., 0, :].mean(axis=nl)
        xt = seq[..., 1:, :]
    else:
        xt = nn.mhsa(xt, tp, n_heads)
    x = ops.transpose(xt, perm)

    fp = nn.sub_params(params, "ffn")
    x = nn.ffn(x, fp)
    if cls is not None:
        cls = nn.ffn(cls, fp)
    return x.reshape(*lead, n, d), cls


def expected_param_count(cfg: SpaceTimeConfig) -> int:
    pc = cfg.patch
    d, r = pc.d, cfg.ffn_ratio
    attn = 2 * d + 4 * (d * d + d)
    ffn = 2 * d + (r * d * d + r * d) + (r * d * d + d)
    return (d * pc.patch_dim + pc.n_patches * d + pc.T * d + d
            + cfg.depth * (2 * attn + ffn)
            + 2 * d + cfg.n_classes * d + cfg.n_classes)


class SpaceTimeModel:
    """Patch embedding, positional encodings, divided blocks and a sigmoid head."""

    kind = "spacetime"
    input_kind = "frames"

    def __init__(self, cfg: SpaceTimeConfig | None = None, seed: int = 0, priors=None,
                 zero_head: bool = False):
        self.cfg = cfg = cfg or SpaceTimeConfig()
        pc = cfg.patch
        rng = np.random.default_rng([seed, 1])
        p: dict[str, Tensor] = {
            "patch.w": parameter(nn.trunc_normal(rng, (pc.d, pc.patch_dim)), "patch.w"),
            "pos.space": parameter(nn.trunc_normal(rng, (pc.n_patches, pc.d)), "pos.space"),
            "pos.time": parameter(nn.trunc_normal(rng, (pc.T, pc.d)), "pos.time"),
            "cls": parameter(nn.trunc_normal(rng, (pc.d,)), "cls"),
        }
        for i in range(cfg.depth):
            p.update(nn.init_attention(rng, f"block{i}.space", pc.d))
            p.update(nn.init_attention(rng, f"block{i}.time", pc.d))
            p.update(nn.init_ffn(rng, f"block{i}.ffn", pc.d, cfg.ffn_ratio))
        p.update(nn.init_layer_norm("norm", pc.d))
        p.update(nn.init_linear(rng, "head", cfg.n_classes, pc.d))
        if zero_head:
            p["head.w"].data[...] = 0.0
        if priors is not None:
            p["head.b"].data[...] = init_head_bias(priors)
        self.params = p

    # -- groups used by the trainer --------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def param_groups(self) -> dict[str, list[str]]:
        head = [k for k in self.params if k.startswith("head.")]
        rest = [k for k in self.params if not k.startswith("head.")]
        return {"head": head, "backbone": rest}

    @property
    def n_params(self) -> int:
        return nn.count_params(self.params)

    def prepare(self, frames: np.ndarray) -> np.ndarray:
        return np.asarray(frames, dtype=np.float64)

    # -- forward ----------------------------------------------------------
    def encode(self, frames: np.ndarray) -> Tensor:
        """Final (normalized) CLS representation, ``(..., d)``."""
        cfg, p = self.cfg, self.params
        pc = cfg.patch
        z = patch_embed(frames, pc, p["patch.w"])
        h = add_positional(z, p["pos.space"], p["pos.time"])
        lead = h.shape[:-3]
        x = h.reshape(*lead, pc.T * pc.n_patches, pc.d)
        cls = ops.broadcast_to(p["cls"], (*lead, pc.d)) if lead else p["cls"]
        for i in range(cfg.depth):
            x, cls = divided_block(x, nn.sub_params(p, f"block{i}"), pc.T, pc.n_patches,
                                   cfg.n_heads, cls)
        return ops.layer_norm(cls, p["norm.g"], p["norm.b"])

    def logits(self, frames: np.ndarray) -> Tensor:
        return nn.linear(self.encode(frames), self.params["head.w"], self.params["head.b"])

    def forward(self, frames: np.ndarray) -> Tensor:
        """Class probabilities for ``(T, H, W, 3)`` or a batch ``(B, T, H, W, 3)``."""
        return ops.sigmoid(self.logits(frames))

    __call__ = forward

    def predict(self, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        with ops.no_grad():
            for i in range(0, len(frames), batch_size):
                outs.append(self.forward(self.prepare(frames[i:i + batch_size])).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.cfg.n_classes))

    # -- persistence ------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def save(self, path) -> None:
        save_tensors(path, self.state(), self.kind, self.cfg.to_dict())

    @classmethod
    def load(cls, path) -> "SpaceTimeModel":
        tensors, header = load_tensors(path, cls.kind)
        model = cls(SpaceTimeConfig.from_dict(header["config"]))
        model.load_state(tensors)
        return model

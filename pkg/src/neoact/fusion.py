"""Frozen two-stream backbone with a mean-pooled head and LoRA adapters.

The backbone is a toy stand-in for a video-language model: a per-frame
spatial transformer turns each frame into ``N_v`` video tokens, a token
table embeds the prompt, and ``K`` cross-modal blocks attend over the
concatenated ``[video | prompt]`` sequence.  Video tokens of frame ``t``
see the prompt and frames ``<= t``; prompt tokens see only the prompt.

Two regimes:

* ``ft-lc``: everything frozen except the head; the pooled features are a
  fixed function of the clip and can be cached.
* ``ft-c-lora``: the head plus low-rank adapters on the cross-modal
  attention projections are trained; the vision tower output is cached.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as ops
from .checkpoint import load_tensors, save_tensors
from .spacetime import PatchConfig, extract_patches
from .tensor import DimensionError, Tensor, parameter

FUSION_MODES = ("ft-lc", "ft-c-lora")

VOCAB = (
    "<unk>", "<pad>", "is", "the", "a", "baby", "newborn", "on", "table", "visible", "and",
    "or", "being", "performed", "ventilation", "stimulation", "suction", "which", "of",
    "activities", "are", "in", "this", "clip", "video", "resuscitation", "mask", "tube",
    "hands", "yes", "no", "present",
)
DEFAULT_PROMPT = "which of the activities ventilation stimulation or suction are performed and is the baby on the table"


class ParameterError(ValueError):
    pass


def tokenize(text: str, max_len: int = 32) -> np.ndarray:
    index = {w: i for i, w in enumerate(VOCAB)}
    words = re.findall(r"[a-z]+", text.lower())
    ids = [index.get(w, 0) for w in words][:max_len]
    if not ids:
        ids = [index["<pad>"]]
    return np.array(ids, dtype=np.int64)


@dataclass(frozen=True)
class FusionConfig:
    d: int = 128
    n_heads: int = 4
    n_blocks: int = 2
    vision_depth: int = 1
    frames: int = 16
    P: int = 8
    H: int = 32
    W: int = 32
    max_prompt_len: int = 32
    ffn_ratio: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = ("q", "v")
    n_classes: int = 4

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(P=self.P, d=self.d, H=self.H, W=self.W, T=self.frames)

    @property
    def n_video_tokens(self) -> int:
        return self.patch.n_patches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "FusionConfig":
        raw = dict(raw)
        raw["lora_targets"] = tuple(raw.get("lora_targets", ("q", "v")))
        return cls(**raw)


# -- LoRA ---------------------------------------------------------------------

class LoraAdapter:
    """Low-rank update ``(alpha / r) B A`` for a ``(d, k)`` weight ``W0``."""

    def __init__(self, target: str, d: int, k: int, r: int = 8, alpha: float | None = None,
                 rng: np.random.Generator | None = None):
        if not 1 <= r <= min(d, k):
            raise ParameterError(f"LoRA rank {r} must be in [1, min(d, k) = {min(d, k)}]")
        rng = rng or np.random.default_rng(0)
        self.target = target
        self.r = r
        self.alpha = float(r if alpha is None else alpha)
        self.A = parameter(nn.trunc_normal(rng, (r, k)), f"lora.{target}.A")
        self.B = parameter(np.zeros((d, r)), f"lora.{target}.B")

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)

    def __call__(self, x: Tensor, w0: Tensor) -> Tensor:
        base = x @ ops.transpose(w0)
        low = (x @ ops.transpose(self.A)) @ ops.transpose(self.B)
        return base + low * self.scale

    def reset(self) -> None:
        self.B.data[...] = 0.0


def lora_apply(x, w0, adapter: LoraAdapter) -> Tensor:
    """``W0 x + (alpha / r) B (A x)`` for a vector or row batch ``x``."""
    w0 = ops.as_tensor(w0)
    x = ops.as_tensor(x)
    if w0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise DimensionError(f"W0 {w0.shape} does not match adapter ({adapter.B.shape[0]}, {adapter.A.shape[1]})")
    if x.shape[-1] != w0.shape[1]:
        raise DimensionError(f"input width {x.shape[-1]} does not match W0 {w0.shape}")
    return adapter(x, w0)


def lora_merge(w0, adapter: LoraAdapter) -> np.ndarray:
    w0 = np.asarray(w0.data if isinstance(w0, Tensor) else w0, dtype=np.float64)
    if w0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise DimensionError(f"W0 {w0.shape} does not match adapter")
    return w0 + adapter.delta()


# -- backbone pieces --------------------------------------------------------------

def frame_causal_mask(n_frames: int, n_video: int, n_prompt: int) -> np.ndarray:
    """``(n, n)`` boolean mask over ``[video | prompt]``; True = query may attend key."""
    nv = n_frames * n_video
    n = nv + n_prompt
    frame = np.repeat(np.arange(n_frames), n_video)
    mask = np.zeros((n, n), dtype=bool)
    mask[:nv, :nv] = frame[:, None] >= frame[None, :]
    mask[:, nv:] = True
    return mask


def fuse_forward(video_tokens: Tensor, prompt_tokens: Tensor, params: dict, n_frames: int,
                 n_heads: int, n_blocks: int, adapters: dict | None = None) -> Tensor:
    """Run the cross-modal blocks over ``[video | prompt]``.

    ``video_tokens``: ``(..., T*N_v, d)``; ``prompt_tokens``: ``(n_p, d)`` or
    ``(..., n_p, d)``.  Returns final hidden states ``(..., T*N_v + n_p, d)``.
    """
    video_tokens = ops.as_tensor(video_tokens)
    prompt_tokens = ops.as_tensor(prompt_tokens)
    *lead, nv, d = video_tokens.shape
    if prompt_tokens.shape[-1] != d:
        raise DimensionError(f"prompt width {prompt_tokens.shape[-1]} != video width {d}")
    if nv % n_frames:
        raise DimensionError(f"{nv} video tokens not divisible into {n_frames} frames")
    n_p = prompt_tokens.shape[-2]
    if prompt_tokens.ndim == 2 and lead:
        prompt_tokens = ops.broadcast_to(prompt_tokens, (*lead, n_p, d))
    x = ops.concat([video_tokens, prompt_tokens], axis=-2)
    mask = frame_causal_mask(n_frames, nv // n_frames, n_p)
    for k in range(n_blocks):
        pre = f"xblock{k}"
        ad = None
        if adapters:
            ad = {t.split(".")[-1]: a for t, a in adapters.items() if t.startswith(pre + ".")}
        x = nn.mhsa(x, nn.sub_params(params, f"{pre}.attn"), n_heads, mask=mask, adapters=ad)
        x = nn.ffn(x, nn.sub_params(params, f"{pre}.ffn"))
    return x


def mean_pool_video(hidden: Tensor, video_mask) -> Tensor:
    """Mean of ``hidden[..., i, :]`` over positions where ``video_mask`` is True."""
    m = np.asarray(video_mask, dtype=bool)
    if m.ndim != 1 or m.shape[0] != hidden.shape[-2]:
        raise DimensionError("video mask must be 1-D over token positions")
    count = int(m.sum())
    if count == 0:
        raise ValueError("video mask selects no positions")
    w = (m / count).reshape(-1, 1)
    return (hidden * w).sum(axis=-2)


# -- model ----------------------------------------------------------------------

class FusionModel:
    kind = "fusion"

    def __init__(self, cfg: FusionConfig | None = None, mode: str = "ft-lc", seed: int = 0,
                 prompt: str = DEFAULT_PROMPT, adapter_seed: int | None = None):
        if mode not in FUSION_MODES:
            raise ParameterError(f"mode must be one of {FUSION_MODES}")
        self.cfg = cfg = cfg or FusionConfig()
        self.mode = mode
        self.prompt = prompt
        self.prompt_ids = tokenize(prompt, cfg.max_prompt_len)
        d = cfg.d
        rng = np.random.default_rng([seed, 2])
        pc = cfg.patch
        p: dict[str, Tensor] = {
            "vision.patch.w": parameter(nn.trunc_normal(rng, (d, pc.patch_dim))),
            "vision.pos": parameter(nn.trunc_normal(rng, (pc.n_patches, d))),
            "frame.pos": parameter(nn.trunc_normal(rng, (cfg.frames, d))),
            "prompt.tok": parameter(nn.trunc_normal(rng, (len(VOCAB), d))),
            "prompt.pos": parameter(nn.trunc_normal(rng, (cfg.max_prompt_len, d))),
        }
        for i in range(cfg.vision_depth):
            p.update(nn.init_attention(rng, f"vision.block{i}.attn", d))
            p.update(nn.init_ffn(rng, f"vision.block{i}.ffn", d, cfg.ffn_ratio))
        p.update(nn.init_layer_norm("vision.norm", d))
        for k in range(cfg.n_blocks):
            p.update(nn.init_attention(rng, f"xblock{k}.attn", d))
            p.update(nn.init_ffn(rng, f"xblock{k}.ffn", d, cfg.ffn_ratio))
        p.update(nn.init_layer_norm("final.norm", d))
        p.update(nn.init_linear(rng, "head", cfg.n_classes, d))
        for name, t in p.items():
            t.name = name
            t.requires_grad = name.startswith("head.")
        self.params = p
        self.adapters: dict[str, LoraAdapter] = {}
        if mode == "ft-c-lora":
            arng = np.random.default_rng([seed if adapter_seed is None else adapter_seed, 3])
            for k in range(cfg.n_blocks):
                for proj in cfg.lora_targets:
                    target = f"xblock{k}.attn.{proj}"
                    self.adapters[target] = LoraAdapter(target, d, d, cfg.lora_rank, cfg.lora_alpha, arng)
            for a in self.adapters.values():
                p[a.A.name] = a.A
                p[a.B.name] = a.B

    input_kind = property(lambda self: "features" if self.mode == "ft-lc" else "video_tokens")

    # -- groups ---------------------------------------------------------------
    def param_groups(self) -> dict[str, list[str]]:
        head = [k for k in self.params if k.startswith("head.")]
        lora = [k for k in self.params if k.startswith("lora.")]
        return {"head": head, "backbone": lora}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def backbone_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not (k.startswith("head.") or k.startswith("lora."))}

    @property
    def n_params(self) -> int:
        return nn.count_params(self.params)

    # -- stages -------------------------------------------------------------
    def vision_tokens(self, frames: np.ndarray) -> Tensor:
        """``(..., T, H, W, 3)`` -> ``(..., T*N_v, d)``; each frame is encoded on its own."""
        cfg, p = self.cfg, self.params
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-4] != cfg.frames:
            raise DimensionError(f"expected {cfg.frames} frames, got {frames.shape[-4]}")
        x = ops.as_tensor(extract_patches(frames, cfg.patch)) @ ops.transpose(p["vision.patch.w"])
        x = x + p["vision.pos"]
        for i in range(cfg.vision_depth):
            x = nn.mhsa(x, nn.sub_params(p, f"vision.block{i}.attn"), cfg.n_heads)
            x = nn.ffn(x, nn.sub_params(p, f"vision.block{i}.ffn"))
        x = ops.layer_norm(x, p["vision.norm.g"], p["vision.norm.b"])
        x = x + p["frame.pos"].reshape(cfg.frames, 1, cfg.d)
        lead = x.shape[:-3]
        return x.reshape(*lead, cfg.frames * cfg.n_video_tokens, cfg.d)

    def prompt_tokens(self, ids: np.ndarray | None = None) -> Tensor:
        ids = self.prompt_ids if ids is None else np.asarray(ids)
        p = self.params
        return p["prompt.tok"][ids] + p["prompt.pos"][: len(ids)]

    def hidden(self, video_tokens, prompt_ids: np.ndarray | None = None, use_adapters: bool = True) -> Tensor:
        cfg = self.cfg
        h = fuse_forward(video_tokens, self.prompt_tokens(prompt_ids), self.params, cfg.frames,
                         cfg.n_heads, cfg.n_blocks, self.adapters if use_adapters else None)
        return ops.layer_norm(h, self.params["final.norm.g"], self.params["final.norm.b"])

    def video_mask(self, n_prompt: int | None = None) -> np.ndarray:
        n_p = len(self.prompt_ids) if n_prompt is None else n_prompt
        nv = self.cfg.frames * self.cfg.n_video_tokens
        return np.r_[np.ones(nv, bool), np.zeros(n_p, bool)]

    def pooled(self, video_tokens, prompt_ids=None, use_adapters: bool = True) -> Tensor:
        ids = self.prompt_ids if prompt_ids is None else prompt_ids
        h = self.hidden(video_tokens, ids, use_adapters)
        return mean_pool_video(h, self.video_mask(len(ids)))

    def head(self, features) -> Tensor:
        return ops.sigmoid(nn.linear(ops.as_tensor(features), self.params["head.w"], self.params["head.b"]))

    def forward_frames(self, frames: np.ndarray, prompt_ids=None, use_adapters: bool = True) -> Tensor:
        return self.head(self.pooled(self.vision_tokens(frames), prompt_ids, use_adapters))

    # -- trainer interface -------------------------------------------------
    def cache_inputs(self, frames: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Run the frozen part once: pooled features (ft-lc) or vision tokens (ft-c-lora)."""
        outs = []
        with ops.no_grad():
            for i in range(0, len(frames), batch_size):
                vt = self.vision_tokens(frames[i:i + batch_size])
                outs.append((self.pooled(vt).data if self.mode == "ft-lc" else vt.data).astype(np.float32))
        return np.concatenate(outs)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def forward(self, x: np.ndarray) -> Tensor:
        if self.mode == "ft-lc":
            return self.head(x)
        return self.head(self.pooled(x))

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        with ops.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(self.prepare(x[i:i + batch_size])).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.cfg.n_classes))

    # -- adapters -------------------------------------------------------------
    def merge_adapters(self) -> None:
        """Fold every adapter into its base weight and zero its B matrix."""
        for target, a in self.adapters.items():
            w = self.params[f"{target}.w"]
            w.data[...] = lora_merge(w, a)
            a.reset()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def save(self, path) -> None:
        tensors = {k: v.data for k, v in self.params.items() if not k.startswith("lora.")}
        save_tensors(path, tensors, self.kind, {"fusion": self.cfg.to_dict(), "mode": self.mode,
                                                 "prompt": self.prompt})

    def save_adapters(self, path) -> None:
        tensors, records = {}, []
        for target, a in self.adapters.items():
            tensors[f"{target}.A"] = a.A.data
            tensors[f"{target}.B"] = a.B.data
            records.append({"target": target, "r": a.r, "alpha": a.alpha})
        save_tensors(path, tensors, "lora", {"adapters": records})

    @classmethod
    def load(cls, path, adapters_path=None, merge: bool = False) -> "FusionModel":
        """Backbone and head from ``path``; adapters from ``adapters_path``.

        With ``merge`` the adapters are folded into the base weights and the
        model comes back in ``ft-lc`` form; otherwise they stay attached.
        """
        tensors, header = load_tensors(path, cls.kind)
        cfg = header["config"]
        if adapters_path is None:
            mode = cfg["mode"]
        else:
            mode = "ft-lc" if merge else "ft-c-lora"
        model = cls(FusionConfig.from_dict(cfg["fusion"]), mode=mode, prompt=cfg["prompt"])
        model.load_state(tensors)
        if adapters_path is None:
            return model
        atensors, aheader = load_tensors(adapters_path, "lora")
        for rec in aheader["config"]["adapters"]:
            t = rec["target"]
            w = model.params[f"{t}.w"]
            a = model.adapters.get(t) or LoraAdapter(t, *w.shape, r=rec["r"], alpha=rec["alpha"])
            if (a.r, a.alpha) != (rec["r"], rec["alpha"]):
                raise ParameterError(f"adapter {t}: stored rank/alpha differ from the model config")
            a.A.data[...] = atensors[f"{t}.A"]
            a.B.data[...] = atensors[f"{t}.B"]
            if merge:
                w.data[...] = lora_merge(w, a)
        return model


def trainable_param_report(model: FusionModel) -> dict[str, int]:
    head = sum(p.size for k, p in model.params.items() if k.startswith("head."))
    adapters = sum(a.n_params for a in model.adapters.values())
    frozen = sum(p.size for p in model.backbone_params().values())
    return {"head": head, "adapters": adapters, "frozen": frozen, "total": head + adapters + frozen}

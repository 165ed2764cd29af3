"""Multi-stream deep prompt tuning detector at desk scale.

A frozen strided-conv feature encoder turns 4 s of 16 kHz audio into
``T x D`` frames. A stack of frozen pre-norm transformer blocks processes
those frames; before every block three groups of learnable prompts are
prepended (base, HHT frequency, TKEO texture) and removed again after it.
Only prompts, the two signal modules and the classifier head train.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signal_analysis import high_pass_matrix, hilbert_matrix, moving_average_matrix, texture_cues

STREAMS = ("base", "fre", "tex")
CHECKPOINT_VERSION = 1
_MASKED = -1e30


@dataclass
class ModelConfig:
    n_layers: int = 4
    embed_dim: int = 64
    n_heads: int = 4
    prompt_len: int = 4
    ffn_mult: int = 4
    encoder_kernels: tuple = (10, 8, 8, 8)
    encoder_strides: tuple = (5, 4, 4, 4)
    encoder_channels: tuple = (32, 64, 64)
    pool_window: int = 3
    streams: tuple = STREAMS
    carry_prompts: bool = False
    gate: str = "scalar"
    if_wrap: bool = True
    input_samples: int = 64000
    seed: int = 0
    backbone_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_kernels = tuple(int(k) for k in self.encoder_kernels)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.streams = tuple(self.streams)
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.prompt_len < 1 or self.n_layers < 1:
            raise ValueError("prompt_len and n_layers must be >= 1")
        if "fre" in self.streams and self.prompt_len < 2:
            raise ValueError("frequency stream needs prompt_len >= 2")
        if not self.streams or any(s not in STREAMS for s in self.streams):
            raise ValueError(f"streams must be a non-empty subset of {STREAMS}, got {self.streams}")
        if len(self.encoder_kernels) != len(self.encoder_strides):
            raise ValueError("encoder_kernels and encoder_strides differ in length")
        if len(self.encoder_channels) != len(self.encoder_kernels) - 1:
            raise ValueError("encoder_channels must list one width per hidden conv layer")
        if any(k < s for k, s in zip(self.encoder_kernels, self.encoder_strides)):
            raise ValueError("encoder kernels must be at least as wide as their strides")
        if self.input_samples % self.total_stride:
            raise ValueError(f"input_samples {self.input_samples} not a multiple of stride {self.total_stride}")
        if self.gate not in ("scalar", "vector"):
            raise ValueError(f"gate must be 'scalar' or 'vector', got {self.gate!r}")
        # keep the canonical order so variants compare equal
        self.streams = tuple(s for s in STREAMS if s in self.streams)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def n_frames(self) -> int:
        return self.input_samples // self.total_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerState:
    layer: int
    H: np.ndarray
    X: np.ndarray


@dataclass
class GateState:
    g: np.ndarray
    psi_bar: np.ndarray
    flux: np.ndarray


@dataclass
class Partition:
    trainable: dict = field(default_factory=dict)
    frozen: dict = field(default_factory=dict)


def _frozen_prefix(name: str) -> bool:
    return name.startswith(("encoder.", "blocks."))


class PromptTuningDetector:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        self.dtype = np.dtype(config.dtype)
        D, p = config.embed_dim, config.prompt_len
        self.params: dict[str, Tensor] = {}
        # frozen weights depend only on backbone_seed so trainable seeds share one backbone
        rng = np.random.default_rng(config.backbone_seed)

        def add(name, array):
            t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=not _frozen_prefix(name), name=name)
            self.params[name] = t
            return t

        widths = (1,) + config.encoder_channels + (D,)
        for i, k in enumerate(config.encoder_kernels):
            fan_in = k * widths[i]
            add(f"encoder.conv{i}.weight", rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, widths[i + 1])))
            add(f"encoder.conv{i}.bias", rng.normal(0.0, 0.02, widths[i + 1]))

        F = config.ffn_mult * D
        for i in range(config.n_layers):
            b = f"blocks.{i}."
            add(b + "ln1.weight", np.ones(D))
            add(b + "ln1.bias", np.zeros(D))
            for name in ("q", "k", "v", "o"):
                add(b + f"attn.w{name}", rng.normal(0.0, 1.0 / math.sqrt(D), (D, D)))
                add(b + f"attn.b{name}", np.zeros(D))
            add(b + "ln2.weight", np.ones(D))
            add(b + "ln2.bias", np.zeros(D))
            add(b + "ffn.w1", rng.normal(0.0, 1.0 / math.sqrt(D), (D, F)))
            add(b + "ffn.b1", np.zeros(F))
            add(b + "ffn.w2", rng.normal(0.0, 1.0 / math.sqrt(F), (F, D)))
            add(b + "ffn.b2", np.zeros(D))

        rng = np.random.default_rng(config.seed)
        for i in range(config.n_layers):
            for s in STREAMS:
                add(f"prompts.{s}.{i}", rng.normal(0.0, 1.0, (p, D)))

        add("freq.weight", rng.normal(0.0, 1.0 / math.sqrt(3 * D), (3 * D, D)))
        add("freq.bias", np.zeros(D))
        gate_out = 1 if config.gate == "scalar" else D
        add("tex.mlp.w1", rng.normal(0.0, 1.0 / math.sqrt(2 * D), (2 * D, D)))
        add("tex.mlp.b1", np.zeros(D))
        add("tex.mlp.w2", rng.normal(0.0, 1.0 / math.sqrt(D), (D, gate_out)))
        add("tex.mlp.b2", np.zeros(gate_out))
        add("tex.ln.weight", np.ones(D))
        add("tex.ln.bias", np.zeros(D))

        add("head.w1", rng.normal(0.0, 1.0 / math.sqrt(D), (D, D)))
        add("head.b1", np.zeros(D))
        add("head.w2", rng.normal(0.0, 1.0 / math.sqrt(D), (D, 1)))
        add("head.b2", np.zeros(1))

        self._build_constants()
        self.trace: list[LayerState] | None = None
        self.last_gate: GateState | None = None
        self.attend_to_prompts = True

    def _build_constants(self):
        p, w = self.config.prompt_len, self.config.pool_window
        diff = np.eye(p) - np.eye(p, k=-1)
        if p >= 2:
            diff[0] = diff[1]
        self._c = {
            "high": Tensor(high_pass_matrix(p).astype(self.dtype)),
            "low": Tensor(moving_average_matrix(p, w).astype(self.dtype)),
            "hilbert": Tensor(hilbert_matrix(p).astype(self.dtype)),
            # theta[n] - theta[n-1], with row 0 duplicating row 1
            "phase_diff": Tensor(diff.astype(self.dtype)),
        }

    # parameter bookkeeping --------------------------------------------------
    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not _frozen_prefix(k)}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if _frozen_prefix(k)}

    def partition(self) -> Partition:
        return Partition(trainable=self.trainable_parameters(), frozen=self.frozen_parameters())

    def parameter_counts(self) -> dict[str, int]:
        return {
            "trainable": sum(t.data.size for t in self.trainable_parameters().values()),
            "frozen": sum(t.data.size for t in self.frozen_parameters().values()),
        }

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # frozen front end -------------------------------------------------------
    def feature_encoder(self, samples) -> np.ndarray:
        """``(B, input_samples)`` (or a single 1-D clip) to ``(B, T, D)`` raw features."""
        x = np.asarray(getattr(samples, "samples", samples), dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[-1] != self.config.input_samples:
            raise ValueError(f"feature_encoder expects {self.config.input_samples} samples, got {x.shape[-1]}")
        h = x[:, :, None]
        n_conv = len(self.config.encoder_kernels)
        for i, (k, s) in enumerate(zip(self.config.encoder_kernels, self.config.encoder_strides)):
            h = _strided_conv(h, self.params[f"encoder.conv{i}.weight"].data,
                              self.params[f"encoder.conv{i}.bias"].data, k, s)
            h = ad.gelu(Tensor(h)).data
            if i == n_conv - 1:
                mu = h.mean(axis=-1, keepdims=True)
                h = (h - mu) / np.sqrt(h.var(axis=-1, keepdims=True) + 1e-5)
        h = h.astype(self.dtype, copy=False)
        return h[0] if single else h

    # prompt streams ---------------------------------------------------------
    def frequency_stream(self, p_fre: Tensor) -> Tensor:
        """HHT instantaneous-frequency features of the prompt tokens, projected back to D."""
        if p_fre.shape[0] < 2:
            raise ValueError("frequency stream needs at least 2 prompt tokens")
        c = self._c
        feats = []
        for comp in (c["high"] @ p_fre, p_fre, c["low"] @ p_fre):
            theta = ad.atan2(c["hilbert"] @ comp, comp)
            d = c["phase_diff"] @ theta
            feats.append(ad.abs_(ad.wrap_angle(d) if self.config.if_wrap else d))
        return ad.linear(ad.concat(feats, axis=-1), self.params["freq.weight"], self.params["freq.bias"])

    def texture_cues(self, h_raw) -> tuple[Tensor, Tensor]:
        h_raw = np.asarray(h_raw)
        if h_raw.shape[-1] != self.config.embed_dim:
            raise ValueError(f"H_raw has {h_raw.shape[-1]} channels, model expects {self.config.embed_dim}")
        if h_raw.shape[-2] < 3:
            raise ValueError("texture stream needs at least 3 frames")
        cues = texture_cues(h_raw)
        return Tensor(cues.psi_bar.astype(self.dtype)), Tensor(cues.flux.astype(self.dtype))

    def gate(self, psi_bar: Tensor, flux: Tensor) -> Tensor:
        P = self.params
        hidden = ad.gelu(ad.linear(ad.concat([psi_bar, flux], axis=-1), P["tex.mlp.w1"], P["tex.mlp.b1"]))
        return ad.sigmoid(ad.linear(hidden, P["tex.mlp.w2"], P["tex.mlp.b2"]))

    def texture_stream(self, p_tex: Tensor, psi_bar: Tensor, flux: Tensor, g: Tensor | None = None) -> Tensor:
        """Gate-fused texture prompt ``LayerNorm(g*P_tex + (1-g)*psi_bar)``, shape ``(B, p, D)``.

        *psi_bar* and *flux* are ``(B, D)`` cues from :meth:`texture_cues`.
        """
        B, D = psi_bar.shape
        p = p_tex.shape[0]
        if p_tex.shape[1] != D:
            raise ValueError(f"texture prompt width {p_tex.shape[1]} vs cue width {D}")
        if g is None:
            g = self.gate(psi_bar, flux)
        g3 = ad.broadcast_to(ad.reshape(g, (B, 1, g.shape[-1])), (B, p, D))
        prompt = ad.broadcast_to(ad.reshape(p_tex, (1, p, D)), (B, p, D))
        cue = ad.broadcast_to(ad.reshape(psi_bar, (B, 1, D)), (B, p, D))
        fused = g3 * prompt + (1.0 - g3) * cue
        return ad.layer_norm(fused, self.params["tex.ln.weight"], self.params["tex.ln.bias"])

    # transformer ------------------------------------------------------------
    def block(self, x: Tensor, layer: int, n_prompt_rows: int = 0) -> Tensor:
        """One frozen pre-norm transformer block on ``(B, N, D)``."""
        P = self.params
        b = f"blocks.{layer}."
        B, N, D = x.shape
        H = self.config.n_heads
        dh = D // H

        h = ad.layer_norm(x, P[b + "ln1.weight"], P[b + "ln1.bias"])

        def heads(name):
            y = ad.linear(h, P[b + f"attn.w{name}"], P[b + f"attn.b{name}"])
            return ad.transpose(ad.reshape(y, (B, N, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        if n_prompt_rows and not self.attend_to_prompts:
            mask = np.zeros((N, N), dtype=self.dtype)
            mask[n_prompt_rows:, :n_prompt_rows] = _MASKED
            scores = scores + ad.broadcast_to(Tensor(mask), scores.shape)
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (B, N, D))
        x = x + ad.linear(ctx, P[b + "attn.wo"], P[b + "attn.bo"])

        h2 = ad.layer_norm(x, P[b + "ln2.weight"], P[b + "ln2.bias"])
        ff = ad.linear(ad.gelu(ad.linear(h2, P[b + "ffn.w1"], P[b + "ffn.b1"])), P[b + "ffn.w2"], P[b + "ffn.b2"])
        return x + ff

    def layer_prompts(self, layer: int, batch: int, psi_bar: Tensor | None, flux: Tensor | None,
                      g: Tensor | None = None) -> list[Tensor]:
        """Processed prompts of the active streams for *layer*, each ``(B, p, D)``."""
        P = self.params
        p, D = self.config.prompt_len, self.config.embed_dim
        out = []
        for s in self.config.streams:
            raw = P[f"prompts.{s}.{layer}"]
            if s == "base":
                t = ad.broadcast_to(ad.reshape(raw, (1, p, D)), (batch, p, D))
            elif s == "fre":
                t = ad.broadcast_to(ad.reshape(self.frequency_stream(raw), (1, p, D)), (batch, p, D))
            else:
                t = self.texture_stream(raw, psi_bar, flux, g)
            out.append(t)
        return out

    def inject_and_encode(self, h: Tensor, prompts: list[Tensor], layer: int,
                          carried: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        """Prepend prompts, run block *layer*, split prompt rows from content rows.

        Returns ``(H_next, prompt_rows_out)``; ``H_next`` has the same shape as *h*.
        """
        if h.ndim != 3:
            raise ValueError(f"features must be (B, T, D), got {h.shape}")
        for t in prompts:
            if t.ndim != 3 or t.shape[0] != h.shape[0] or t.shape[2] != h.shape[2]:
                raise ValueError(f"prompt shape {t.shape} incompatible with features {h.shape}")
        n_prompt = sum(t.shape[1] for t in prompts)
        if carried is not None and n_prompt:
            prompts_cat = ad.concat(prompts, axis=1) + carried
            x = ad.concat([prompts_cat, h], axis=1)
        else:
            x = ad.concat(list(prompts) + [h], axis=1) if prompts else h
        if self.trace is not None:
            self.trace.append(LayerState(layer=layer, H=h.data.copy(), X=x.data.copy()))
        y = self.block(x, layer, n_prompt)
        if not n_prompt:
            return y, None
        return y[:, n_prompt:, :], y[:, :n_prompt, :]

    def encode(self, h_raw) -> Tensor:
        """Run all layers with deep prompt injection; returns ``H^(L)`` as ``(B, T, D)``."""
        h_raw = np.asarray(h_raw, dtype=self.dtype)
        if h_raw.ndim == 2:
            h_raw = h_raw[None]
        B = h_raw.shape[0]
        psi_bar = flux = g = None
        if "tex" in self.config.streams:
            psi_bar, flux = self.texture_cues(h_raw)
            g = self.gate(psi_bar, flux)
            self.last_gate = GateState(g=g.data.copy(), psi_bar=psi_bar.data.copy(), flux=flux.data.copy())
        h = Tensor(h_raw)
        carried = None
        for i in range(self.config.n_layers):
            prompts = self.layer_prompts(i, B, psi_bar, flux, g)
            h, out_prompts = self.inject_and_encode(h, prompts, i, carried)
            carried = out_prompts if self.config.carry_prompts else None
        return h

    def classify(self, h: Tensor) -> Tensor:
        """Mean-pool over time, 2-layer MLP, one bona fide logit per utterance."""
        P = self.params
        pooled = ad.mean(h, axis=-2)
        hidden = ad.gelu(ad.linear(pooled, P["head.w1"], P["head.b1"]))
        return ad.reshape(ad.linear(hidden, P["head.w2"], P["head.b2"]), (pooled.shape[0],))

    def forward(self, h_raw) -> Tensor:
        """Logits ``(B,)`` from precomputed raw features ``(B, T, D)``."""
        return self.classify(self.encode(h_raw))

    def score(self, samples) -> np.ndarray:
        """Bona fide logits for ``(B, input_samples)`` audio."""
        return self.forward(self.feature_encoder(samples)).data.copy()

    # persistence ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def save(self, path, extra: dict | None = None):
        meta = {
            "format": "mixforge-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "trainable": sorted(self.trainable_parameters()),
            "frozen": sorted(self.frozen_parameters()),
            "extra": extra or {},
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                     **self.state_dict())

    @classmethod
    def load(cls, path) -> "PromptTuningDetector":
        with np.load(path, allow_pickle=False) as npz:
            if "__meta__" not in npz.files:
                raise ValueError(f"{path}: not a mixforge checkpoint")
            meta = json.loads(npz["__meta__"].tobytes().decode())
            if meta.get("format") != "mixforge-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
            model = cls(ModelConfig.from_dict(meta["config"]))
            model.load_state_dict({k: npz[k] for k in npz.files if k != "__meta__"})
        if sorted(model.trainable_parameters()) != meta["trainable"]:
            raise ValueError(f"{path}: recorded parameter partition does not match the model")
        return model


def read_checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as npz:
        return json.loads(npz["__meta__"].tobytes().decode())


def _strided_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, k: int, s: int) -> np.ndarray:
    """1-D conv over axis 1 of ``(B, L, C)``; right edge-replicated so ``L_out = L // s``."""
    B, L, C = x.shape
    n_out = L // s
    need = (n_out - 1) * s + k
    if need > L:
        x = np.concatenate([x, np.repeat(x[:, -1:, :], need - L, axis=1)], axis=1)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::s][:, :n_out]
    # win: (B, n_out, C, k) -> (B, n_out, k*C) matching weight rows ordered (tap, channel)
    cols = np.ascontiguousarray(np.swapaxes(win, 2, 3)).reshape(B, n_out, k * C)
    return cols @ weight + bias

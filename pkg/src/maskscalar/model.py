"""Causal conformer-style mask estimator, mask-scalar net, frozen ASR proxy."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .features import LOG_FLOOR, ConfigError
from .masks import DEFAULT_BETA, postprocess
from .scenes import AEC, ENHANCEMENT, MODES

CHECKPOINT_VERSION = 1
THETA_ALPHA_STD = 0.01
PREDICTED = "predicted"

AlphaMode = Union[float, np.ndarray, str]


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 1
    units: int = 32
    ffn_dim: int = 64
    conv_kernel: int = 7
    left_context: int = 8
    mask_dim: int = 128
    mode: str = ENHANCEMENT
    stop_gradient: bool = True  # E2; False gives E1
    predict_alpha: bool = True  # mask-scalar prediction after the unfreeze step
    beta: float = DEFAULT_BETA
    asr_hidden: int = 64
    asr_seed: int = 1234
    asr_output_scale: float = 0.03  # keeps the weighted ASR term below the mask loss at full lambda

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.left_context < 0:
            raise ConfigError("left_context must be >= 0")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd number")
        if min(self.layers, self.units, self.ffn_dim, self.mask_dim, self.asr_hidden) < 1:
            raise ConfigError("model sizes must be >= 1")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must be in [0, 1)")

    @property
    def input_dim(self) -> int:
        return 2 * self.mask_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrontendParams:
    encoder: dict[str, ad.Tensor]
    theta_irm: dict[str, ad.Tensor]
    theta_alpha: dict[str, ad.Tensor]
    frozen_asr: dict[str, ad.Tensor]

    def groups(self) -> dict[str, dict[str, ad.Tensor]]:
        return {"enc": self.encoder, "irm": self.theta_irm, "alpha": self.theta_alpha, "asr": self.frozen_asr}

    def trainable(self) -> dict[str, ad.Tensor]:
        out = {}
        for prefix in ("enc", "irm", "alpha"):
            for k, t in self.groups()[prefix].items():
                out[f"{prefix}.{k}"] = t
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"{g}.{k}": t.data for g, d in self.groups().items() for k, t in d.items()}

    def copy(self) -> "FrontendParams":
        def dup(d, grad):
            return {k: ad.Tensor(t.data.copy(), requires_grad=grad, name=t.name) for k, t in d.items()}

        return FrontendParams(
            dup(self.encoder, True), dup(self.theta_irm, True), dup(self.theta_alpha, True), dup(self.frozen_asr, False)
        )

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FrontendParams":
        groups: dict[str, dict[str, ad.Tensor]] = {"enc": {}, "irm": {}, "alpha": {}, "asr": {}}
        for full, arr in arrays.items():
            g, k = full.split(".", 1)
            groups[g][k] = ad.Tensor(np.array(arr, dtype=np.float64), requires_grad=g != "asr", name=full)
        return cls(groups["enc"], groups["irm"], groups["alpha"], groups["asr"])


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_frozen_asr(cfg: ModelConfig) -> dict[str, ad.Tensor]:
    """Fixed seed-derived weights; identical for every model sharing ``asr_seed``."""
    rng = np.random.default_rng(cfg.asr_seed)
    d, h = cfg.mask_dim, cfg.asr_hidden
    arrays = {
        "w1": rng.standard_normal((d, h)) / math.sqrt(d),
        "b1": np.zeros(h),
        "conv": rng.standard_normal((3, h)) / math.sqrt(3),
        "conv_b": np.zeros(h),
        "w2": rng.standard_normal((h, h)) / math.sqrt(h),
        "b2": np.zeros(h),
        "out_scale": np.array([cfg.asr_output_scale]),
    }
    return {k: ad.Tensor(v, name=f"asr.{k}") for k, v in arrays.items()}


def init_params(cfg: ModelConfig, seed: int) -> FrontendParams:
    rng = np.random.default_rng(seed)
    u, f, k = cfg.units, cfg.ffn_dim, cfg.conv_kernel
    enc: dict[str, np.ndarray] = {
        "in_w": _uniform(rng, cfg.input_dim, (cfg.input_dim, u)),
        "in_b": np.zeros(u),
    }
    for i in range(cfg.layers):
        p = f"l{i}."
        for norm in ("ln_att", "ln_conv", "ln_ffn"):
            enc[p + norm + "_g"] = np.ones(u)
            enc[p + norm + "_b"] = np.zeros(u)
        for w in ("wq", "wk", "wv", "wo"):
            enc[p + w] = _uniform(rng, u, (u, u))
        enc[p + "conv_k"] = _uniform(rng, k, (k, u))
        enc[p + "conv_b"] = np.zeros(u)
        enc[p + "conv_pw"] = _uniform(rng, u, (u, u))
        enc[p + "ffn_w1"] = _uniform(rng, u, (u, f))
        enc[p + "ffn_b1"] = np.zeros(f)
        enc[p + "ffn_w2"] = _uniform(rng, f, (f, u))
        enc[p + "ffn_b2"] = np.zeros(u)
    enc["out_ln_g"] = np.ones(u)
    enc["out_ln_b"] = np.zeros(u)
    irm = {"w": _uniform(rng, u, (u, cfg.mask_dim)), "b": np.zeros(cfg.mask_dim)}
    alpha = {"w": rng.normal(0.0, THETA_ALPHA_STD, size=(u, 1)), "b": np.zeros(1)}

    def wrap(d, prefix):
        return {k: ad.Tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in d.items()}

    return FrontendParams(wrap(enc, "enc"), wrap(irm, "irm"), wrap(alpha, "alpha"), init_frozen_asr(cfg))


# ---------------------------------------------------------------- forward


def _swish(x: ad.Tensor) -> ad.Tensor:
    return x * ad.sigmoid(x)


def encoder_forward(inputs, params: FrontendParams, cfg: ModelConfig) -> ad.Tensor:
    """frames x input_dim -> frames x units; frame t only sees frames <= t."""
    x = ad.as_tensor(inputs)
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"encoder input dim {x.shape[-1]} != expected {cfg.input_dim}")
    p = params.encoder
    h = x @ p["in_w"] + p["in_b"]
    mask = ad.causal_band_mask(x.shape[-2], cfg.left_context)
    scale = 1.0 / math.sqrt(cfg.units)
    for i in range(cfg.layers):
        q = f"l{i}."
        a = ad.layer_norm(h, p[q + "ln_att_g"], p[q + "ln_att_b"])
        scores = (a @ p[q + "wq"]) @ ad.swapaxes(a @ p[q + "wk"], -1, -2) * scale
        attn = ad.masked_softmax(scores, mask) @ (a @ p[q + "wv"])
        h = h + attn @ p[q + "wo"]

        c = ad.layer_norm(h, p[q + "ln_conv_g"], p[q + "ln_conv_b"])
        c = _swish(ad.causal_depthwise_conv(c, p[q + "conv_k"], p[q + "conv_b"]))
        h = h + c @ p[q + "conv_pw"]

        f = ad.layer_norm(h, p[q + "ln_ffn_g"], p[q + "ln_ffn_b"])
        f = _swish(f @ p[q + "ffn_w1"] + p[q + "ffn_b1"]) @ p[q + "ffn_w2"] + p[q + "ffn_b2"]
        h = h + f
    return ad.layer_norm(h, p["out_ln_g"], p["out_ln_b"])


def mask_decoder(e: ad.Tensor, theta_irm: dict[str, ad.Tensor]) -> ad.Tensor:
    return ad.sigmoid(e @ theta_irm["w"] + theta_irm["b"])


def mask_scalar_net(e: ad.Tensor, theta_alpha: dict[str, ad.Tensor], stop_gradient: bool = True) -> ad.Tensor:
    """Per-frame alpha in (0, 1); with ``stop_gradient`` nothing flows back into ``e``."""
    src = ad.stop_gradient(e) if stop_gradient else e
    z = src @ theta_alpha["w"] + theta_alpha["b"]
    return ad.reshape(ad.sigmoid(z), z.shape[:-1])


def frozen_asr_encoder(features, frozen: dict[str, ad.Tensor]) -> ad.Tensor:
    """Two causal tanh layers with fixed weights; a stand-in for a pretrained ASR encoder."""
    f = ad.as_tensor(features)
    if f.shape[-1] != frozen["w1"].shape[0]:
        raise ValueError(f"ASR feature dim {f.shape[-1]} != frozen encoder input {frozen['w1'].shape[0]}")
    h = ad.tanh(f @ frozen["w1"] + frozen["b1"])
    h = ad.causal_depthwise_conv(h, frozen["conv"], frozen["conv_b"])
    return ad.tanh(h @ frozen["w2"] + frozen["b2"]) * frozen["out_scale"]


def enhanced_features(enhanced: ad.Tensor, asr_mean: np.ndarray, asr_std: np.ndarray) -> ad.Tensor:
    """log -> normalise on features that are already stacked and subsampled."""
    return (ad.log(ad.floor_max(enhanced, LOG_FLOOR)) - asr_mean) / asr_std


@dataclass
class ForwardOutput:
    m_hat: ad.Tensor
    alpha: ad.Tensor | float | np.ndarray
    m_bar: ad.Tensor
    enhanced: ad.Tensor
    asr_features: ad.Tensor
    encoded: ad.Tensor = field(repr=False)

    @property
    def alpha_track(self) -> np.ndarray:
        a = self.alpha
        if isinstance(a, ad.Tensor):
            return a.data
        return np.broadcast_to(np.asarray(a, dtype=np.float64), self.m_hat.shape[:-1]).copy()


def check_mode(cfg: ModelConfig, example_mode: str) -> None:
    if example_mode != cfg.mode:
        channels = {ENHANCEMENT: "(cleaner output, raw mic)", AEC: "(loopback, mic)"}
        raise ValueError(
            f"example mode {example_mode!r} does not match model mode {cfg.mode!r}; "
            f"model expects channels {channels[cfg.mode]}"
        )


def frontend_forward(
    inputs: np.ndarray,
    noisy_stacked: np.ndarray,
    asr_mean: np.ndarray,
    asr_std: np.ndarray,
    params: FrontendParams,
    cfg: ModelConfig,
    alpha_mode: AlphaMode,
    beta: float | None = None,
) -> ForwardOutput:
    """Encoder -> mask -> post-process with fixed or predicted alpha -> masked ASR features.

    ``alpha_mode`` is a fixed scalar, a fixed per-frame array, or ``"predicted"``.
    Arrays may carry a leading batch axis.
    """
    beta = cfg.beta if beta is None else beta
    e = encoder_forward(inputs, params, cfg)
    m_hat = mask_decoder(e, params.theta_irm)
    if isinstance(alpha_mode, str):
        if alpha_mode != PREDICTED:
            raise ValueError(f"unknown alpha mode {alpha_mode!r}")
        alpha: ad.Tensor | float | np.ndarray = mask_scalar_net(e, params.theta_alpha, cfg.stop_gradient)
    else:
        alpha = alpha_mode if np.ndim(alpha_mode) else float(alpha_mode)
    m_bar = postprocess(m_hat, alpha, beta)
    enhanced = ad.mul(noisy_stacked, m_bar)
    feats = enhanced_features(enhanced, asr_mean, asr_std)
    return ForwardOutput(m_hat, alpha, m_bar, enhanced, feats, e)


# ---------------------------------------------------------------- checkpoints


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays plus a JSON header into a byte-stable zip."""
    path = Path(path)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        header = dict(meta, format_version=CHECKPOINT_VERSION,
                      shapes={k: list(np.shape(v)) for k, v in sorted(arrays.items())})
        _zip_write(zf, "meta.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            _zip_write(zf, f"arrays/{name}.bin", arr.tobytes())
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        arrays = {}
        for name, shape in meta["shapes"].items():
            raw = zf.read(f"arrays/{name}.bin")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, meta

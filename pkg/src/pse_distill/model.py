"""Causal E3Net-style PSE network and the causal pVAD teacher."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import Tensor, nn

from .dsp import DEFAULT_STFT, MEL_FLOOR, StftConfig, frame_signal, hann_window, mel_filterbank

_ACTIVATIONS = {"relu": nn.ReLU, "prelu": nn.PReLU, "sigmoid": nn.Sigmoid, "softplus": nn.Softplus}


def _check_dims(cfg) -> None:
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name != "seed" and isinstance(v, int) and not isinstance(v, bool) and v < 1:
            raise ValueError(f"{type(cfg).__name__}.{f.name} must be >= 1, got {v}")


@dataclass
class PseConfig:
    encoder_filters: int = 128
    encoder_kernel: int = 320
    encoder_stride: int = 160
    lstm_blocks: int = 2
    lstm_dim: int = 48
    ffn_dim: int = 96
    dvector_dim: int = 128
    encoder_activation: str = "relu"
    mask_activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        _check_dims(self)
        stft = DEFAULT_STFT
        if self.encoder_kernel != stft.window_samples or self.encoder_stride != stft.hop_samples:
            raise ValueError("encoder kernel/stride must match the STFT window/hop")

    @classmethod
    def full(cls, **kw) -> "PseConfig":
        return cls(encoder_filters=2048, lstm_blocks=4, lstm_dim=256, ffn_dim=1024, **kw)


@dataclass
class PvadConfig:
    input_dim: int = 40
    lstm_blocks: int = 2
    lstm_dim: int = 48
    ffn_dim: int = 96
    dvector_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        _check_dims(self)

    @classmethod
    def full(cls, **kw) -> "PvadConfig":
        return cls(lstm_blocks=3, lstm_dim=256, ffn_dim=1024, **kw)


class LstmBlock(nn.Module):
    """Two-layer feed-forward sublayer, then a unidirectional LSTM, each residual and pre-normed."""

    def __init__(self, dim: int, ffn_dim: int):
        super().__init__()
        self.ffn_norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, dim)
        self.lstm_norm = nn.LayerNorm(dim)
        self.lstm = nn.LSTM(dim, dim, batch_first=True)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.fc2(torch.relu(self.fc1(self.ffn_norm(x))))
        return x + self.lstm(self.lstm_norm(x))[0]


class _Conditioned(nn.Module):
    """Shared trunk: per-frame features + d-vector -> stack of LSTM blocks."""

    def __init__(self, feat_dim: int, dvector_dim: int, dim: int, ffn_dim: int, n_blocks: int):
        super().__init__()
        # fixed d-vector standardisation, set from training speakers
        self.register_buffer("dvec_mean", torch.zeros(dvector_dim))
        self.register_buffer("dvec_scale", torch.ones(dvector_dim))
        self.in_proj = nn.Linear(feat_dim + dvector_dim, dim)
        self.blocks = nn.ModuleList(LstmBlock(dim, ffn_dim) for _ in range(n_blocks))
        self.out_norm = nn.LayerNorm(dim)

    def trunk(self, feats: Tensor, dvec: Tensor) -> Tensor:
        d = (dvec.to(feats.dtype) - self.dvec_mean) * self.dvec_scale
        d = d[:, None, :].expand(-1, feats.shape[1], -1)
        h = self.in_proj(torch.cat([feats, d], dim=-1))
        for block in self.blocks:
            h = block(h)
        return self.out_norm(h)

    @torch.no_grad()
    def set_dvector_stats(self, dvecs: Tensor) -> None:
        dvecs = torch.as_tensor(dvecs, dtype=self.dvec_mean.dtype)
        self.dvec_mean.copy_(dvecs.mean(0))
        self.dvec_scale.copy_(1.0 / dvecs.std(0).clamp_min(1e-4) if len(dvecs) > 1 else torch.ones_like(self.dvec_scale))


class PseNet(_Conditioned):
    def __init__(self, cfg: PseConfig):
        # parameters come from cfg.seed without disturbing the global RNG stream
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            super().__init__(cfg.encoder_filters, cfg.dvector_dim, cfg.lstm_dim, cfg.ffn_dim, cfg.lstm_blocks)
            self.cfg = cfg
            self.encoder = nn.Conv1d(1, cfg.encoder_filters, cfg.encoder_kernel, stride=cfg.encoder_stride)
            self.encoder_act = _ACTIVATIONS[cfg.encoder_activation]()
            self.feat_norm = nn.LayerNorm(cfg.encoder_filters)
            self.mask_fc = nn.Linear(cfg.lstm_dim, cfg.encoder_filters)
            self.mask_act = _ACTIVATIONS[cfg.mask_activation]()
            self.decoder = nn.ConvTranspose1d(
                cfg.encoder_filters, 1, cfg.encoder_kernel, stride=cfg.encoder_stride, bias=False
            )

    def padded_length(self, n: int) -> int:
        k, s = self.cfg.encoder_kernel, self.cfg.encoder_stride
        if n < k:
            raise ValueError(f"input of {n} samples is shorter than the encoder kernel ({k})")
        return k + math.ceil((n - k) / s) * s

    def encode_and_mask(self, x: Tensor, dvec: Tensor) -> tuple[Tensor, Tensor]:
        """Encoded features and masks, both (B, T, encoder_filters)."""
        n = x.shape[-1]
        xp = nn.functional.pad(x, (0, self.padded_length(n) - n))
        enc = self.encoder_act(self.encoder(xp[:, None, :])).transpose(1, 2)
        mask = self.mask_act(self.mask_fc(self.trunk(self.feat_norm(enc), dvec)))
        return enc, mask

    def forward(self, x: Tensor, dvec: Tensor) -> Tensor:
        """(B, N) mixture, (B, 128) d-vector -> (B, N) estimate."""
        enc, mask = self.encode_and_mask(x, dvec)
        y = self.decoder((mask * enc).transpose(1, 2))[:, 0]
        return y[:, : x.shape[-1]]


class LogMel(nn.Module):
    """Differentiable log-mel front end identical to :func:`dsp.log_mel`."""

    def __init__(self, n_mels: int = 40, cfg: StftConfig = DEFAULT_STFT):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("fb", torch.from_numpy(np.array(mel_filterbank(n_mels, cfg)).T.copy()).float(), persistent=False)
        self.register_buffer("window", hann_window(cfg.window_samples, torch.float32), persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        frames = frame_signal(x, self.cfg) * self.window.to(x.dtype)
        spec = torch.fft.rfft(frames, n=self.cfg.fft_size, dim=-1)
        return torch.log((spec.abs() ** 2) @ self.fb.to(x.dtype) + MEL_FLOOR)


class PvadNet(_Conditioned):
    def __init__(self, cfg: PvadConfig):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            super().__init__(cfg.input_dim, cfg.dvector_dim, cfg.lstm_dim, cfg.ffn_dim, cfg.lstm_blocks)
            self.cfg = cfg
            self.frontend = LogMel(cfg.input_dim)
            self.register_buffer("feat_mean", torch.zeros(cfg.input_dim))
            self.register_buffer("feat_scale", torch.ones(cfg.input_dim))
            self.classifier = nn.Linear(cfg.lstm_dim, 2)

    def logits(self, x: Tensor, dvec: Tensor) -> Tensor:
        """(B, N) waveform -> (B, T, 2) logits; class 1 is 'target speaker active'."""
        feats = (self.frontend(x) - self.feat_mean) * self.feat_scale
        return self.classifier(self.trunk(feats, dvec))

    def forward(self, x: Tensor, dvec: Tensor) -> Tensor:
        """Per-frame target-speaker posterior p_ts, shape (B, T)."""
        return torch.softmax(self.logits(x, dvec), dim=-1)[..., 1]

    @torch.no_grad()
    def set_feature_stats(self, feats: Tensor) -> None:
        feats = feats.reshape(-1, feats.shape[-1]).to(self.feat_mean.dtype)
        self.feat_mean.copy_(feats.mean(0))
        self.feat_scale.copy_(1.0 / feats.std(0).clamp_min(1e-3))


def _as_batch(x, dvec, dtype):
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x, dtype=dtype)
    d = dvec.values if hasattr(dvec, "values") else dvec
    d = torch.as_tensor(np.asarray(d) if not isinstance(d, Tensor) else d, dtype=dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x, d = x[None], d[None]
    return x, d, squeeze


def pse_forward(x, d, model: PseNet) -> np.ndarray:
    """Enhance a single waveform (or batch) without tracking gradients."""
    dtype = next(model.parameters()).dtype
    xb, db, squeeze = _as_batch(x, d, dtype)
    with torch.no_grad():
        y = model(xb, db)
    y = y.numpy().astype(np.float64)
    return y[0] if squeeze else y


def pvad_forward(x, d, model: PvadNet) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    xb, db, squeeze = _as_batch(x, d, dtype)
    with torch.no_grad():
        p = model(xb, db)
    p = p.numpy().astype(np.float64)
    return p[0] if squeeze else p


def config_from_dict(kind: str, data: dict):
    cls = {"pse": PseConfig, "pvad": PvadConfig}[kind]
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})


def build_model(kind: str, cfg) -> nn.Module:
    if isinstance(cfg, dict):
        cfg = config_from_dict(kind, cfg)
    return PseNet(cfg) if kind == "pse" else PvadNet(cfg)


def config_dict(cfg) -> dict:
    return asdict(cfg)

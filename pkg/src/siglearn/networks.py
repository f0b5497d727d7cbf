"""Embedder architectures, the recurrent context encoder and the mirrored
convolutional decoders used by the reconstruction baseline.

Both embedders map a window (C, T) to a feature vector of dimension 100 by
default. Layer hyperparameters (kernel sizes, pool widths, filter counts) are
all exposed in the config; the defaults follow the published lineages of the
two architectures: a 3-layer stack with a channel-mixing spatial layer, two
16-filter temporal blocks (conv, batch norm, ReLU, max pool) for 30-s
windows, and a single split temporal+spatial convolution with squaring,
average pooling and a log for short windows.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, InvalidArgumentError


@dataclass
class EmbedderConfig:
    arch: str                  # "stager" | "shallow"
    in_channels: int
    in_samples: int
    out_dim: int = 100
    dropout: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # stager-style fields
    n_filters: int = 16
    temporal_kernel: int = 50      # 0.5 s at 100 Hz
    pool_width: int = 13
    # shallow-style fields
    shallow_filters: int = 40
    shallow_kernel: int = 25
    shallow_pool: int = 75
    shallow_pool_stride: int = 15

    def to_config(self):
        return dict(self.__dict__)

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


def _param(name, array, params):
    t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
    params.append((name, t))
    return t


class StagerNet:
    """Spatial channel mixing, two temporal conv blocks, dropout, linear."""

    def __init__(self, cfg, seed):
        if cfg.arch != "stager":
            raise ConfigError(f"config arch {cfg.arch!r} is not 'stager'")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, t = cfg.in_channels, cfg.in_samples
        k, f, pw = cfg.temporal_kernel, cfg.n_filters, cfg.pool_width
        self.l1 = t - k + 1
        self.p1 = (self.l1 - pw) // pw + 1 if self.l1 >= pw else 0
        self.l2 = self.p1 - k + 1
        self.p2 = (self.l2 - pw) // pw + 1 if self.l2 >= pw else 0
        if min(self.l1, self.p1, self.l2, self.p2) < 1:
            raise ConfigError(
                f"shape arithmetic collapsed: T={t}, kernel={k}, pool={pw} "
                f"give lengths {self.l1}/{self.p1}/{self.l2}/{self.p2}")
        self.flat_dim = c * f * self.p2
        p = []
        self.spatial_w = _param("spatial_w", nn.he_uniform((c, c), c, rng), p)
        self.spatial_b = _param("spatial_b", np.zeros(c), p)
        self.conv1_w = _param("conv1_w", nn.he_uniform((f, 1, k), k, rng), p)
        self.conv1_b = _param("conv1_b", np.zeros(f), p)
        self.bn1_gamma = _param("bn1_gamma", np.ones(f), p)
        self.bn1_beta = _param("bn1_beta", np.zeros(f), p)
        self.conv2_w = _param("conv2_w", nn.he_uniform((f, f, k), f * k, rng),
                              p)
        self.conv2_b = _param("conv2_b", np.zeros(f), p)
        self.bn2_gamma = _param("bn2_gamma", np.ones(f), p)
        self.bn2_beta = _param("bn2_beta", np.zeros(f), p)
        self.fc_w = _param("fc_w",
                           nn.he_uniform((self.flat_dim, cfg.out_dim),
                                         self.flat_dim, rng), p)
        self.fc_b = _param("fc_b", np.zeros(cfg.out_dim), p)
        self._params = p
        self.bn1_state = nn.BatchNormState(f)
        self.bn2_state = nn.BatchNormState(f)

    def forward(self, x, training=False, rng=None):
        cfg = self.cfg
        b, c, t = x.shape
        if (c, t) != (cfg.in_channels, cfg.in_samples):
            raise InvalidArgumentError(
                f"input shape {(c, t)} != configured "
                f"{(cfg.in_channels, cfg.in_samples)}")
        h = ad.transpose(x, (0, 2, 1))
        h = ad.add(ad.matmul(h, self.spatial_w), self.spatial_b)
        h = ad.transpose(h, (0, 2, 1))
        h = ad.reshape(h, (b * c, 1, t))
        h = nn.conv1d(h, self.conv1_w, self.conv1_b)
        h = nn.batch_norm1d(h, self.bn1_gamma, self.bn1_beta, self.bn1_state,
                            training, cfg.bn_momentum, cfg.bn_eps)
        h = ad.relu(h)
        h = nn.max_pool1d(h, cfg.pool_width)
        h = nn.conv1d(h, self.conv2_w, self.conv2_b)
        h = nn.batch_norm1d(h, self.bn2_gamma, self.bn2_beta, self.bn2_state,
                            training, cfg.bn_momentum, cfg.bn_eps)
        h = ad.relu(h)
        h = nn.max_pool1d(h, cfg.pool_width)
        h = ad.reshape(h, (b, self.flat_dim))
        h = nn.dropout(h, cfg.dropout, training, rng)
        return nn.linear(h, self.fc_w, self.fc_b)

    def named_params(self):
        return list(self._params)

    def bn_states(self):
        return [("bn1", self.bn1_state), ("bn2", self.bn2_state)]


class ShallowNet:
    """Split temporal+spatial convolution, square, average pool, log, linear."""

    def __init__(self, cfg, seed):
        if cfg.arch != "shallow":
            raise ConfigError(f"config arch {cfg.arch!r} is not 'shallow'")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, t = cfg.in_channels, cfg.in_samples
        f, k = cfg.shallow_filters, cfg.shallow_kernel
        pl, ps = cfg.shallow_pool, cfg.shallow_pool_stride
        self.l1 = t - k + 1
        self.p1 = (self.l1 - pl) // ps + 1 if self.l1 >= pl else 0
        if min(self.l1, self.p1) < 1:
            raise ConfigError(
                f"shape arithmetic collapsed: T={t}, kernel={k}, pool={pl}")
        self.flat_dim = f * self.p1
        p = []
        self.conv_t_w = _param("conv_t_w", nn.he_uniform((f, 1, k), k, rng), p)
        self.conv_t_b = _param("conv_t_b", np.zeros(f), p)
        self.spatial_w = _param("spatial_w",
                                nn.he_uniform((f * c, f), f * c, rng), p)
        self.spatial_b = _param("spatial_b", np.zeros(f), p)
        self.bn_gamma = _param("bn_gamma", np.ones(f), p)
        self.bn_beta = _param("bn_beta", np.zeros(f), p)
        self.fc_w = _param("fc_w", nn.he_uniform((self.flat_dim, cfg.out_dim),
                                                 self.flat_dim, rng), p)
        self.fc_b = _param("fc_b", np.zeros(cfg.out_dim), p)
        self._params = p
        self.bn_state = nn.BatchNormState(f)

    def forward(self, x, training=False, rng=None):
        cfg = self.cfg
        b, c, t = x.shape
        if (c, t) != (cfg.in_channels, cfg.in_samples):
            raise InvalidArgumentError(
                f"input shape {(c, t)} != configured "
                f"{(cfg.in_channels, cfg.in_samples)}")
        f = cfg.shallow_filters
        h = ad.reshape(x, (b * c, 1, t))
        h = nn.conv1d(h, self.conv_t_w, self.conv_t_b)      # (B*C, F, L1)
        h = ad.reshape(h, (b, c, f, self.l1))
        h = ad.transpose(h, (0, 3, 2, 1))                   # (B, L1, F, C)
        h = ad.reshape(h, (b, self.l1, f * c))
        h = ad.add(ad.matmul(h, self.spatial_w), self.spatial_b)
        h = ad.transpose(h, (0, 2, 1))                      # (B, F, L1)
        h = nn.batch_norm1d(h, self.bn_gamma, self.bn_beta, self.bn_state,
                            training, cfg.bn_momentum, cfg.bn_eps)
        h = ad.square(h)
        h = nn.avg_pool1d(h, cfg.shallow_pool, cfg.shallow_pool_stride)
        h = ad.log(ad.clamp_min(h, 1e-6))
        h = ad.reshape(h, (b, self.flat_dim))
        h = nn.dropout(h, cfg.dropout, training, rng)
        return nn.linear(h, self.fc_w, self.fc_b)

    def named_params(self):
        return list(self._params)

    def bn_states(self):
        return [("bn", self.bn_state)]


def build_embedder(cfg, seed):
    if cfg.arch == "stager":
        return StagerNet(cfg, seed)
    if cfg.arch == "shallow":
        return ShallowNet(cfg, seed)
    raise ConfigError(f"unknown architecture {cfg.arch!r}")


def param_count(module):
    return int(sum(t.size for _, t in module.named_params()))


# ---------------------------------------------------------------------------
# Mirrored decoders (reconstruction baseline)
# ---------------------------------------------------------------------------

class StagerDecoder:
    """Transposed-convolution mirror of StagerNet; output shape equals the
    encoder input shape exactly (trailing output padding absorbs the lengths
    lost to floor division in pooling)."""

    def __init__(self, enc, seed):
        cfg = enc.cfg
        rng = np.random.default_rng(seed)
        c, t = cfg.in_channels, cfg.in_samples
        k, f, pw = cfg.temporal_kernel, cfg.n_filters, cfg.pool_width
        self.enc_cfg = cfg
        self.rem2 = enc.l2 - ((enc.p2 - 1) * pw + pw)
        self.rem1 = enc.l1 - ((enc.p1 - 1) * pw + pw)
        p = []
        self.fc_w = _param("dec_fc_w",
                           nn.he_uniform((cfg.out_dim, enc.flat_dim),
                                         cfg.out_dim, rng), p)
        self.fc_b = _param("dec_fc_b", np.zeros(enc.flat_dim), p)
        self.up2_w = _param("dec_up2_w", nn.he_uniform((f, f, pw), f * pw,
                                                       rng), p)
        self.up2_b = _param("dec_up2_b", np.zeros(f), p)
        self.deconv2_w = _param("dec_deconv2_w",
                                nn.he_uniform((f, f, k), f * k, rng), p)
        self.deconv2_b = _param("dec_deconv2_b", np.zeros(f), p)
        self.up1_w = _param("dec_up1_w", nn.he_uniform((f, f, pw), f * pw,
                                                       rng), p)
        self.up1_b = _param("dec_up1_b", np.zeros(f), p)
        self.deconv1_w = _param("dec_deconv1_w",
                                nn.he_uniform((f, 1, k), f * k, rng), p)
        self.deconv1_b = _param("dec_deconv1_b", np.zeros(1), p)
        self.spatial_w = _param("dec_spatial_w", nn.he_uniform((c, c), c, rng),
                                p)
        self.spatial_b = _param("dec_spatial_b", np.zeros(c), p)
        self._params = p
        self.p2, self.p1 = enc.p2, enc.p1
        self.l2, self.l1 = enc.l2, enc.l1
        # explicit chain check: unpool2 -> deconv2 -> unpool1 -> deconv1
        a = (enc.p2 - 1) * pw + pw + self.rem2
        b = a + k - 1
        d = (b - 1) * pw + pw + self.rem1
        e = d + k - 1
        if (a, b, d, e) != (enc.l2, enc.p1, enc.l1, t):
            raise ConfigError(
                f"decoder shape chain {(a, b, d, e)} does not invert encoder "
                f"{(enc.l2, enc.p1, enc.l1, t)}")

    def forward(self, z, training=False, rng=None):
        cfg = self.enc_cfg
        c, t = cfg.in_channels, cfg.in_samples
        f, k, pw = cfg.n_filters, cfg.temporal_kernel, cfg.pool_width
        b = z.shape[0]
        h = nn.linear(z, self.fc_w, self.fc_b)
        h = ad.relu(h)
        h = ad.reshape(h, (b * c, f, self.p2))
        h = nn.conv_transpose1d(h, self.up2_w, self.up2_b, stride=pw,
                                output_padding=self.rem2)
        h = ad.relu(h)
        h = nn.conv_transpose1d(h, self.deconv2_w, self.deconv2_b)
        h = ad.relu(h)
        h = nn.conv_transpose1d(h, self.up1_w, self.up1_b, stride=pw,
                                output_padding=self.rem1)
        h = ad.relu(h)
        h = nn.conv_transpose1d(h, self.deconv1_w, self.deconv1_b)
        h = ad.reshape(h, (b, c, t))
        h = ad.transpose(h, (0, 2, 1))
        h = ad.add(ad.matmul(h, self.spatial_w), self.spatial_b)
        return ad.transpose(h, (0, 2, 1))

    def named_params(self):
        return list(self._params)

    def bn_states(self):
        return []


class ShallowDecoder:
    """Transposed mirror of ShallowNet (without the squaring/log, which are
    not invertible; the decoder only mirrors the shape arithmetic)."""

    def __init__(self, enc, seed):
        cfg = enc.cfg
        rng = np.random.default_rng(seed)
        c = cfg.in_channels
        f, k = cfg.shallow_filters, cfg.shallow_kernel
        pl, ps = cfg.shallow_pool, cfg.shallow_pool_stride
        self.enc_cfg = cfg
        self.rem = enc.l1 - ((enc.p1 - 1) * ps + pl)
        if self.rem < 0:
            raise ConfigError("pool shape arithmetic cannot be mirrored")
        p = []
        self.fc_w = _param("dec_fc_w", nn.he_uniform((cfg.out_dim,
                                                      enc.flat_dim),
                                                     cfg.out_dim, rng), p)
        self.fc_b = _param("dec_fc_b", np.zeros(enc.flat_dim), p)
        self.unpool_w = _param("dec_unpool_w",
                               nn.he_uniform((f, f, pl), f * pl, rng), p)
        self.unpool_b = _param("dec_unpool_b", np.zeros(f), p)
        self.spatial_w = _param("dec_spatial_w",
                                nn.he_uniform((f, f * c), f, rng), p)
        self.spatial_b = _param("dec_spatial_b", np.zeros(f * c), p)
        self.deconv_w = _param("dec_deconv_w", nn.he_uniform((f, 1, k), f * k,
                                                             rng), p)
        self.deconv_b = _param("dec_deconv_b", np.zeros(1), p)
        self._params = p
        self.p1, self.l1 = enc.p1, enc.l1

    def forward(self, z, training=False, rng=None):
        cfg = self.enc_cfg
        c, t = cfg.in_channels, cfg.in_samples
        f = cfg.shallow_filters
        b = z.shape[0]
        h = nn.linear(z, self.fc_w, self.fc_b)
        h = ad.relu(h)
        h = ad.reshape(h, (b, f, self.p1))
        h = nn.conv_transpose1d(h, self.unpool_w, self.unpool_b,
                                stride=cfg.shallow_pool_stride,
                                output_padding=self.rem)
        h = ad.relu(h)                                     # (B, F, L1)
        h = ad.transpose(h, (0, 2, 1))                     # (B, L1, F)
        h = ad.add(ad.matmul(h, self.spatial_w), self.spatial_b)
        h = ad.reshape(h, (b, self.l1, f, c))
        h = ad.transpose(h, (0, 3, 2, 1))                  # (B, C, F, L1)
        h = ad.reshape(h, (b * c, f, self.l1))
        h = nn.conv_transpose1d(h, self.deconv_w, self.deconv_b)
        return ad.reshape(h, (b, c, t))

    def named_params(self):
        return list(self._params)

    def bn_states(self):
        return []


def build_decoder(embedder, seed):
    if isinstance(embedder, StagerNet):
        return StagerDecoder(embedder, seed)
    if isinstance(embedder, ShallowNet):
        return ShallowDecoder(embedder, seed)
    raise ConfigError(f"no decoder for {type(embedder).__name__}")


# ---------------------------------------------------------------------------
# Recurrent context encoder + bilinear step predictors
# ---------------------------------------------------------------------------

@dataclass
class ContextEncoderConfig:
    input_dim: int = 100
    hidden_dim: int = 100
    n_steps: int = 4     # number of predicted future windows

    def to_config(self):
        return dict(self.__dict__)

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


class ContextEncoder:
    """GRU summarizing a window-embedding sequence, plus one bilinear matrix
    per predicted step."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.gru = nn.gru_params(cfg.input_dim, cfg.hidden_dim, rng)
        self._params = [(f"gru_{k}", v) for k, v in self.gru.items()]
        self.w_step = []
        for k in range(cfg.n_steps):
            t = Tensor(nn.he_uniform((cfg.input_dim, cfg.hidden_dim),
                                     cfg.hidden_dim, rng), requires_grad=True)
            self.w_step.append(t)
            self._params.append((f"w_step_{k}", t))

    def summarize(self, emb_seq):
        """emb_seq (B, S, D) -> context vectors (B, hidden_dim)."""
        return nn.gru_sequence(self.gru, emb_seq)

    def named_params(self):
        return list(self._params)

    def bn_states(self):
        return []

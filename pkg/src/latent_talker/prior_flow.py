"""Autoregressive motion prior with a volume-preserving normalizing flow.

The flow maps motion latents (data side) to a base sequence where an
autoregressive Gaussian, conditioned on audio and seeded by the first
frame's style code, assigns density.  Every step is an actnorm followed by
an affine coupling whose scale/shift nets are causal recurrent networks;
log-scales are mean-centered per frame so the Jacobian log-determinant is
exactly zero and density values pass through the flow unchanged.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .core import DTYPE, GaussianParams, clamp_log_sigma, diag_gaussian_log_prob


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.unsqueeze(0), True
    return x, False


class ActNorm(nn.Module):
    """Per-dimension affine layer; volume preserved by centering log-scales."""

    def __init__(self, dim: int, dtype=DTYPE):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.register_buffer("initialized", torch.zeros((), dtype=dtype))

    def centered_log_scale(self) -> Tensor:
        return self.log_scale - self.log_scale.mean()

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        cls = self.centered_log_scale()
        y = (x - self.bias) * torch.exp(cls)
        log_det = cls.sum() * torch.ones(x.shape[:-2], dtype=x.dtype) * x.shape[-2]
        return y, log_det

    def inverse(self, y: Tensor) -> Tensor:
        cls = self.centered_log_scale()
        return y * torch.exp(-cls) + self.bias

    @torch.no_grad()
    def data_init(self, x: Tensor) -> None:
        """Whiten per dimension from a data batch (up to the common scale
        that volume preservation removes)."""
        flat = x.reshape(-1, x.shape[-1])
        self.bias.copy_(flat.mean(dim=0))
        self.log_scale.copy_(-torch.log(flat.std(dim=0) + 1e-6))
        self.initialized.fill_(1.0)


class CouplingNet(nn.Module):
    """Causal recurrent scale/shift net conditioned on the kept half + audio."""

    def __init__(self, config: ModelConfig, keep_dim: int, trans_dim: int):
        super().__init__()
        self.audio_proj = nn.Linear(config.audio_dim, config.flow_audio_proj)
        self.rnn = nn.LSTM(
            keep_dim + config.flow_audio_proj,
            config.flow_rnn_hidden,
            batch_first=True,
        )
        self.head = nn.Linear(config.flow_rnn_hidden, 2 * trans_dim)
        with torch.no_grad():  # identity transform at init
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.to(config.torch_dtype)

    def forward(self, kept: Tensor | None, audio: Tensor) -> tuple[Tensor, Tensor]:
        a = self.audio_proj(audio)
        inp = a if kept is None else torch.cat([kept, a], dim=-1)
        h, _ = self.rnn(inp)
        s_raw, t = self.head(h).chunk(2, dim=-1)
        return s_raw, t


class AffineCoupling(nn.Module):
    """Affine coupling over channel halves, invertible in a single pass.

    The conditioning half passes through unchanged, so the inverse can
    recompute scales/shifts directly from the output; per-frame log-scales
    are bounded by tanh and mean-centered to keep the step volume
    preserving.
    """

    def __init__(self, config: ModelConfig, parity: int):
        super().__init__()
        d = config.motion_dim
        self.d_keep = d // 2
        self.d_trans = d - self.d_keep
        self.parity = parity
        self.net = CouplingNet(config, self.d_keep, self.d_trans)

    def _split(self, x: Tensor) -> tuple[Tensor | None, Tensor]:
        if self.d_keep == 0:
            return None, x
        if self.parity == 0:
            return x[..., : self.d_keep], x[..., self.d_keep :]
        return x[..., self.d_trans :], x[..., : self.d_trans]

    def _join(self, kept: Tensor | None, trans: Tensor) -> Tensor:
        if kept is None:
            return trans
        if self.parity == 0:
            return torch.cat([kept, trans], dim=-1)
        return torch.cat([trans, kept], dim=-1)

    def _scales(self, kept: Tensor | None, audio: Tensor) -> tuple[Tensor, Tensor]:
        s_raw, t = self.net(kept, audio)
        s = 2.0 * torch.tanh(s_raw)
        s = s - s.mean(dim=-1, keepdim=True)
        return s, t

    def forward(self, x: Tensor, audio: Tensor) -> tuple[Tensor, Tensor]:
        kept, trans = self._split(x)
        s, t = self._scales(kept, audio)
        y = self._join(kept, trans * torch.exp(s) + t)
        return y, s.sum(dim=(-2, -1))

    def inverse(self, y: Tensor, audio: Tensor) -> Tensor:
        kept, trans = self._split(y)
        s, t = self._scales(kept, audio)
        return self._join(kept, (trans - t) * torch.exp(-s))


class MotionFlow(nn.Module):
    """Stack of actnorm + coupling steps mapping motion m to base z.

    ``n_steps = 0`` reduces the flow to the identity (the no-flow ablation).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.actnorms = nn.ModuleList(
            ActNorm(config.motion_dim, dtype=config.torch_dtype)
            for _ in range(config.flow_steps)
        )
        self.couplings = nn.ModuleList(
            AffineCoupling(config, parity=k % 2) for k in range(config.flow_steps)
        )
        self.n_steps = config.flow_steps
        self._dtype = config.torch_dtype

    def forward(self, m: Tensor, audio: Tensor) -> tuple[Tensor, Tensor]:
        """Data -> base; returns (z, log_det) with log_det == 0 up to
        accumulation error under volume preservation."""
        x, squeeze = _promote(m.to(self._dtype))
        audio, _ = _promote(audio.to(self._dtype))
        log_det = torch.zeros(x.shape[0], dtype=x.dtype)
        for actnorm, coupling in zip(self.actnorms, self.couplings):
            x, ld_a = actnorm(x)
            x, ld_c = coupling(x, audio)
            log_det = log_det + ld_a + ld_c
        if squeeze:
            return x[0], log_det[0]
        return x, log_det

    def inverse(self, z: Tensor, audio: Tensor) -> Tensor:
        x, squeeze = _promote(z.to(self._dtype))
        audio, _ = _promote(audio.to(self._dtype))
        for actnorm, coupling in zip(
            reversed(self.actnorms), reversed(self.couplings)
        ):
            x = coupling.inverse(x, audio)
            x = actnorm.inverse(x)
        return x[0] if squeeze else x

    @torch.no_grad()
    def data_init(self, m: Tensor, audio: Tensor) -> None:
        """Data-dependent actnorm initialization from the first batch."""
        x, _ = _promote(m)
        audio, _ = _promote(audio)
        for actnorm, coupling in zip(self.actnorms, self.couplings):
            actnorm.data_init(x)
            x, _ = actnorm(x)
            x, _ = coupling(x, audio)

    @property
    def initialized(self) -> bool:
        return all(bool(a.initialized) for a in self.actnorms)


class MotionPrior(nn.Module):
    """Per-layer autoregressive base: N(mu_0, sigma_0) from the first
    frame's style code, then a recurrent net over (previous base value,
    current audio)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.init_net = nn.Linear(config.style_dim, 2 * config.motion_dim)
        self.audio_proj = nn.Linear(config.audio_dim, config.prior_audio_proj)
        self.rnn = nn.LSTM(
            config.motion_dim + config.prior_audio_proj,
            config.prior_rnn_hidden,
            batch_first=True,
        )
        self.head = nn.Linear(config.prior_rnn_hidden, 2 * config.motion_dim)
        self.motion_dim = config.motion_dim
        self.condition = config.flow_condition
        self.to(config.torch_dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def initial_params(self, w0: Tensor) -> tuple[Tensor, Tensor]:
        mu0, ls0 = self.init_net(w0.to(self.dtype)).chunk(2, dim=-1)
        return mu0, clamp_log_sigma(ls0)

    def base_params(self, cond: Tensor, audio: Tensor, w0: Tensor) -> GaussianParams:
        """Gaussian parameters at every frame given the conditioning history
        cond (z or m, depending on config) and audio."""
        cond, squeeze = _promote(cond.to(self.dtype))
        audio, _ = _promote(audio.to(self.dtype))
        if w0.ndim == 1:
            w0 = w0.unsqueeze(0).expand(cond.shape[0], -1)
        n = cond.shape[1]
        mu0, ls0 = self.initial_params(w0)
        if n == 1:
            mu, ls = mu0.unsqueeze(1), ls0.unsqueeze(1)
        else:
            inp = torch.cat(
                [cond[:, :-1], self.audio_proj(audio[:, 1:])], dim=-1
            )
            h, _ = self.rnn(inp)
            mu_t, ls_t = self.head(h).chunk(2, dim=-1)
            mu = torch.cat([mu0.unsqueeze(1), mu_t], dim=1)
            ls = torch.cat([ls0.unsqueeze(1), ls_t], dim=1)
        if squeeze:
            mu, ls = mu[0], ls[0]
        return GaussianParams(mu, ls)


def prior_log_prob(prior: MotionPrior, flow: MotionFlow, m: Tensor,
                   audio: Tensor, w0: Tensor) -> Tensor:
    """log p'(m_{0:T} | audio, w0) via change of variables through the flow."""
    z, log_det = flow.forward(m, audio)
    cond = z if prior.condition == "base" else m
    gp = prior.base_params(cond, audio, w0)
    return diag_gaussian_log_prob(z, gp.mu, gp.log_sigma).sum(dim=-1) + log_det


def sample_prior(prior: MotionPrior, flow: MotionFlow, audio: Tensor,
                 w_ref: Tensor, *, generator: torch.Generator | None = None,
                 eps: Tensor | None = None) -> Tensor:
    """Draw a motion sequence from the prior, frame by frame.

    ``audio`` is [N, audio_dim] (or batched); the base sequence is sampled
    autoregressively and mapped back through the flow inverse.
    """
    audio_b, squeeze = _promote(audio.to(prior.dtype))
    b, n = audio_b.shape[0], audio_b.shape[1]
    if w_ref.ndim == 1:
        w_ref_b = w_ref.unsqueeze(0).expand(b, -1)
    else:
        w_ref_b = w_ref
    d = prior.motion_dim
    if n == 0:
        empty = audio_b.new_zeros((b, 0, d))
        return empty[0] if squeeze else empty
    if eps is None:
        eps = torch.randn(b, n, d, generator=generator, dtype=prior.dtype)
    elif eps.ndim == 2:
        eps = eps.unsqueeze(0)
    eps = eps.to(prior.dtype)

    mu0, ls0 = prior.initial_params(w_ref_b)
    z = [mu0 + torch.exp(ls0) * eps[:, 0]]
    state = None
    a_proj = prior.audio_proj(audio_b)
    for t in range(1, n):
        if prior.condition == "base":
            cond_prev = z[t - 1]
        else:
            prefix = torch.stack(z, dim=1)
            cond_prev = flow.inverse(prefix, audio_b[:, :t])[:, -1]
        inp = torch.cat([cond_prev, a_proj[:, t]], dim=-1).unsqueeze(1)
        h, state = prior.rnn(inp, state)
        mu_t, ls_t = prior.head(h[:, 0]).chunk(2, dim=-1)
        ls_t = clamp_log_sigma(ls_t)
        z.append(mu_t + torch.exp(ls_t) * eps[:, t])
    z_seq = torch.stack(z, dim=1)
    m = flow.inverse(z_seq, audio_b)
    return m[0] if squeeze else m


def kl_loss(gp_posterior: GaussianParams, m_sample: Tensor, prior: MotionPrior,
            flow: MotionFlow, audio: Tensor, w0: Tensor) -> Tensor:
    """Single-sample KL estimate log q(m) - log p'(m) at a reparameterized
    sample; differentiable through the sample."""
    log_q = gp_posterior.log_prob(m_sample).sum(dim=-1)
    log_p = prior_log_prob(prior, flow, m_sample, audio, w0)
    return log_q - log_p


def randomize_parameters(module: nn.Module, generator: torch.Generator,
                         scale: float = 0.4) -> None:
    """Fill all parameters with seeded Gaussian noise ("trained" stand-in
    for round-trip and volume-preservation property tests)."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))
        for m in module.modules():
            if isinstance(m, ActNorm):
                m.initialized.fill_(1.0)

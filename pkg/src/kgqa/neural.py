"""Differentiable building blocks on top of torch autograd.

Everything here works in float64 for gradient checking and in float32 for
training speed; callers pick the dtype of the parameters.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import nn

from .errors import NumericError, ShapeError

GATES = 4  # input, forget, cell candidate, output


class LSTMDirection(nn.Module):
    """One direction of an LSTM: ``W`` (input-hidden), ``U`` (hidden-hidden), bias ``b``."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.W = nn.Parameter(torch.empty(GATES * hidden_dim, input_dim))
        self.U = nn.Parameter(torch.empty(GATES * hidden_dim, hidden_dim))
        self.b = nn.Parameter(torch.zeros(GATES * hidden_dim))

    def reset_parameters(self, generator: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.hidden_dim)
        with torch.no_grad():
            for p in (self.W, self.U):
                p.copy_(torch.rand(p.shape, generator=generator, dtype=torch.float64) * 2 * bound - bound)
            self.b.zero_()

    def run(self, x: torch.Tensor) -> torch.Tensor:
        """Left-to-right recurrence over ``x`` of shape [B, T, D]; zero initial state."""
        B, T, _ = x.shape
        hdim = self.hidden_dim
        proj = x @ self.W.T + self.b
        h = x.new_zeros(B, hdim)
        c = x.new_zeros(B, hdim)
        outs = []
        for t in range(T):
            z = proj[:, t] + h @ self.U.T
            i = torch.sigmoid(z[:, :hdim])
            f = torch.sigmoid(z[:, hdim:2 * hdim])
            g = torch.tanh(z[:, 2 * hdim:3 * hdim])
            o = torch.sigmoid(z[:, 3 * hdim:])
            c = f * c + i * g
            h = o * torch.tanh(c)
            outs.append(h)
        return torch.stack(outs, dim=1)


def reverse_within_length(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each row's first ``lengths[b]`` steps, leaving padding in place (an involution)."""
    B, T = x.shape[:2]
    steps = torch.arange(T, device=x.device).expand(B, T)
    lens = lengths.view(B, 1)
    idx = torch.where(steps < lens, lens - 1 - steps, steps)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


class BiLSTM(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.forward_dir = LSTMDirection(input_dim, hidden_dim)
        self.backward_dir = LSTMDirection(input_dim, hidden_dim)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.forward_dir.reset_parameters(generator)
        self.backward_dir.reset_parameters(generator)

    def first_layer_weights(self) -> list[torch.Tensor]:
        return [self.forward_dir.W, self.forward_dir.U, self.backward_dir.W, self.backward_dir.U]

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """[B, T, D] -> [B, T, 2H]; outputs beyond ``lengths[b]`` are garbage and must be masked."""
        if x.dim() != 3 or x.shape[-1] != self.input_dim:
            raise ShapeError(f"BiLSTM expects [B, T, {self.input_dim}], got {tuple(x.shape)}")
        if x.shape[1] < 1:
            raise ShapeError("BiLSTM needs at least one time step")
        if not torch.isfinite(x).all():
            raise NumericError("bilstm: non-finite input")
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        fwd = self.forward_dir.run(x)
        bwd = reverse_within_length(self.backward_dir.run(reverse_within_length(x, lengths)), lengths)
        return torch.cat([fwd, bwd], dim=-1)


def bilstm(params: BiLSTM, x: torch.Tensor) -> torch.Tensor:
    """Unbatched convenience wrapper: [T, D] -> [T, 2H]."""
    if x.dim() != 2:
        raise ShapeError(f"bilstm expects [T, D], got {tuple(x.shape)}")
    return params(x.unsqueeze(0))[0]


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    scores = scores - scores.max(dim=dim, keepdim=True).values.detach()
    e = scores.exp()
    return e / e.sum(dim=dim, keepdim=True)


def self_attention(
    w_att: torch.Tensor, H: torch.Tensor, mask: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """``s_t = w . tanh(H_t)``, ``alpha = softmax(s)``, ``context = sum_t alpha_t H_t``.

    Works on [T, 2H] or batched [B, T, 2H] (with an optional [B, T] validity mask).
    """
    if H.shape[-1] != w_att.shape[-1]:
        raise ShapeError(f"attention vector has dim {w_att.shape[-1]}, states have {H.shape[-1]}")
    scores = torch.tanh(H) @ w_att
    weights = masked_softmax(scores, mask)
    context = (weights.unsqueeze(-1) * H).sum(dim=-2)
    return context, weights


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    inner = (-torch.log(u.clamp_min(tiny))).clamp_min(tiny)
    return -torch.log(inner)


def gumbel_softmax(
    logits: torch.Tensor,
    tau: float = 1.0,
    mode: str = "soft",
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Relaxed categorical sample over the last axis.

    ``noise`` fixes the Gumbel perturbation (for gradient checks); otherwise
    it is drawn from ``generator``. Hard mode returns a one-hot of the soft
    sample's argmax with the soft sample's gradient (straight-through).
    """
    if tau <= 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau}")
    if mode not in ("soft", "hard"):
        raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
    if noise is None:
        noise = sample_gumbel(logits.shape, generator, logits.dtype)
    y = masked_softmax((logits + noise) / tau)
    if mode == "soft":
        return y
    return _StraightThrough.apply(y)


def one_hot_argmax(y: torch.Tensor) -> torch.Tensor:
    idx = y.argmax(dim=-1, keepdim=True)
    return torch.zeros_like(y).scatter_(-1, idx, 1.0)


class _StraightThrough(torch.autograd.Function):
    # forward is an exact one-hot; backward treats it as the identity on y
    @staticmethod
    def forward(ctx, y):
        return one_hot_argmax(y)

    @staticmethod
    def backward(ctx, grad):
        return grad


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return (x * x).sum(dim=dim).clamp_min(1e-24).sqrt()


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity along ``dim``; 0 when either operand is the zero vector."""
    dot = (a * b).sum(dim=dim)
    zero = ((a * a).sum(dim=dim) == 0) | ((b * b).sum(dim=dim) == 0)
    c = dot / (safe_norm(a, dim) * safe_norm(b, dim))
    return torch.where(zero, torch.zeros_like(c), c.clamp(-1.0, 1.0))


def maxpool(x: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1, empty_value: float = -1.0) -> torch.Tensor:
    """Max over ``dim`` restricted to ``mask``; ties resolve to the first index.

    Rows with no valid entry yield ``empty_value``.
    """
    if mask is None:
        mask = torch.ones_like(x, dtype=torch.bool)
    filled = x.masked_fill(~mask, float("-inf"))
    idx = filled.argmax(dim=dim, keepdim=True)
    picked = x.gather(dim, idx).squeeze(dim)
    any_valid = mask.any(dim=dim)
    return torch.where(any_valid, picked, torch.full_like(picked, empty_value))


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    y = x @ W
    return y if b is None else y + b


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
    name: str | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn(*inputs)`` must return a scalar; inputs must be float64. The error per
    entry is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    label = name or getattr(fn, "__name__", "op")
    xs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    out = fn(*xs)
    if out.numel() != 1:
        raise ShapeError(f"grad_check: {label} must return a scalar, got shape {tuple(out.shape)}")
    if not torch.isfinite(out):
        raise NumericError(f"grad_check: {label} produced a non-finite value")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, ga in zip(xs, analytic):
            ga = torch.zeros_like(x) if ga is None else ga
            flat = x.view(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                fp = fn(*xs).item()
                flat[k] = orig - eps
                fm = fn(*xs).item()
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"grad_check: {label} produced a non-finite value under perturbation")
                numeric = (fp - fm) / (2 * eps)
                err = abs(gflat[k].item() - numeric) / max(1e-8, abs(numeric))
                worst = max(worst, err)
    return worst

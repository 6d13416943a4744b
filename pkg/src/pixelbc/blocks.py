"""Pre-norm transformer blocks shared by the policy and the IDM."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward with optional boolean mask."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, mlp_ratio * d_model)
        self.fc2 = nn.Linear(mlp_ratio * d_model, d_model)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        # (..., T, D) -> (..., H, T, hd)
        return t.view(*t.shape[:-1], self.n_heads, self.head_dim).transpose(-3, -2)

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        return t.transpose(-3, -2).reshape(*t.shape[:-3], t.shape[-2], -1)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None,
                return_attn: bool = False,
                qk_extra: tuple[torch.Tensor, torch.Tensor] | None = None):
        """Self-attention over x; attn_mask is boolean (True = may attend).

        qk_extra = (q_extra, k_extra) appends pre-scaled columns to the
        per-head queries and keys so additive score biases ride the
        boolean-mask fast path of scaled_dot_product_attention (a float
        mask would force the slow math backend). With augmented width D',
        SDPA computes (q'.k')/sqrt(D'); the main part is pre-scaled back
        to q.k/sqrt(d) and the extra part lands exactly on the bias.
        """
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        n_extra = 0
        if qk_extra is not None:
            q_extra, k_extra = qk_extra
            n_extra = q_extra.shape[-1]
            d_aug = self.head_dim + n_extra
            scale = math.sqrt(d_aug / self.head_dim)
            shape = (*q.shape[:-1], n_extra)
            q = torch.cat([q * scale, q_extra.expand(shape)], dim=-1)
            k = torch.cat([k, k_extra.expand(shape)], dim=-1)
            # Zero-padded values keep SDPA on the equal-width fast kernel;
            # the padded output columns are exact zeros and get sliced off.
            v = F.pad(v, (0, n_extra))
        if return_attn:
            scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
            if attn_mask is not None:
                scores = scores.masked_fill(~attn_mask, float("-inf"))
            attn = scores.softmax(-1)
            o = attn @ v
        else:
            attn = None
            o = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        if n_extra:
            o = o[..., :self.head_dim]
        o = self._merge(o)
        x = x + self.proj(o)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return (x, attn) if return_attn else x

    def forward_buffered(self, x: torch.Tensor, buf_k: torch.Tensor,
                         buf_v: torch.Tensor, n_past: int,
                         attn_bias: torch.Tensor | None = None) -> torch.Tensor:
        """Incremental-decode step over a preallocated key/value buffer.

        x (T, D) writes its keys/values into buf[n_past : n_past+T] and
        attends over buf[:n_past+T]. The caller guarantees every
        buffered key is attendable (retained obs/think tokens plus the
        current step's action prefix), so only the additive relative-step
        bias (H, 1, T_kv) is applied, never a mask. In-place buffer
        writes keep the per-token hot path free of concatenations.
        """
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        t = x.shape[0]
        buf_k[n_past:n_past + t] = k.view(t, self.n_heads, self.head_dim)
        buf_v[n_past:n_past + t] = v.view(t, self.n_heads, self.head_dim)
        k_full = buf_k[:n_past + t].transpose(0, 1)                  # (H, T_kv, hd)
        v_full = buf_v[:n_past + t].transpose(0, 1)
        q = q.view(t, self.n_heads, self.head_dim).transpose(0, 1)   # (H, T, hd)
        o = F.scaled_dot_product_attention(q, k_full, v_full, attn_mask=attn_bias)
        o = o.transpose(0, 1).reshape(t, -1)
        x = x + self.proj(o)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


def seeded_init_(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Deterministic parameter init: Gaussian(std) matrices, unit norms, zero biases.

    Iterates parameters in registration order with one seeded generator,
    so identical (architecture, seed) always yields identical weights.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.dim() >= 2:
                p.normal_(0.0, std, generator=gen)
            elif "bias" in name:
                p.zero_()
            else:
                p.fill_(1.0)  # layer-norm scales

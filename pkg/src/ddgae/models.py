"""Learnable components: GCN encoder and the conditional UNet denoiser.

The encoder turns a padded graph into a 64-dim vector by symmetric-normalized
graph convolutions and mask-aware mean pooling.  The denoiser is a UNet over
the one-channel adjacency grid, conditioned on the timestep embedding and the
encoder vector via additive per-channel biases, with an x_0 probability head
and a pooled bottleneck tap that supplies the second half of the final
embedding.

There are deliberately no normalization layers: feature maps are re-masked to
the real-node block after every stage, which keeps all real-slot outputs (and
hence the loss) independent of how much padding a graph carries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal features of the timestep at geometrically spaced frequencies.

    First half sine, second half cosine, so t = 0 maps to zeros and ones.
    Accepts a scalar (returns (dim,)) or a 1-D tensor/array (returns (B, dim)).
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    scalar = not torch.is_tensor(t) and not hasattr(t, "__len__")
    if torch.is_tensor(t) and t.is_floating_point():
        dtype = t.dtype
    else:
        dtype = torch.get_default_dtype()
    tt = torch.as_tensor(t).to(dtype).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=tt.device) / max(half - 1, 1)
    )
    ang = tt * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb[0] if scalar else emb


def gcn_normalize(adjacency: torch.Tensor, node_mask: torch.Tensor) -> torch.Tensor:
    """Symmetric degree normalization with self-loops on real nodes only.

    Rows and columns of padded nodes come out all-zero.  Works on (N, N) or
    batched (B, N, N) inputs.
    """
    adj = adjacency if adjacency.is_floating_point() else adjacency.to(torch.get_default_dtype())
    mask = node_mask.to(adj.dtype)
    eye = torch.eye(adj.shape[-1], dtype=adj.dtype, device=adj.device)
    a_tilde = adj + eye * mask.unsqueeze(-1)
    deg = a_tilde.sum(-1)
    d_inv_sqrt = torch.where(deg > 0, deg.clamp_min(1e-12).rsqrt(), torch.zeros_like(deg))
    return a_tilde * d_inv_sqrt.unsqueeze(-1) * d_inv_sqrt.unsqueeze(-2)


class GraphEncoder(nn.Module):
    """Stacked GCN layers followed by mask-aware mean pooling."""

    def __init__(self, in_dim: int, hidden_dim: int = 128, out_dim: int = 64, n_layers: int = 3):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one layer")
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(n_layers))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(
        self, adjacency: torch.Tensor, features: torch.Tensor, node_mask: torch.Tensor
    ) -> torch.Tensor:
        """(B, N, N), (B, N, F), (B, N) -> graph embedding (B, out_dim)."""
        squeeze = adjacency.dim() == 2
        if squeeze:
            adjacency, features, node_mask = (
                adjacency.unsqueeze(0),
                features.unsqueeze(0),
                node_mask.unsqueeze(0),
            )
        n_real = node_mask.sum(-1)
        if (n_real == 0).any():
            raise ValueError("graph with zero real nodes")
        a_hat = gcn_normalize(adjacency.to(features.dtype), node_mask)
        m = node_mask.to(features.dtype).unsqueeze(-1)
        h = features
        for i, layer in enumerate(self.layers):
            h = layer(a_hat @ h) * m
            if i < len(self.layers) - 1:
                h = F.relu(h)
        pooled = h.sum(1) / n_real.to(h.dtype).unsqueeze(-1)
        return pooled[0] if squeeze else pooled


@dataclass
class DenoiserOutput:
    """Symmetrized, masked x_0 probabilities plus the pooled bottleneck tap."""

    x0_probs: torch.Tensor
    h_int: torch.Tensor


class _CondBlock(nn.Module):
    """Two 3x3 convs with an additive conditioning bias in between.

    The spatial mask is applied before the second conv as well: a conv
    reading bias-colored padded cells would otherwise leak padding into the
    real block, making outputs depend on the amount of padding.
    """

    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.cond = nn.Linear(cond_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = (h + self.cond(cond)[:, :, None, None]) * m
        return F.silu(self.conv2(h)) * m


class AdjacencyDenoiser(nn.Module):
    """Conditional UNet over the noisy adjacency grid.

    Predicts per-edge x_0 probabilities (logits symmetrized before the
    sigmoid, masked to real node pairs) and taps the bottleneck with global
    average pooling projected to `h_int_dim`.
    """

    def __init__(
        self,
        widths: tuple[int, ...] = (32, 64, 128),
        cond_dim: int = 128,
        temb_dim: int = 64,
        z_dim: int = 64,
        h_int_dim: int = 64,
        zero_init_head: bool = True,
    ):
        super().__init__()
        if len(widths) < 1:
            raise ValueError("need at least one level")
        self.levels = len(widths)
        self.temb_dim = temb_dim
        self.z_dim = z_dim
        self.temb_mlp = nn.Sequential(
            nn.Linear(temb_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim)
        )
        self.z_proj = nn.Linear(z_dim, cond_dim)

        w = list(widths)
        deeper = w[1:] + [w[-1]]  # channel width one level down
        self.stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(_CondBlock(w[i], w[i], cond_dim) for i in range(self.levels))
        self.downsamples = nn.ModuleList(
            nn.Conv2d(w[i], deeper[i], 4, stride=2, padding=1) for i in range(self.levels)
        )
        self.bottleneck = _CondBlock(w[-1], w[-1], cond_dim)
        self.tap = nn.Linear(w[-1], h_int_dim)
        self.upsamples = nn.ModuleList(
            nn.ConvTranspose2d(deeper[i], w[i], 4, stride=2, padding=1)
            for i in reversed(range(self.levels))
        )
        self.up_blocks = nn.ModuleList(
            _CondBlock(2 * w[i], w[i], cond_dim) for i in reversed(range(self.levels))
        )
        self.head = nn.Conv2d(w[0], 1, 1)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(
        self, a_t: torch.Tensor, t, z_enc: torch.Tensor, edge_mask: torch.Tensor
    ) -> DenoiserOutput:
        """(B, N, N) or (N, N) noisy bits -> x0 probabilities and bottleneck tap."""
        squeeze = a_t.dim() == 2
        if squeeze:
            a_t, z_enc, edge_mask = a_t.unsqueeze(0), z_enc.unsqueeze(0), edge_mask.unsqueeze(0)
        b, n, n2 = a_t.shape
        if n != n2 or edge_mask.shape != a_t.shape:
            raise ValueError(f"adjacency/mask shape mismatch: {tuple(a_t.shape)}")
        if z_enc.shape != (b, self.z_dim):
            raise ValueError(f"conditioning shape {tuple(z_enc.shape)} != ({b}, {self.z_dim})")
        if n % (2**self.levels) != 0:
            raise ValueError(f"grid size {n} not divisible by 2^{self.levels}")
        dtype = self.stem.weight.dtype
        x = a_t.to(dtype).unsqueeze(1)
        emask = edge_mask.to(dtype)

        # Real-node block mask (diagonal included, unlike the edge mask), then
        # max-pooled once per level so every resolution has a matching mask.
        block = (emask + torch.eye(n, dtype=dtype, device=x.device) * emask.amax(-1).unsqueeze(-1)).clamp(max=1.0)
        masks = [block.unsqueeze(1)]
        for _ in range(self.levels):
            masks.append(F.max_pool2d(masks[-1], 2))

        t_vec = torch.as_tensor(t, device=x.device).reshape(-1).to(dtype)
        if t_vec.numel() == 1 and b > 1:
            t_vec = t_vec.expand(b)
        if t_vec.numel() != b:
            raise ValueError(f"{t_vec.numel()} timesteps for batch of {b}")
        temb = time_embedding(t_vec, self.temb_dim)
        cond = self.temb_mlp(temb) + self.z_proj(z_enc.to(dtype))

        h = self.stem(x) * masks[0]
        skips = []
        for i in range(self.levels):
            h = self.down_blocks[i](h, cond) * masks[i]
            skips.append(h)
            h = self.downsamples[i](h) * masks[i + 1]
        h = self.bottleneck(h, cond) * masks[-1]
        h_int = self.tap(h.mean(dim=(2, 3)))
        for j in range(self.levels):
            i = self.levels - 1 - j
            h = self.upsamples[j](h) * masks[i]
            h = self.up_blocks[j](torch.cat([h, skips[i]], dim=1), cond) * masks[i]
        logits = self.head(h).squeeze(1)
        logits = 0.5 * (logits + logits.transpose(-1, -2))
        probs = torch.sigmoid(logits) * emask
        if squeeze:
            return DenoiserOutput(x0_probs=probs[0], h_int=h_int[0])
        return DenoiserOutput(x0_probs=probs, h_int=h_int)

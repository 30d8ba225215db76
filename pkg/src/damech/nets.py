"""Parameterized mechanism networks mapping market instances to outcomes.

The mechanism takes per-agent tokens (report, support low, support high,
quantity), runs side-specific self-attention encoders, decodes prices and
offers through cross-attention against the opposite side, and fills the
allocation matrix from a pairwise bilinear head over cross-attended
embeddings. Two constraint layers make every outcome exactly feasible and
individually rational:

* allocation scaling: supplier (column) pass, then consumer (row) pass;
* payment clamping: consumer prices capped at bid * allocation, supplier
  offers floored at ask * allocation.

No positional encodings anywhere, so relabeling agents relabels outputs and
one trained model serves any market size. An MLP variant (size-bound by
construction) exists for ablations.

All attention blocks run batched over padded tensors; padded rows are masked
out of attention and zeroed in outputs, so padding never leaks into real
agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .market import MarketInstance


@dataclass(frozen=True)
class ArchConfig:
    """Transformer sizing; hidden width must split evenly over heads."""

    hidden: int = 256
    layers: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("hidden, layers, heads must all be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")


@dataclass
class MarketBatch:
    """Padded tensor view of a list of market instances.

    All per-consumer tensors have shape (B, M) and per-supplier tensors
    (B, N), where M/N are the batch maxima. Masks are True on real agents.
    """

    bids: torch.Tensor
    asks: torch.Tensor
    bid_low: torch.Tensor
    bid_high: torch.Tensor
    ask_low: torch.Tensor
    ask_high: torch.Tensor
    demand: torch.Tensor
    supply: torch.Tensor
    consumer_mask: torch.Tensor
    supplier_mask: torch.Tensor

    @classmethod
    def from_instances(cls, instances: list[MarketInstance], dtype=torch.float32) -> "MarketBatch":
        if not instances:
            raise ValueError("empty batch")
        ms = [inst.m for inst in instances]
        ns = [inst.n for inst in instances]
        b, mmax, nmax = len(instances), max(ms), max(ns)

        def pad(rows, width):
            out = np.zeros((b, width))
            for k, row in enumerate(rows):
                out[k, : len(row)] = row
            return torch.as_tensor(out, dtype=dtype)

        cmask = torch.zeros(b, mmax, dtype=torch.bool)
        smask = torch.zeros(b, nmax, dtype=torch.bool)
        for k, (m, n) in enumerate(zip(ms, ns)):
            cmask[k, :m] = True
            smask[k, :n] = True
        return cls(
            bids=pad([i.bids for i in instances], mmax),
            asks=pad([i.asks for i in instances], nmax),
            bid_low=pad([i.bid_low for i in instances], mmax),
            bid_high=pad([i.bid_high for i in instances], mmax),
            ask_low=pad([i.ask_low for i in instances], nmax),
            ask_high=pad([i.ask_high for i in instances], nmax),
            demand=pad([i.demand for i in instances], mmax),
            supply=pad([i.supply for i in instances], nmax),
            consumer_mask=cmask,
            supplier_mask=smask,
        )

    @property
    def size(self) -> int:
        return self.bids.shape[0]

    def with_bids(self, bids: torch.Tensor) -> "MarketBatch":
        """Copy with consumer reports swapped in (keeps gradient history of ``bids``)."""
        return replace(self, bids=bids * self.consumer_mask)

    def with_asks(self, asks: torch.Tensor) -> "MarketBatch":
        return replace(self, asks=asks * self.supplier_mask)

    def consumer_tokens(self) -> torch.Tensor:
        return torch.stack([self.bids, self.bid_low, self.bid_high, self.demand], dim=-1)

    def supplier_tokens(self) -> torch.Tensor:
        return torch.stack([self.asks, self.ask_low, self.ask_high, self.supply], dim=-1)


def scale_allocation(q_raw, demand, supply, eps: float = 0.0):
    """Shrink columns over supply, then rows over demand.

    Scaling only fires on strict violation, so an exactly-binding sum passes
    through untouched (and keeps the identity branch's gradient). Denominators
    are guarded before the division so no 0/0 can poison gradients. Row
    factors are <= 1, hence the row pass cannot re-break column caps.
    """
    colsum = q_raw.sum(dim=-2)
    safe = torch.where(colsum > 0, colsum, torch.ones_like(colsum))
    col_factor = torch.where(colsum > supply + eps, supply / safe, torch.ones_like(colsum))
    q = q_raw * col_factor.unsqueeze(-2)

    rowsum = q.sum(dim=-1)
    safe = torch.where(rowsum > 0, rowsum, torch.ones_like(rowsum))
    row_factor = torch.where(rowsum > demand + eps, demand / safe, torch.ones_like(rowsum))
    return q * row_factor.unsqueeze(-1)


def clamp_payments(p_raw, s_raw, q, bids, asks):
    """Cap prices at bid * allocation and floor offers at ask * allocation.

    At an exactly-binding cap the raw branch (identity gradient) is kept.
    """
    p_cap = bids * q.sum(dim=-1)
    s_floor = asks * q.sum(dim=-2)
    p = torch.where(p_raw <= p_cap, p_raw, p_cap)
    s = torch.where(s_raw >= s_floor, s_raw, s_floor)
    return p, s


def _check_finite_inputs(batch: MarketBatch) -> None:
    for name in ("bids", "asks", "demand", "supply"):
        if not torch.isfinite(getattr(batch, name)).all():
            raise ValueError(f"non-finite entries in batch {name}")


# Head offsets put the fresh model strictly inside the participation region:
# a sparse allocation, prices well under the bid cap, offers well over the
# ask floor. Both clamp branches then start on their identity side, so price
# and offer gradients are alive from the first update instead of being cut
# by a binding cap or floor.
PAIR_BIAS0 = -2.0
PRICE_BIAS0 = -4.0
OFFER_BIAS0 = 2.0


class AttentionMechanismNet(nn.Module):
    """Set-transformer mechanism: encoders, price/offer decoders, matching head."""

    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int | None = 0):
        super().__init__()
        self.arch = arch
        h, ff = arch.hidden, 4 * arch.hidden

        def enc_layer():
            return nn.TransformerEncoderLayer(
                h, arch.heads, dim_feedforward=ff, dropout=0.0, batch_first=True
            )

        def dec_layer():
            return nn.TransformerDecoderLayer(
                h, arch.heads, dim_feedforward=ff, dropout=0.0, batch_first=True
            )

        self.consumer_proj = nn.Linear(4, h)
        self.supplier_proj = nn.Linear(4, h)
        self.consumer_encoder = nn.ModuleList(enc_layer() for _ in range(arch.layers))
        self.supplier_encoder = nn.ModuleList(enc_layer() for _ in range(arch.layers))
        self.price_decoder = nn.ModuleList(dec_layer() for _ in range(arch.layers))
        self.offer_decoder = nn.ModuleList(dec_layer() for _ in range(arch.layers))
        self.match_attn = nn.MultiheadAttention(h, arch.heads, dropout=0.0, batch_first=True)
        self.pair_weight = nn.Parameter(torch.empty(h, h))
        self.pair_bias = nn.Parameter(torch.zeros(()))
        self.price_head = nn.Linear(h, 1)
        self.offer_head = nn.Linear(h, 1)
        if seed is not None:
            init_parameters(self, seed)
        else:
            self.apply_head_offsets()

    def apply_head_offsets(self) -> None:
        with torch.no_grad():
            self.pair_bias.fill_(PAIR_BIAS0)
            self.price_head.bias.fill_(PRICE_BIAS0)
            self.offer_head.bias.fill_(OFFER_BIAS0)

    def forward_raw(self, batch: MarketBatch):
        """Unconstrained nonnegative (Q, p, s); padded slots already zeroed."""
        _check_finite_inputs(batch)
        cpad = ~batch.consumer_mask
        spad = ~batch.supplier_mask

        ec = self.consumer_proj(batch.consumer_tokens())
        for layer in self.consumer_encoder:
            ec = layer(ec, src_key_padding_mask=cpad)
        em = self.supplier_proj(batch.supplier_tokens())
        for layer in self.supplier_encoder:
            em = layer(em, src_key_padding_mask=spad)

        hp = ec
        for layer in self.price_decoder:
            hp = layer(hp, em, tgt_key_padding_mask=cpad, memory_key_padding_mask=spad)
        hs = em
        for layer in self.offer_decoder:
            hs = layer(hs, ec, tgt_key_padding_mask=spad, memory_key_padding_mask=cpad)

        matched, _ = self.match_attn(ec, em, em, key_padding_mask=spad, need_weights=False)
        q_score = torch.einsum("bmh,hk,bnk->bmn", matched, self.pair_weight, em) + self.pair_bias

        pair_mask = batch.consumer_mask.unsqueeze(-1) & batch.supplier_mask.unsqueeze(-2)
        q_raw = nn.functional.softplus(q_score) * pair_mask
        p_raw = nn.functional.softplus(self.price_head(hp).squeeze(-1)) * batch.consumer_mask
        s_raw = nn.functional.softplus(self.offer_head(hs).squeeze(-1)) * batch.supplier_mask
        return q_raw, p_raw, s_raw

    def forward(self, batch: MarketBatch):
        q_raw, p_raw, s_raw = self.forward_raw(batch)
        q = scale_allocation(q_raw, batch.demand, batch.supply)
        p, s = clamp_payments(p_raw, s_raw, q, batch.bids, batch.asks)
        return q, p, s


class MlpMechanismNet(nn.Module):
    """Fully connected ablation; the market size is fixed at construction."""

    def __init__(self, m: int, n: int, hidden: int = 256, layers: int = 4, seed: int | None = 0):
        super().__init__()
        if m < 1 or n < 1:
            raise ValueError("m and n must be >= 1")
        self.m, self.n = m, n
        width = 4 * (m + n)
        blocks: list[nn.Module] = []
        for _ in range(layers):
            blocks += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        self.body = nn.Sequential(*blocks)
        self.out_head = nn.Linear(width, m * n + m + n)
        if seed is not None:
            init_parameters(self, seed)
        else:
            self.apply_head_offsets()

    def apply_head_offsets(self) -> None:
        m, n = self.m, self.n
        with torch.no_grad():
            bias = self.out_head.bias
            bias[: m * n].fill_(PAIR_BIAS0)
            bias[m * n : m * n + m].fill_(PRICE_BIAS0)
            bias[m * n + m :].fill_(OFFER_BIAS0)

    def _check_sizes(self, batch: MarketBatch) -> None:
        if batch.consumer_mask.shape[1] != self.m or batch.supplier_mask.shape[1] != self.n:
            raise ValueError(
                f"model built for ({self.m}, {self.n}) agents, "
                f"got ({batch.consumer_mask.shape[1]}, {batch.supplier_mask.shape[1]})"
            )
        if not (batch.consumer_mask.all() and batch.supplier_mask.all()):
            raise ValueError("MLP mechanism cannot handle padded (variable-size) batches")

    def forward_raw(self, batch: MarketBatch):
        _check_finite_inputs(batch)
        self._check_sizes(batch)
        flat = torch.cat(
            [batch.consumer_tokens().flatten(1), batch.supplier_tokens().flatten(1)], dim=1
        )
        out = nn.functional.softplus(self.out_head(self.body(flat)))
        m, n = self.m, self.n
        q_raw = out[:, : m * n].reshape(-1, m, n)
        p_raw = out[:, m * n : m * n + m]
        s_raw = out[:, m * n + m :]
        return q_raw, p_raw, s_raw

    def forward(self, batch: MarketBatch):
        q_raw, p_raw, s_raw = self.forward_raw(batch)
        q = scale_allocation(q_raw, batch.demand, batch.supply)
        p, s = clamp_payments(p_raw, s_raw, q, batch.bids, batch.asks)
        return q, p, s


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled init, independent of torch's global RNG.

    Matrices get U(-1/sqrt(fan_in), +1/sqrt(fan_in)); vector weights
    (normalization gains) get 1; everything else (biases) gets 0. A module
    that defines ``apply_head_offsets`` gets its structural offsets restored
    afterwards, so reseeding in place matches a freshly built model.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.dim() >= 2:
                bound = 1.0 / math.sqrt(param.shape[1:].numel())
                param.uniform_(-bound, bound, generator=gen)
            elif name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()
    offsets = getattr(module, "apply_head_offsets", None)
    if offsets is not None:
        offsets()


def parameter_blocks(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Named parameters in registration order; the flat layout contract."""
    return list(module.named_parameters())


def flatten_parameters(module: nn.Module) -> np.ndarray:
    return np.concatenate(
        [p.detach().cpu().numpy().ravel() for _, p in parameter_blocks(module)]
    )


def load_flat_parameters(module: nn.Module, flat: np.ndarray) -> None:
    flat = np.asarray(flat)
    offset = 0
    with torch.no_grad():
        for _, param in parameter_blocks(module):
            k = param.numel()
            chunk = flat[offset : offset + k].reshape(param.shape)
            param.copy_(torch.as_tensor(chunk, dtype=param.dtype))
            offset += k
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, model needs {offset}")


def flatten_gradients(module: nn.Module) -> np.ndarray:
    """Flat float64 gradient vector; parameters without grads contribute zeros."""
    parts = []
    for _, param in parameter_blocks(module):
        if param.grad is None:
            parts.append(np.zeros(param.numel()))
        else:
            parts.append(param.grad.detach().cpu().numpy().astype(np.float64).ravel())
    return np.concatenate(parts)

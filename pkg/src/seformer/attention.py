"""Attention units over lattice-interpolated virtual keys.

Two unit families share one skeleton: the vanilla unit applies a single
shared value transform to every key, while the structure-embedding unit
draws each key's value transform from a 27-slot pool keyed by the key's
lattice offset from the query (plus one fallback slot for keys sampled
without a lattice, e.g. by ball query).  Multi-head units split the
channel axis into per-head sub-units; the per-head pre-projection sums are
concatenated and passed through one output projection, then the residual
and layer normalization.

Invalid (empty) keys either contribute a learned empty-token feature
through the standard path (default) or are masked out of the softmax
(ablation mode).  A debug mode asserts that every attention call's
coefficients sum to one within 1e-12.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, NumericError, ShapeError
from .geometry import FALLBACK_SLOT, GridOffset, VirtualKeySet

_DEBUG_ATTENTION = False
_ATTENTION_CALLS = 0
_MASK_LOGIT = -1e30


def set_attention_debug(enabled: bool) -> None:
    """When enabled, every attention call asserts sum(alpha) == 1 +- 1e-12."""
    global _DEBUG_ATTENTION, _ATTENTION_CALLS
    _DEBUG_ATTENTION = bool(enabled)
    _ATTENTION_CALLS = 0


def attention_call_count() -> int:
    return _ATTENTION_CALLS


def _debug_check_alpha(alpha: np.ndarray) -> None:
    global _ATTENTION_CALLS
    if not _DEBUG_ATTENTION:
        return
    _ATTENTION_CALLS += 1
    err = np.abs(alpha.sum(axis=-1) - 1.0).max()
    if err > 1e-12:
        raise NumericError(f"attention coefficients sum off by {err:.3e}")


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-parameter stream derived from (seed, name)."""
    digest = hashlib.sha256(name.encode()).digest()
    salt = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, salt]))


def uniform_param(seed: int, name: str, shape, fan_in: int) -> Tensor:
    scale = 1.0 / math.sqrt(max(fan_in, 1))
    data = param_rng(seed, name).uniform(-scale, scale, size=shape)
    return Tensor(data, requires_grad=True)


class Linear:
    """Dense layer on 2-D inputs."""

    def __init__(self, seed: int, name: str, n_in: int, n_out: int, bias: bool = True):
        self.w = uniform_param(seed, name + ".w", (n_in, n_out), n_in)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.b is not None:
            return ad.matmul_bias(x, self.w, self.b)
        return ad.matmul(x, self.w)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {prefix + ".w": self.w}
        if self.b is not None:
            out[prefix + ".b"] = self.b
        return out


class PositionEncoder:
    """Two-layer perceptron mapping a 3-vector displacement to ``width`` reals."""

    def __init__(self, seed: int, name: str, width: int, hidden: int):
        self.l1 = Linear(seed, name + ".l1", 3, hidden)
        self.l2 = Linear(seed, name + ".l2", hidden, width)

    def __call__(self, displacements: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(displacements, dtype=np.float64).reshape(-1, 3))
        return self.l2(ad.tanh(self.l1(x)))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.l1.named_parameters(prefix + ".pe.l1"),
                **self.l2.named_parameters(prefix + ".pe.l2")}


class AttentionCore:
    """Query/key projections plus relative position encoding, width ``c``."""

    def __init__(self, seed: int, name: str, width: int, pe_hidden: int):
        self.width = width
        self.w_q = uniform_param(seed, name + ".w_q", (width, width), width)
        self.w_k = uniform_param(seed, name + ".w_k", (width, width), width)
        self.pos_enc = PositionEncoder(seed, name, width, pe_hidden)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {prefix + ".w_q": self.w_q, prefix + ".w_k": self.w_k,
                **self.pos_enc.named_parameters(prefix)}


class ValuePool:
    """27 offset-keyed value matrices, one fallback, one empty-token vector."""

    def __init__(self, seed: int, name: str, width: int):
        self.width = width
        self.mats = [uniform_param(seed, f"{name}.wv({off.i},{off.j},{off.k})",
                                   (width, width), width)
                     for off in (GridOffset.from_flat(s) for s in range(27))]
        self.fallback = uniform_param(seed, name + ".fallback", (width, width), width)
        self.empty = uniform_param(seed, name + ".empty", (width,), width)

    def lookup(self, offset: GridOffset | None) -> Tensor:
        if offset is None:
            return self.fallback
        return self.mats[offset.flat]

    def stacked(self) -> Tensor:
        return ad.stack0(self.mats + [self.fallback])

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for s, m in enumerate(self.mats):
            off = GridOffset.from_flat(s)
            out[f"{prefix}.pool.wv({off.i},{off.j},{off.k})"] = m
        out[prefix + ".pool.fallback"] = self.fallback
        out[prefix + ".pool.empty"] = self.empty
        return out


def value_weight_lookup(pool: ValuePool, offset: GridOffset | None) -> Tensor:
    """Pool matrix for a lattice offset; the fallback matrix for ``None``."""
    return pool.lookup(offset)


class AttentionKeys:
    """Uniform batched key layout consumed by the units.

    ``features`` is (Q, S, C) (tensor or array), ``displacements`` (Q, S, 3),
    ``valid`` (Q, S) bool, and ``slots`` (S,) value-pool slots shared by all
    queries in the batch.  ``shared_displacements`` (S, 3), when given,
    asserts every query sees the same displacement pattern, letting the
    position encoder run once per key instead of once per (query, key).
    """

    def __init__(self, features, displacements, valid, slots,
                 shared_displacements: np.ndarray | None = None):
        self.features = features if isinstance(features, Tensor) else Tensor(features)
        self.displacements = np.asarray(displacements, dtype=np.float64)
        self.valid = np.asarray(valid, dtype=bool)
        self.slots = np.asarray(slots, dtype=np.intp)
        self.shared_displacements = shared_displacements
        q, s, _ = self.features.shape
        if self.displacements.shape != (q, s, 3) or self.valid.shape != (q, s) \
                or self.slots.shape != (s,):
            raise ShapeError("AttentionKeys: inconsistent component shapes")

    @property
    def n_keys(self) -> int:
        return self.features.shape[1]

    @staticmethod
    def from_virtual(ks: VirtualKeySet) -> "AttentionKeys":
        disp = ks.displacements()
        return AttentionKeys(ks.features[None, :, :], disp[None, :, :],
                             ks.valid[None, :], ks.slots,
                             shared_displacements=disp)

    @staticmethod
    def from_pairs(pairs) -> "AttentionKeys":
        """Keys given as (feature, displacement) pairs; no lattice offsets."""
        pairs = list(pairs)
        if not pairs:
            raise ContractError("attention over an empty key list")
        feats = np.stack([np.asarray(f, dtype=np.float64) for f, _ in pairs])
        disp = np.stack([np.asarray(d, dtype=np.float64) for _, d in pairs])
        valid = np.ones(len(pairs), dtype=bool)
        slots = np.full(len(pairs), FALLBACK_SLOT)
        return AttentionKeys(feats[None], disp[None], valid[None], slots,
                             shared_displacements=disp)


def _as_2d(x, width: int) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 1:
        t = ad.reshape(t, (1, t.shape[0]))
    if t.ndim != 2 or t.shape[1] != width:
        raise ShapeError(f"query features must be (Q, {width}), got {t.shape}")
    return t


class AttentionUnit:
    """Shared skeleton of the vanilla and structure-embedding units."""

    kind = "base"

    def __init__(self, width: int, heads: int = 1, pe_hidden: int = 16,
                 seed: int = 0, name: str = "unit", residual: bool = True,
                 normalize: bool = True, empty_policy: str = "embed",
                 pe_enabled: bool = True):
        if heads < 1 or width % heads != 0:
            raise ShapeError(f"head count {heads} must divide width {width}")
        if empty_policy not in ("embed", "mask"):
            raise ContractError(f"unknown empty policy {empty_policy!r}")
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        self.residual = residual
        self.normalize = normalize
        self.empty_policy = empty_policy
        self.pe_enabled = pe_enabled
        self.cores = [AttentionCore(seed, f"{name}.h{i}", self.head_width, pe_hidden)
                      for i in range(heads)]
        self._init_values(seed, name)
        self.out_proj = uniform_param(seed, name + ".proj", (width, width), width)
        self.norm_gain = Tensor(np.ones(width), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(width), requires_grad=True)

    # per-kind hooks -------------------------------------------------------
    def _init_values(self, seed, name):
        raise NotImplementedError

    def _values(self, head: int, feats: Tensor, slots: np.ndarray) -> Tensor:
        raise NotImplementedError

    def _empty_token(self, head: int) -> Tensor:
        raise NotImplementedError

    # forward --------------------------------------------------------------
    def _prepare(self, keys: AttentionKeys):
        feats = keys.features
        if feats.shape[-1] != self.width:
            raise ShapeError(
                f"key width {feats.shape[-1]} != unit width {self.width}")
        token = ad.concat_lastdim([self._empty_token(i) for i in range(self.heads)]) \
            if self.heads > 1 else self._empty_token(0)
        feats = ad.blend_rows(feats, keys.valid, token)
        mask = None
        if self.empty_policy == "mask":
            mask = ~keys.valid
            dead = mask.all(axis=1)
            if dead.any():
                # no valid key: attend to the empty token at one designated slot
                center = np.flatnonzero(keys.slots == GridOffset(0, 0, 0).flat)
                anchor = int(center[0]) if center.size else 0
                mask = mask.copy()
                mask[dead, anchor] = False
        return feats, mask

    def _key_inputs(self, head: int, fh: Tensor, keys: AttentionKeys) -> Tensor:
        """Key features with relative position encoding added (pre-W_k)."""
        if not self.pe_enabled:
            return fh
        core = self.cores[head]
        nq, ns, c = fh.shape
        if keys.shared_displacements is not None:
            pe = core.pos_enc(keys.shared_displacements)      # (S, c)
            return ad.add(fh, pe)                             # leading broadcast
        pe = core.pos_enc(keys.displacements.reshape(-1, 3))
        return ad.add(fh, ad.reshape(pe, (nq, ns, c)))

    def head_attention(self, head: int, q: Tensor, feats: Tensor,
                       keys: AttentionKeys, mask) -> tuple[np.ndarray, Tensor]:
        """Per-head coefficients (plain array) and pre-projection sum."""
        c = self.head_width
        lo, hi = head * c, (head + 1) * c
        fh = ad.slice_lastdim(feats, lo, hi) if self.heads > 1 else feats
        qh = ad.slice_lastdim(q, lo, hi) if self.heads > 1 else q
        core = self.cores[head]
        k_in = self._key_inputs(head, fh, keys)
        nq, ns, _ = feats.shape
        kp = ad.reshape(ad.matmul(ad.reshape(k_in, (nq * ns, c)), core.w_k),
                        (nq, ns, c))
        qp = ad.matmul(qh, core.w_q)
        v = self._values(head, fh, keys.slots)
        mixed, alpha = ad.fused_attention(qp, kp, v, 1.0 / math.sqrt(c), mask)
        _debug_check_alpha(alpha)
        return alpha, mixed

    def aggregate(self, query_feat, keys) -> Tensor:
        """Pre-projection output: concat over heads of the attention sums."""
        keys = self._coerce_keys(keys)
        q = _as_2d(query_feat, self.width)
        feats, mask = self._prepare(keys)
        sums = [self.head_attention(i, q, feats, keys, mask)[1]
                for i in range(self.heads)]
        return sums[0] if self.heads == 1 else ad.concat_lastdim(sums)

    def forward_batch(self, query_feats: Tensor, keys: AttentionKeys) -> Tensor:
        q = _as_2d(query_feats, self.width)
        agg = self.aggregate(q, keys)
        out = ad.matmul(agg, self.out_proj)
        if self.residual and self.normalize:
            return ad.residual_layer_norm(out, q, self.norm_gain, self.norm_bias)
        if self.residual:
            out = ad.add(out, q)
        if self.normalize:
            out = ad.layer_norm_lastdim(out, self.norm_gain, self.norm_bias)
        return out

    def forward(self, query_feat, keys) -> Tensor:
        """Single-query forward; returns a width-C tensor."""
        out = self.forward_batch(_as_2d(query_feat, self.width),
                                 self._coerce_keys(keys))
        return ad.reshape(out, (self.width,))

    def _coerce_keys(self, keys) -> AttentionKeys:
        if isinstance(keys, AttentionKeys):
            return keys
        if isinstance(keys, VirtualKeySet):
            return AttentionKeys.from_virtual(keys)
        return AttentionKeys.from_pairs(keys)

    def coefficients(self, query_feat, keys, head: int = 0) -> Tensor:
        """Attention coefficients of one head for a single query."""
        keys = self._coerce_keys(keys)
        q = _as_2d(query_feat, self.width)
        feats, mask = self._prepare(keys)
        alpha, _ = self.head_attention(head, q, feats, keys, mask)
        return Tensor(alpha.reshape(keys.n_keys))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, core in enumerate(self.cores):
            out.update(core.named_parameters(f"{prefix}h{i}"))
        out.update(self._value_parameters(prefix))
        out[prefix + "proj"] = self.out_proj
        out[prefix + "norm_gain"] = self.norm_gain
        out[prefix + "norm_bias"] = self.norm_bias
        return out

    def _value_parameters(self, prefix: str) -> dict[str, Tensor]:
        raise NotImplementedError


class SEFormerUnit(AttentionUnit):
    """Attention whose value transform is selected per lattice displacement."""

    kind = "seformer"

    def _init_values(self, seed, name):
        self.pools = [ValuePool(seed, f"{name}.h{i}", self.head_width)
                      for i in range(self.heads)]

    def _values(self, head, feats, slots):
        return ad.gather_matmul(feats, slots, self.pools[head].stacked())

    def _empty_token(self, head):
        return self.pools[head].empty

    def _value_parameters(self, prefix):
        out = {}
        for i, pool in enumerate(self.pools):
            out.update(pool.named_parameters(f"{prefix}h{i}"))
        return out


class VanillaUnit(AttentionUnit):
    """Scaled dot-product attention with one shared value transform."""

    kind = "vanilla"

    def _init_values(self, seed, name):
        c = self.head_width
        self.w_vs = [uniform_param(seed, f"{name}.h{i}.w_v", (c, c), c)
                     for i in range(self.heads)]
        self.empties = [uniform_param(seed, f"{name}.h{i}.empty", (c,), c)
                        for i in range(self.heads)]

    def _values(self, head, feats, slots):
        nq, ns, c = feats.shape
        flat = ad.matmul(ad.reshape(feats, (nq * ns, c)), self.w_vs[head])
        return ad.reshape(flat, (nq, ns, c))

    def _empty_token(self, head):
        return self.empties[head]

    def _value_parameters(self, prefix):
        out = {}
        for i in range(self.heads):
            out[f"{prefix}h{i}.w_v"] = self.w_vs[i]
            out[f"{prefix}h{i}.empty"] = self.empties[i]
        return out


def make_unit(kind: str, width: int, **kwargs) -> AttentionUnit:
    if kind == "seformer":
        return SEFormerUnit(width, **kwargs)
    if kind == "vanilla":
        return VanillaUnit(width, **kwargs)
    raise ContractError(f"unknown unit kind {kind!r}")


# ---------------------------------------------------------------------------
# free-function surfaces

def attention_coefficients(unit_or_core, query_feat, keys) -> Tensor:
    """Softmax attention coefficients for one query over its keys.

    Keys may be a VirtualKeySet or (feature, displacement) pairs; an empty
    key list is a contract error (callers substitute an empty-token key
    first).  The coefficients sum to one within 1e-12.
    """
    if isinstance(keys, (list, tuple)) and len(keys) == 0:
        raise ContractError("attention over an empty key list")
    return unit_or_core.coefficients(query_feat, keys)


def seformer_forward(unit: SEFormerUnit, query_feat, keyset) -> Tensor:
    """Displacement-keyed attention output for one query (post-projection)."""
    if unit.kind != "seformer":
        raise ContractError("seformer_forward requires a structure-embedding unit")
    return unit.forward(query_feat, keyset)


def vanilla_forward(unit: VanillaUnit, query_feat, keys) -> Tensor:
    """Shared-value attention output for one query (post-projection)."""
    if unit.kind != "vanilla":
        raise ContractError("vanilla_forward requires a vanilla unit")
    return unit.forward(query_feat, keys)


def multihead_forward(unit: AttentionUnit, query_feat, keys) -> Tensor:
    """Concatenate the unit's per-head sums, project, residual, normalize."""
    return unit.forward(query_feat, keys)

"""Miniature Vision Transformer with attention capture and token masking.

The class token is always active. Masked patch tokens are excluded twice:
their embeddings are zeroed (with the zero detached from the pixels, so
pixel gradients vanish identically) and every attention row assigns them
exactly zero weight. Masked rows are re-zeroed after each sublayer, so a
masked token's state is 0 throughout the network.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    num_layers: int = 2
    mlp_ratio: int = 2
    num_classes: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "channels": self.channels,
            "patch_size": self.patch_size, "embed_dim": self.embed_dim,
            "num_heads": self.num_heads, "num_layers": self.num_layers,
            "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
        }


@dataclass
class TokenMask:
    """Boolean activity per patch token; the class token is never maskable."""

    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool).copy()
        if self.active.ndim != 1:
            raise ValueError("TokenMask must be a flat boolean vector")
        if not self.active.any():
            raise ValueError("TokenMask must keep at least one active token")

    @classmethod
    def full(cls, num_patches: int) -> "TokenMask":
        return cls(np.ones(num_patches, dtype=bool))

    @property
    def num_active(self) -> int:
        return int(self.active.sum())

    def with_cls(self) -> np.ndarray:
        """Sequence-level activity vector: class token prepended as active."""
        return np.concatenate(([True], self.active))

    def copy(self) -> "TokenMask":
        return TokenMask(self.active.copy())


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


class ViTParams:
    """All transformer weights, addressable by name.

    Names follow ``patch_w``, ``cls``, ``pos``, ``layers.<i>.<key>``,
    ``final_ln_g``, ``head_w`` etc.; iteration order is fixed, so averaging,
    serialization and optimizers all line up.
    """

    def __init__(self, config: ViTConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0, init_std: float = 0.02) -> "ViTParams":
        rng = np.random.default_rng(seed)
        d, pd, k = config.embed_dim, config.patch_dim, config.num_classes
        t: dict[str, Tensor] = {}

        def normal(*shape):
            return Tensor(rng.normal(0.0, init_std, shape))

        t["patch_w"] = normal(pd, d)
        t["patch_b"] = Tensor(np.zeros(d))
        t["cls"] = normal(1, d)
        t["pos"] = normal(config.seq_len, d)
        hidden = config.mlp_ratio * d
        for i in range(config.num_layers):
            p = f"layers.{i}."
            t[p + "ln1_g"] = Tensor(np.ones(d))
            t[p + "ln1_b"] = Tensor(np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                t[p + name] = normal(d, d)
            for name in ("bq", "bk", "bv", "bo"):
                t[p + name] = Tensor(np.zeros(d))
            t[p + "ln2_g"] = Tensor(np.ones(d))
            t[p + "ln2_b"] = Tensor(np.zeros(d))
            t[p + "mlp_w1"] = normal(d, hidden)
            t[p + "mlp_b1"] = Tensor(np.zeros(hidden))
            t[p + "mlp_w2"] = normal(hidden, d)
            t[p + "mlp_b2"] = Tensor(np.zeros(d))
        t["final_ln_g"] = Tensor(np.ones(d))
        t["final_ln_b"] = Tensor(np.zeros(d))
        t["head_w"] = normal(d, k)
        t["head_b"] = Tensor(np.zeros(k))
        return cls(config, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def clone(self, requires_grad: bool | None = None) -> "ViTParams":
        out = {}
        for name, t in self.tensors.items():
            nt = Tensor(t.data.copy())
            nt.requires_grad = t.requires_grad if requires_grad is None else requires_grad
            out[name] = nt
        return ViTParams(self.config, out)

    def set_requires_grad(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def allclose(self, other: "ViTParams", rtol=0.0, atol=0.0) -> bool:
        return all(np.allclose(self.tensors[n].data, other.tensors[n].data, rtol=rtol, atol=atol)
                   for n in self.tensors)

    def equal(self, other: "ViTParams") -> bool:
        return all(np.array_equal(self.tensors[n].data, other.tensors[n].data)
                   for n in self.tensors)


@dataclass
class ForwardTrace:
    """Everything captured during one forward pass."""

    logits: Tensor
    attention: list[np.ndarray]          # per layer, (heads, S, S)
    token_states: list[np.ndarray]       # per layer, value-projection input (S, D)
    cls_attention: np.ndarray            # (L,), head-averaged final-layer cls row
    mask: TokenMask
    head_outputs: list[list[Tensor]] | None = None  # per layer/head A_h @ V_h, live


def pixel_activity(mask: TokenMask, config: ViTConfig) -> np.ndarray:
    """Expand per-patch activity to a per-pixel (H, W, 1) float mask."""
    grid = mask.active.reshape(config.grid, config.grid).astype(np.float64)
    per_pixel = np.kron(grid, np.ones((config.patch_size, config.patch_size)))
    return per_pixel[:, :, None]


def patchify(image: Tensor, config: ViTConfig) -> Tensor:
    """Image (H, W, C) to patch rows (L, patch_size^2 * C), reading order."""
    h, w = config.image_size, config.image_size
    if image.data.shape != (h, w, config.channels):
        raise ValueError(
            f"image shape {image.data.shape} does not match config "
            f"({h}, {w}, {config.channels})")
    g, p, c = config.grid, config.patch_size, config.channels
    x = T.reshape(image, (g, p, g, p, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (config.num_patches, p * p * c))


def attention(tokens: Tensor, params: ViTParams, layer: int, mask: TokenMask
              ) -> tuple[Tensor, np.ndarray, list[Tensor]]:
    """Multi-head self-attention over (S, D) tokens.

    Masked patch columns receive exactly zero attention weight from every
    row, and masked rows of the projected output are zeroed. Returns the
    output tokens, the stacked attention maps (heads, S, S), and the live
    per-head context tensors (for value-gradient diagnostics).
    """
    cfg = params.config
    pre = f"layers.{layer}."
    act = mask.with_cls()
    if act.size != tokens.data.shape[0]:
        raise ValueError(f"mask for {act.size} tokens vs sequence of {tokens.data.shape[0]}")
    q = T.add(T.matmul(tokens, params[pre + "wq"]), params[pre + "bq"])
    k = T.add(T.matmul(tokens, params[pre + "wk"]), params[pre + "bk"])
    v = T.add(T.matmul(tokens, params[pre + "wv"]), params[pre + "bv"])

    hd = cfg.head_dim
    inv_sqrt_d = 1.0 / np.sqrt(hd)
    heads = []
    maps = []
    for h in range(cfg.num_heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = T.slice_axis(q, 1, lo, hi)
        kh = T.slice_axis(k, 1, lo, hi)
        vh = T.slice_axis(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt_d)
        a = T.masked_softmax(scores, act, axis=1)
        ctx = T.matmul(a, vh)
        heads.append(ctx)
        maps.append(a.data)
    out = T.add(T.matmul(T.concat(heads, axis=1), params[pre + "wo"]), params[pre + "bo"])
    out = T.mask_rows(out, act)
    return out, np.stack(maps), heads


def vit_forward(params: ViTParams, image: Tensor, mask: TokenMask | None = None,
                capture_value_grads: bool = False) -> ForwardTrace:
    """Full forward pass returning logits plus attention/state capture."""
    cfg = params.config
    if mask is None:
        mask = TokenMask.full(cfg.num_patches)
    act = mask.with_cls()

    patches = patchify(image, cfg)
    emb = T.add(T.matmul(patches, params["patch_w"]), params["patch_b"])
    emb = T.mask_rows(emb, mask.active)
    tokens = T.concat([params["cls"], emb], axis=0)
    tokens = T.mask_rows(T.add(tokens, params["pos"]), act)

    attn_maps: list[np.ndarray] = []
    states: list[np.ndarray] = []
    all_heads: list[list[Tensor]] = []
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}."
        normed = T.mask_rows(
            T.layernorm(tokens, params[pre + "ln1_g"], params[pre + "ln1_b"]), act)
        attn_out, amap, heads = attention(normed, params, layer, mask)
        if capture_value_grads:
            for hT in heads:
                hT.retain_grad = True
        tokens = T.add(tokens, attn_out)
        normed2 = T.mask_rows(
            T.layernorm(tokens, params[pre + "ln2_g"], params[pre + "ln2_b"]), act)
        hidden = T.gelu(T.add(T.matmul(normed2, params[pre + "mlp_w1"]), params[pre + "mlp_b1"]))
        mlp_out = T.mask_rows(
            T.add(T.matmul(hidden, params[pre + "mlp_w2"]), params[pre + "mlp_b2"]), act)
        tokens = T.add(tokens, mlp_out)

        attn_maps.append(amap)
        states.append(normed.data.copy())
        all_heads.append(heads)

    final = T.layernorm(tokens, params["final_ln_g"], params["final_ln_b"])
    cls_state = T.slice_axis(final, 0, 0, 1)
    logits = T.reshape(T.add(T.matmul(cls_state, params["head_w"]), params["head_b"]),
                       (cfg.num_classes,))

    trace = ForwardTrace(
        logits=logits, attention=attn_maps, token_states=states,
        cls_attention=np.zeros(cfg.num_patches), mask=mask.copy(),
        head_outputs=all_heads if capture_value_grads else None)
    trace.cls_attention = extract_cls_attention(trace)
    return trace


def extract_cls_attention(trace: ForwardTrace) -> np.ndarray:
    """Head-averaged final-layer cls attention row over patch tokens.

    The cls self-entry is dropped and the rest renormalized to sum 1 over
    active tokens; masked tokens hold exactly 0.
    """
    row = trace.attention[-1][:, 0, 1:].mean(axis=0)
    total = row.sum()
    if total > 0.0:
        row = row / total
    else:
        # all cls attention sat on the cls token itself; fall back to uniform
        active = trace.mask.active
        row = active.astype(np.float64) / active.sum()
    return row


# -- checkpoint files --------------------------------------------------------

def params_to_bytes(params: ViTParams) -> bytes:
    """Config JSON header followed by named tensor records."""
    header = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    chunks = [struct.pack("<I", len(header)), header,
              struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(T.tensor_to_bytes(t))
    return b"".join(chunks)


def params_from_bytes(buf: bytes) -> ViTParams:
    if len(buf) < 4:
        raise ValueError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack_from("<I", buf, 0)
    off = 4
    if len(buf) < off + hlen + 4:
        raise ValueError("truncated checkpoint: missing header")
    config = ViTConfig(**json.loads(buf[off:off + hlen].decode()))
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        if len(buf) < off + 4:
            raise ValueError("truncated checkpoint: missing record name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        t, off = T.tensor_from_bytes(buf, off)
        tensors[name] = t
    return ViTParams(config, tensors)


def save_checkpoint(params: ViTParams, path):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_checkpoint(path) -> ViTParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())

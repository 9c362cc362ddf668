"""Vertex-wise multi-view aggregation, transformer encoder and decoders.

Per-view tensors are laid out ``(N, |D|, h)``: views first, then vertices,
then channels. Masks are ``(N, |D|)`` booleans; a masked entry never
influences an aggregated value.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensorio import load_tensors, save_tensors

LN_EPS = 1e-5
S_MIN = 0.1


class AggregationKind(str, enum.Enum):
    MAX_POOL = "max"
    AVG_POOL = "avg"
    SOFTMAX_SUM = "softmax_sum"
    TRANSFORMER_MAX_POOL = "transformer_max"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown aggregation kind {value!r}") from None


# ---------------------------------------------------------------------------
# transformer encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderLayer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    Wq: np.ndarray
    bq: np.ndarray
    Wk: np.ndarray
    bk: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    FIELDS = ("ln1_g", "ln1_b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
              "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")  # fmt: skip

    @property
    def width(self):
        return self.Wq.shape[0]


@dataclass
class Encoder:
    layers: list
    n_heads: int

    @property
    def width(self):
        return self.layers[0].width


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _attention(x, layer: EncoderLayer, n_heads, mask):
    *lead, n, width = x.shape
    hd = width // n_heads
    q = (x @ layer.Wq + layer.bq).reshape(*lead, n, n_heads, hd)
    k = (x @ layer.Wk + layer.bk).reshape(*lead, n, n_heads, hd)
    v = (x @ layer.Wv + layer.bv).reshape(*lead, n, n_heads, hd)
    scores = np.einsum("...qhd,...khd->...hqk", q, k) / np.sqrt(hd)
    if mask is not None:
        keep = mask[..., None, None, :]
        scores = np.where(keep, scores, -np.inf)
        any_key = np.any(mask, axis=-1)[..., None, None, None]
        scores = np.where(any_key, scores, 0.0)
    att = _softmax(scores, axis=-1)
    out = np.einsum("...hqk,...khd->...qhd", att, v).reshape(*lead, n, width)
    return out @ layer.Wo + layer.bo


def transformer_encode(tokens, enc: Encoder, mask=None):
    """Pre-norm transformer encoder over the token axis (second to last).

    No positional encoding is added, so permuting tokens permutes the output.
    Masked tokens are excluded as attention keys.
    """
    x = np.asarray(tokens, dtype=float)
    if x.shape[-1] != enc.width:
        raise ValueError(f"token width {x.shape[-1]} does not match encoder width {enc.width}")
    if enc.width % enc.n_heads:
        raise ValueError(f"width {enc.width} is not divisible by {enc.n_heads} heads")
    if x.shape[-2] < 1:
        raise ValueError("need at least one token")
    for layer in enc.layers:
        x = x + _attention(layer_norm(x, layer.ln1_g, layer.ln1_b), layer, enc.n_heads, mask)
        h = layer_norm(x, layer.ln2_g, layer.ln2_b)
        x = x + np.maximum(h @ layer.W1 + layer.b1, 0.0) @ layer.W2 + layer.b2
    return x


def zero_encoder(width, n_heads, n_layers=1, ff=None):
    ff = ff or 2 * width
    z = np.zeros
    layers = [
        EncoderLayer(np.ones(width), z(width), z((width, width)), z(width), z((width, width)), z(width),
                     z((width, width)), z(width), z((width, width)), z(width), np.ones(width), z(width),
                     z((width, ff)), z(ff), z((ff, width)), z(width))
        for _ in range(n_layers)
    ]  # fmt: skip
    return Encoder(layers, n_heads)


def parameter_free_encoder(width):
    """Single-head identity-projection attention used to score views without weights."""
    enc = zero_encoder(width, 1)
    layer = enc.layers[0]
    layer.Wq = np.eye(width)
    layer.Wk = np.eye(width)
    layer.Wv = np.eye(width)
    layer.Wo = np.eye(width)
    return enc


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def argmax_views(per_view, masks):
    """Index of the view holding each channel maximum; ties go to the lower index."""
    x = np.asarray(per_view, dtype=float)
    m = np.asarray(masks, dtype=bool)[..., None]
    return np.argmax(np.where(m, x, -np.inf), axis=0)


def _one_hot(idx, n, any_valid):
    w = (np.arange(n)[:, None, None] == idx[None]).astype(float)
    return w * any_valid[None]


def aggregation_weights(per_view, masks, kind, encoder: Encoder | None = None):
    """Convex per-channel view weights such that the fused value is ``sum_n w_n x_n``.

    Rows whose views are all masked get all-zero weights.
    """
    kind = AggregationKind.parse(kind)
    x = np.asarray(per_view, dtype=float)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError("aggregate needs an (N, |D|, h) tensor with N >= 1")
    n = x.shape[0]
    m = np.asarray(masks, dtype=bool)
    mf = m[..., None].astype(float)
    count = mf.sum(axis=0)
    any_valid = count > 0
    if kind is AggregationKind.MAX_POOL:
        return _one_hot(argmax_views(x, m), n, any_valid)
    if kind is AggregationKind.AVG_POOL:
        return np.broadcast_to(mf / np.where(any_valid, count, 1.0)[None], x.shape).copy()
    if kind is AggregationKind.SOFTMAX_SUM:
        z = np.where(m[..., None], x, -np.inf)
        zmax = np.max(z, axis=0, keepdims=True)
        e = np.exp(z - np.where(np.isfinite(zmax), zmax, 0.0)) * mf
        tot = e.sum(axis=0, keepdims=True)
        return np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)
    # transformer-guided max pooling: attention over each vertex's view
    # tokens picks the view, the original value at that view is kept
    enc = encoder if encoder is not None else parameter_free_encoder(x.shape[2])
    tokens = np.swapaxes(x, 0, 1)  # (|D|, N, h)
    refined = transformer_encode(tokens, enc, mask=m.T)
    idx = argmax_views(np.swapaxes(refined, 0, 1), m)
    return _one_hot(idx, n, any_valid)


def aggregate(per_view, masks, kind, encoder: Encoder | None = None):
    x = np.asarray(per_view, dtype=float)
    w = aggregation_weights(x, masks, kind, encoder)
    return np.einsum("ndh,ndh->dh", w, np.where(np.asarray(masks, bool)[..., None], x, 0.0))


# ---------------------------------------------------------------------------
# weights and decoders
# ---------------------------------------------------------------------------


@dataclass
class FusionConfig:
    n_down: int = 108
    c_in: int = 10  # PaF width: pyramid channels + 2 sample coordinates
    width: int = 16  # per-vertex token width for pose/shape
    token_width: int = 80  # orientation token width
    n_heads: int = 5
    n_layers: int = 2
    ff_width: int = 160
    hidden: tuple = (256, 256)
    n_joints: int = 16
    n_betas: int = 10
    ps_heads: int = 2
    ps_layers: int = 1
    grid_res: int = 8  # lattice of the initial grid sampling

    @property
    def grid_in(self):
        return self.grid_res**2 * (self.c_in - 2)

    @property
    def pose_out(self):
        return 6 * (self.n_joints - 1) + self.n_betas

    def to_dict(self):
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class FusionWeights:
    config: FusionConfig
    tensors: dict

    def mlp(self, prefix):
        layers = []
        i = 0
        while f"{prefix}.{i}.W" in self.tensors:
            layers.append((self.tensors[f"{prefix}.{i}.W"], self.tensors[f"{prefix}.{i}.b"]))
            i += 1
        return layers

    def encoder(self, prefix, n_heads):
        layers = []
        i = 0
        while f"{prefix}.{i}.Wq" in self.tensors:
            layers.append(EncoderLayer(*[self.tensors[f"{prefix}.{i}.{f}"] for f in EncoderLayer.FIELDS]))
            i += 1
        return Encoder(layers, n_heads) if layers else None

    @property
    def orientation_encoder(self):
        return self.encoder("ori_enc", self.config.n_heads)

    @property
    def pose_encoder(self):
        return self.encoder("ps_enc", self.config.ps_heads)

    def validate(self):
        cfg = self.config
        expected = weight_shapes(cfg)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ValueError(f"missing weight tensor {name!r}")
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(f"tensor {name!r} has shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ValueError(f"tensor {name!r} has non-finite entries")
        return self

    def save(self, stem):
        return save_tensors(stem, self.tensors, {"fusion_config": self.config.to_dict()})

    @classmethod
    def load(cls, stem):
        tensors, meta = load_tensors(stem)
        return cls(FusionConfig.from_dict(meta["fusion_config"]), tensors).validate()


def _mlp_shapes(prefix, sizes):
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.{i}.W"] = (a, b)
        out[f"{prefix}.{i}.b"] = (b,)
    return out


def _encoder_shapes(prefix, width, ff, n_layers):
    out = {}
    for i in range(n_layers):
        p = f"{prefix}.{i}."
        out.update({
            p + "ln1_g": (width,), p + "ln1_b": (width,),
            p + "Wq": (width, width), p + "bq": (width,),
            p + "Wk": (width, width), p + "bk": (width,),
            p + "Wv": (width, width), p + "bv": (width,),
            p + "Wo": (width, width), p + "bo": (width,),
            p + "ln2_g": (width,), p + "ln2_b": (width,),
            p + "W1": (width, ff), p + "b1": (ff,),
            p + "W2": (ff, width), p + "b2": (width,),
        })  # fmt: skip
    return out


def weight_shapes(cfg: FusionConfig) -> dict:
    """Name -> shape manifest of every tensor, in file order."""
    shapes = {}
    shapes.update(_mlp_shapes("grid_dec", (cfg.grid_in, *cfg.hidden, cfg.pose_out)))
    shapes.update(_mlp_shapes("ps_in", (cfg.c_in, cfg.width)))
    shapes.update(_encoder_shapes("ps_enc", cfg.width, 2 * cfg.width, cfg.ps_layers))
    shapes.update(_mlp_shapes("ps_dec", (cfg.width * cfg.n_down, *cfg.hidden, cfg.pose_out)))
    shapes.update(_mlp_shapes("ori_tok", (cfg.c_in * cfg.n_down + 6, cfg.token_width)))
    shapes.update(_encoder_shapes("ori_enc", cfg.token_width, cfg.ff_width, cfg.n_layers))
    shapes.update(_mlp_shapes("ori_dec", (cfg.token_width, *cfg.hidden, 6)))
    shapes.update(_mlp_shapes("cam_dec", (cfg.token_width, *cfg.hidden, 3)))
    return shapes


_FINAL_LAYERS = ("grid_dec", "ps_dec", "ori_dec", "cam_dec")


def init_weights(cfg: FusionConfig, seed: int = 0) -> FusionWeights:
    """Uniform +-1/sqrt(fan_in) init; decoder output layers and biases start at zero."""
    rng = np.random.default_rng(seed)
    shapes = weight_shapes(cfg)
    last = {p: max(int(n.split(".")[1]) for n in shapes if n.startswith(p + ".")) for p in _FINAL_LAYERS}
    tensors = {}
    for name, shape in shapes.items():
        prefix, idx, field_ = name.split(".")
        if field_.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1 or (prefix in last and int(idx) == last[prefix]):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    # round through float32 so in-memory and on-disk weights agree exactly
    tensors = {k: v.astype(np.float32).astype(np.float64) for k, v in tensors.items()}
    return FusionWeights(cfg, tensors)


def zero_weights(cfg: FusionConfig) -> FusionWeights:
    tensors = {k: (np.ones(s) if k.endswith("_g") else np.zeros(s)) for k, s in weight_shapes(cfg).items()}
    return FusionWeights(cfg, tensors)


def run_mlp(x, layers):
    for i, (W, b) in enumerate(layers):
        x = x @ W + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def project_tokens(paf, weights: FusionWeights):
    """Per-vertex linear projection of PaF rows, ``(..., C') -> (..., h)``, with ReLU."""
    (W, b), = weights.mlp("ps_in")
    return np.maximum(np.asarray(paf) @ W + b, 0.0)


def orientation_tokens(paf, view_orient6d, weights: FusionWeights):
    """One token per view from its flattened PaF features and 6D orientation."""
    paf = np.asarray(paf)
    x = np.concatenate([paf.reshape(paf.shape[0], -1), np.asarray(view_orient6d)], axis=1)
    return run_mlp(x, weights.mlp("ori_tok"))


def decode_grid(pooled, weights: FusionWeights):
    """Initial ``(theta 6D deltas, beta)`` from view-pooled grid samples."""
    cfg = weights.config
    pooled = np.asarray(pooled, dtype=float)
    if pooled.shape != (cfg.grid_in,):
        raise ValueError(f"grid features must have length {cfg.grid_in}, got {pooled.shape}")
    out = run_mlp(pooled, weights.mlp("grid_dec"))
    n_pose = 6 * (cfg.n_joints - 1)
    return out[:n_pose].reshape(cfg.n_joints - 1, 6), out[n_pose:]


def decode_pose_shape(fused, weights: FusionWeights):
    cfg = weights.config
    fused = np.asarray(fused, dtype=float)
    if fused.shape != (cfg.n_down, cfg.width):
        raise ValueError(f"fused features must be {(cfg.n_down, cfg.width)}, got {fused.shape}")
    out = run_mlp(fused.reshape(-1), weights.mlp("ps_dec"))
    n_pose = 6 * (cfg.n_joints - 1)
    return out[:n_pose].reshape(cfg.n_joints - 1, 6), out[n_pose:]


def decode_orientation(token, weights: FusionWeights):
    token = np.asarray(token, dtype=float)
    if token.shape[-1] != weights.config.token_width:
        raise ValueError("orientation token width mismatch")
    return run_mlp(token, weights.mlp("ori_dec"))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def decode_camera(feature, weights: FusionWeights, base=None):
    """Weak-perspective camera ``(s, o_x, o_y)`` from a view feature.

    The decoder output is added to ``base`` (pre-activation scale, offsets);
    the scale passes through ``softplus + S_MIN`` so it stays positive.
    """
    raw = run_mlp(np.asarray(feature, dtype=float), weights.mlp("cam_dec"))
    base = np.zeros(3) if base is None else np.asarray(base, dtype=float)
    pre = base + raw
    return np.array([softplus(pre[0]) + S_MIN, pre[1], pre[2]])


def camera_preactivation(cam):
    """Inverse of the positivity map: the ``base`` that reproduces ``cam``."""
    s, ox, oy = cam
    if s <= S_MIN:
        raise ValueError(f"scale {s} is not above the minimum {S_MIN}")
    return np.array([float(softplus_inv(s - S_MIN)), ox, oy])

"""Time-aware entity encoder.

Each of the ``ell`` past snapshots of an entity is pooled into a vector
(mean of affine maps of [relation : neighbor] embeddings, then relu) and
concatenated with the entity's own embedding. The resulting sequence gets
a sinusoidal position code and passes through transformer encoder layers;
the flattened output is projected to the entity representation.

``mode='flat'`` is the ablation without sequence information: all pairs of
the window are pooled once, as if they happened at one timestamp.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import HistoryWindow
from .errors import ArchiveFormatError, ConfigError, HistoryLengthMismatch

MODES = ("attention", "flat")


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 50
    ell: int = 20
    n_max: int = 20
    n_heads: int = 4
    n_layers: int = 1
    d_inner: int = 256
    mode: str = "attention"
    d_out: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.d, self.ell, self.n_max, self.d_inner) < 1:
            raise ConfigError("d, ell, n_max and d_inner must be >= 1")
        if self.mode == "attention":
            if self.n_layers < 1:
                raise ConfigError("attention mode needs n_layers >= 1")
            if self.n_heads < 1 or self.d_model % self.n_heads:
                raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_model(self) -> int:
        return 2 * self.d

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def out_dim(self) -> int:
        return self.d if self.d_out is None else self.d_out

    @property
    def pair_dim(self) -> int:
        return 2 * (self.out_dim + self.d)

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Ordered name -> Tensor mapping holding every learnable array."""

    def __init__(self, tensors: dict[str, Tensor], config: EncoderConfig):
        self.tensors = tensors
        self.config = config

    @classmethod
    def shapes(cls, cfg: EncoderConfig, n_entities: int, n_relations_total: int) -> dict:
        d, dm, dh = cfg.d, cfg.d_model, cfg.d_head
        out = {
            "entity_emb": (n_entities, d),
            "relation_emb": (n_relations_total, d),
            "snap.W": (2 * d, d),
            "snap.b": (d,),
        }
        for li in range(cfg.n_layers):
            p = f"layer{li}."
            for hi in range(cfg.n_heads):
                for m in ("WQ", "WK", "WV"):
                    out[f"{p}head{hi}.{m}"] = (dm, dh)
            out[p + "WO"] = (cfg.n_heads * dh, dm)
            out[p + "ln1.gain"] = (dm,)
            out[p + "ln1.bias"] = (dm,)
            out[p + "ffn.W1"] = (dm, cfg.d_inner)
            out[p + "ffn.b1"] = (cfg.d_inner,)
            out[p + "ffn.W2"] = (cfg.d_inner, dm)
            out[p + "ffn.b2"] = (dm,)
            out[p + "ln2.gain"] = (dm,)
            out[p + "ln2.bias"] = (dm,)
        out["Wstar"] = (dm * cfg.ell, cfg.out_dim)
        out["flat.W"] = (dm, cfg.out_dim)
        k = cfg.pair_dim
        out.update({"sim.W1": (k, k), "sim.b1": (k,), "sim.W2": (k, k), "sim.b2": (k,)})
        return out

    @classmethod
    def init(cls, cfg: EncoderConfig, n_entities: int, n_relations_total: int,
             seed: int = 0) -> "ModelParams":
        """Matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; layer-norm gains 1."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in cls.shapes(cfg, n_entities, n_relations_total).items():
            if name.endswith(".gain"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                fan_in = shape[1] if name.endswith("_emb") else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        return cls(tensors, cfg)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def n_entities(self) -> int:
        return self.tensors["entity_emb"].shape[0]

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {n: t.grad for n, t in self.tensors.items()}

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], cfg: EncoderConfig) -> "ModelParams":
        tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
        return cls(tensors, cfg)

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.to_arrays(), self.config)

    def check_compatible(self, n_entities: int, n_relations_total: int) -> None:
        expected = self.shapes(self.config, n_entities, n_relations_total)
        got = {n: t.shape for n, t in self.tensors.items()}
        if got != expected:
            bad = sorted(set(expected.items()) ^ set(got.items()))[:4]
            raise ArchiveFormatError(f"parameter shapes do not match the configuration: {bad}")


def positional_encoding(ell: int, d_model: int) -> np.ndarray:
    """Sinusoidal table (ell, d_model): sin on even columns, cos on odd, float64."""
    if d_model < 2:
        raise ValueError("d_model must be >= 2")
    pos = np.arange(ell, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((ell, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def history_arrays(windows: Sequence[HistoryWindow], n_max: int, flat: bool = False):
    """Pad windows into (relations, entities, mask) int/bool arrays of shape (B, L, width).

    Pairs are sorted inside each slot; ``flat=True`` merges the whole window
    into one slot of width ell * n_max.
    """
    ell = windows[0].length
    rows = []
    for w in windows:
        snaps = [sorted(s)[:n_max] for s in w.snapshots]
        rows.append([sorted(p for s in snaps for p in s)] if flat else snaps)
    width = ell * n_max if flat else n_max
    shape = (len(windows), len(rows[0]), width)
    rels = np.zeros(shape, dtype=np.int64)
    ents = np.zeros(shape, dtype=np.int64)
    mask = np.zeros(shape, dtype=bool)
    for b, slots in enumerate(rows):
        for k, pairs in enumerate(slots):
            if pairs:
                arr = np.asarray(pairs, dtype=np.int64)
                n = len(pairs)
                rels[b, k, :n] = arr[:, 0]
                ents[b, k, :n] = arr[:, 1]
                mask[b, k, :n] = True
    return rels, ents, mask


def _pool(params: ModelParams, rels, ents, mask) -> Tensor:
    pairs = ad.concat([ad.embedding_lookup(params["relation_emb"], rels),
                       ad.embedding_lookup(params["entity_emb"], ents)], axis=-1)
    return ad.relu(ad.masked_mean(ad.linear(pairs, params["snap.W"], params["snap.b"]), mask))


def snapshot_aggregate(snapshot: Sequence[tuple[int, int]], entity: int,
                       params: ModelParams) -> Tensor:
    """x_tau = [relu(mean of W^T [v_r : v_n] + b) : v_entity], shape (2d,)."""
    pairs = sorted(snapshot)
    n = max(len(pairs), 1)
    rels = np.zeros((1, n), dtype=np.int64)
    ents = np.zeros((1, n), dtype=np.int64)
    mask = np.zeros((1, n), dtype=bool)
    if pairs:
        rels[0], ents[0] = zip(*pairs)
        mask[0] = True
    f = _pool(params, rels, ents, mask)
    own = ad.embedding_lookup(params["entity_emb"], np.array([entity]))
    return ad.reshape(ad.concat([f, own], axis=-1), (-1,))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v; also returns the weight matrix."""
    weights = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[-1])))
    return ad.matmul(weights, v), weights


def multi_head(x: Tensor, params: ModelParams, layer: int, cfg: EncoderConfig,
               trace: list | None = None) -> Tensor:
    """One encoder layer: multi-head self-attention and a position-wise FFN,
    each wrapped in residual + layer norm. ``trace`` collects weight matrices."""
    p = f"layer{layer}."
    heads = []
    for h in range(cfg.n_heads):
        q = ad.linear(x, params[f"{p}head{h}.WQ"])
        k = ad.linear(x, params[f"{p}head{h}.WK"])
        v = ad.linear(x, params[f"{p}head{h}.WV"])
        out, weights = scaled_dot_attention(q, k, v)
        if trace is not None:
            trace.append(weights.data)
        heads.append(out)
    attended = ad.linear(ad.concat(heads, axis=-1), params[p + "WO"])
    x = ad.layer_norm(ad.add(x, attended), params[p + "ln1.gain"], params[p + "ln1.bias"])
    hidden = ad.relu(ad.linear(x, params[p + "ffn.W1"], params[p + "ffn.b1"]))
    ff = ad.linear(hidden, params[p + "ffn.W2"], params[p + "ffn.b2"])
    return ad.layer_norm(ad.add(x, ff), params[p + "ln2.gain"], params[p + "ln2.bias"])


def encode_batch(windows: Sequence[HistoryWindow], params: ModelParams, cfg: EncoderConfig,
                 trace: list | None = None) -> Tensor:
    """Representations (B, out_dim) for a batch of history windows."""
    for w in windows:
        if w.length != cfg.ell:
            raise HistoryLengthMismatch(f"history has {w.length} snapshots, config expects {cfg.ell}")
    entities = np.array([w.entity for w in windows], dtype=np.int64)
    if cfg.mode == "flat":
        rels, ents, mask = history_arrays(windows, cfg.n_max, flat=True)
        f = ad.reshape(_pool(params, rels, ents, mask), (len(windows), cfg.d))
        x = ad.concat([f, ad.embedding_lookup(params["entity_emb"], entities)], axis=-1)
        return ad.relu(ad.linear(x, params["flat.W"]))
    rels, ents, mask = history_arrays(windows, cfg.n_max)
    f = _pool(params, rels, ents, mask)
    own = ad.embedding_lookup(params["entity_emb"], np.repeat(entities[:, None], cfg.ell, axis=1))
    x = ad.concat([f, own], axis=-1)
    pe = np.broadcast_to(positional_encoding(cfg.ell, cfg.d_model), x.shape)
    x = ad.add(x, Tensor(pe))
    for layer in range(cfg.n_layers):
        x = multi_head(x, params, layer, cfg, trace)
    z = ad.reshape(x, (len(windows), cfg.ell * cfg.d_model))
    return ad.relu(ad.linear(z, params["Wstar"]))


def encode(history: HistoryWindow, params: ModelParams, cfg: EncoderConfig,
           trace: list | None = None) -> Tensor:
    return ad.reshape(encode_batch([history], params, cfg, trace), (cfg.out_dim,))

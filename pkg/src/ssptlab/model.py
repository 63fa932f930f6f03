"""Two-layer transformer encoder with swappable task heads.

Parameters are partitioned into named groups (embedding, attention-1,
ffn-1, attention-2, ffn-2, head-*) so fine-tuning can freeze any prefix of
the feature extractor. d_model equals the concatenated attention width
(32), with 4 heads of dim 8 and a 128-wide feed-forward hidden layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"SSPT"
CHECKPOINT_VERSION = 1

TRUNK_GROUPS = ("embedding", "attention-1", "ffn-1", "attention-2", "ffn-2")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int            # dataset features + 1 mask-indicator channel
    seq_len: int              # look-back length
    d_model: int = 32
    n_heads: int = 4
    ffn_dim: int = 128
    n_layers: int = 2
    activation: str = "relu"  # or "gelu"
    pooling: str = "mean"     # or "last"
    norm: str = "pre"         # or "post"
    dropout: float = 0.0
    dtype: str = "float32"

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class SsptParams:
    config: ModelConfig
    groups: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    def named_tensors(self):
        for group, members in self.groups.items():
            for name, t in members.items():
                yield f"{group}/{name}", t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def head_names(self) -> list[str]:
        return [g[len("head-"):] for g in self.groups if g.startswith("head-")]

    def group_tensors(self, names: list[str]) -> list[Tensor]:
        out = []
        for g in names:
            if g not in self.groups:
                raise ShapeError(f"unknown parameter group '{g}'")
            out.extend(self.groups[g].values())
        return out

    def n_params(self, groups: list[str] | None = None) -> int:
        ts = self.tensors() if groups is None else self.group_tensors(groups)
        return int(sum(t.data.size for t in ts))

    def copy(self) -> "SsptParams":
        new_groups = {
            g: {n: Tensor(t.data.copy()) for n, t in members.items()}
            for g, members in self.groups.items()
        }
        return SsptParams(config=self.config, groups=new_groups)


def _uniform(rng, shape, scale, dtype):
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype))


def init_params(cfg: ModelConfig, heads: dict[str, int], seed: int) -> SsptParams:
    """Fan-in-scaled uniform init; biases and layer-norm offsets start at 0."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype()
    d = cfg.d_model
    groups: dict[str, dict[str, Tensor]] = {}

    groups["embedding"] = {
        "w": _uniform(rng, (cfg.input_dim, d), 1.0 / np.sqrt(cfg.input_dim), dt),
        "b": Tensor(np.zeros(d, dtype=dt)),
        "pos": _uniform(rng, (cfg.seq_len, d), 0.02, dt),
    }
    for layer in range(1, cfg.n_layers + 1):
        attn = {}
        for name in ("wq", "wk", "wv", "wo"):
            attn[name] = _uniform(rng, (d, d), 1.0 / np.sqrt(d), dt)
        for name in ("bq", "bk", "bv", "bo"):
            attn[name] = Tensor(np.zeros(d, dtype=dt))
        attn["ln_g"] = Tensor(np.ones(d, dtype=dt))
        attn["ln_b"] = Tensor(np.zeros(d, dtype=dt))
        groups[f"attention-{layer}"] = attn
        groups[f"ffn-{layer}"] = {
            "w1": _uniform(rng, (d, cfg.ffn_dim), 1.0 / np.sqrt(d), dt),
            "b1": Tensor(np.zeros(cfg.ffn_dim, dtype=dt)),
            "w2": _uniform(rng, (cfg.ffn_dim, d), 1.0 / np.sqrt(cfg.ffn_dim), dt),
            "b2": Tensor(np.zeros(d, dtype=dt)),
            "ln_g": Tensor(np.ones(d, dtype=dt)),
            "ln_b": Tensor(np.zeros(d, dtype=dt)),
        }
    params = SsptParams(config=cfg, groups=groups)
    for name, out_dim in heads.items():
        _add_head(params, name, out_dim, rng)
    return params


def _add_head(params: SsptParams, name: str, out_dim: int, rng) -> None:
    cfg = params.config
    dt = cfg.np_dtype()
    params.groups[f"head-{name}"] = {
        "w": _uniform(rng, (cfg.d_model, out_dim), 1.0 / np.sqrt(cfg.d_model), dt),
        "b": Tensor(np.zeros(out_dim, dtype=dt)),
    }


def swap_head(params: SsptParams, old_head: str, new_head: str, out_dim: int,
              seed: int) -> SsptParams:
    """Replace a task head; every non-head tensor is shared bit-exactly."""
    key = f"head-{old_head}"
    if key not in params.groups:
        raise ShapeError(f"cannot swap: head '{old_head}' not present")
    new = SsptParams(
        config=params.config,
        groups={g: dict(m) for g, m in params.groups.items() if g != key},
    )
    _add_head(new, new_head, out_dim, np.random.default_rng(seed))
    return new


def _attention(x: Tensor, attn: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    b, t, d = x.shape
    h = cfg.n_heads
    hd = d // h
    q = ad.matmul(x, attn["wq"]) + attn["bq"]
    k = ad.matmul(x, attn["wk"]) + attn["bk"]
    v = ad.matmul(x, attn["wv"]) + attn["bv"]
    # (B,T,D) -> (B,H,T,hd)
    q = ad.swapaxes(ad.reshape(q, (b, t, h, hd)), 1, 2)
    k = ad.swapaxes(ad.reshape(k, (b, t, h, hd)), 1, 2)
    v = ad.swapaxes(ad.reshape(v, (b, t, h, hd)), 1, 2)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
    weights = ad.softmax(scores)
    out = ad.matmul(weights, v)
    out = ad.reshape(ad.swapaxes(out, 1, 2), (b, t, d))
    return ad.matmul(out, attn["wo"]) + attn["bo"]


def _ffn(x: Tensor, ffn: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    act = ad.gelu if cfg.activation == "gelu" else ad.relu
    hidden = act(ad.matmul(x, ffn["w1"]) + ffn["b1"])
    return ad.matmul(hidden, ffn["w2"]) + ffn["b2"]


def _dropmask(shape, rate, rng, dtype):
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / np.asarray(1.0 - rate, dtype=dtype)


def forward(params: SsptParams, windows, head: str, per_step: bool = False,
            dropout_rng=None) -> Tensor:
    """Run the encoder and the named head.

    ``windows`` is (batch, seq_len, input_dim). Heads see the mean-pooled
    sequence representation; with ``per_step`` the head is applied to every
    time step instead (used by masked-value reconstruction).
    """
    cfg = params.config
    key = f"head-{head}"
    if key not in params.groups:
        raise ShapeError(
            f"unknown head '{head}'; available: {params.head_names()}"
        )
    x = windows if isinstance(windows, Tensor) else Tensor(
        np.asarray(windows, dtype=cfg.np_dtype())
    )
    if x.data.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise ShapeError(
            f"expected windows (B, {cfg.seq_len}, {cfg.input_dim}), got {x.shape}"
        )
    if x.shape[1] != cfg.seq_len:
        raise ShapeError(
            f"window length {x.shape[1]} != positional table length {cfg.seq_len}"
        )

    emb = params.groups["embedding"]
    h = ad.matmul(x, emb["w"]) + emb["b"]
    h = h + emb["pos"]

    drop = cfg.dropout if dropout_rng is not None else 0.0
    for layer in range(1, cfg.n_layers + 1):
        attn = params.groups[f"attention-{layer}"]
        ffn = params.groups[f"ffn-{layer}"]
        if cfg.norm == "pre":
            a = _attention(ad.layer_norm(h, attn["ln_g"], attn["ln_b"]), attn, cfg)
            if drop > 0:
                a = a * Tensor(_dropmask(a.shape, drop, dropout_rng, cfg.np_dtype()))
            h = h + a
            f = _ffn(ad.layer_norm(h, ffn["ln_g"], ffn["ln_b"]), ffn, cfg)
            if drop > 0:
                f = f * Tensor(_dropmask(f.shape, drop, dropout_rng, cfg.np_dtype()))
            h = h + f
        else:  # post-norm
            a = _attention(h, attn, cfg)
            if drop > 0:
                a = a * Tensor(_dropmask(a.shape, drop, dropout_rng, cfg.np_dtype()))
            h = ad.layer_norm(h + a, attn["ln_g"], attn["ln_b"])
            f = _ffn(h, ffn, cfg)
            if drop > 0:
                f = f * Tensor(_dropmask(f.shape, drop, dropout_rng, cfg.np_dtype()))
            h = ad.layer_norm(h + f, ffn["ln_g"], ffn["ln_b"])

    hp = params.groups[key]
    if per_step:
        out = ad.matmul(h, hp["w"]) + hp["b"]
        if out.shape[-1] == 1:
            out = ad.reshape(out, out.shape[:-1])
        return out
    pooled = ad.mean(h, axis=1) if cfg.pooling == "mean" else h[:, -1, :]
    out = ad.matmul(pooled, hp["w"]) + hp["b"]
    if out.shape[-1] == 1:
        out = ad.reshape(out, (out.shape[0],))
    return out


# ---------------------------------------------------------------------------
# Checkpoint I/O: magic `SSPT`, u32 version, digest, config blob, then each
# parameter as (name, rank, dims, little-endian float32 data).

def _write_bytes(f, b: bytes) -> None:
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_bytes(f) -> bytes:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n)


def _config_blob(cfg: ModelConfig, heads: dict[str, int]) -> bytes:
    lines = [
        f"input_dim = {cfg.input_dim}",
        f"seq_len = {cfg.seq_len}",
        f"d_model = {cfg.d_model}",
        f"n_heads = {cfg.n_heads}",
        f"ffn_dim = {cfg.ffn_dim}",
        f"n_layers = {cfg.n_layers}",
        f"activation = {cfg.activation}",
        f"pooling = {cfg.pooling}",
        f"norm = {cfg.norm}",
        f"dropout = {cfg.dropout!r}",
    ]
    for name in sorted(heads):
        lines.append(f"head_{name} = {heads[name]}")
    return "\n".join(lines).encode()


def _parse_config_blob(blob: bytes) -> tuple[ModelConfig, dict[str, int]]:
    kv = {}
    for line in blob.decode().splitlines():
        k, _, v = line.partition(" = ")
        kv[k] = v
    heads = {
        k[len("head_"):]: int(v) for k, v in kv.items() if k.startswith("head_")
    }
    cfg = ModelConfig(
        input_dim=int(kv["input_dim"]), seq_len=int(kv["seq_len"]),
        d_model=int(kv["d_model"]), n_heads=int(kv["n_heads"]),
        ffn_dim=int(kv["ffn_dim"]), n_layers=int(kv["n_layers"]),
        activation=kv["activation"], pooling=kv["pooling"], norm=kv["norm"],
        dropout=float(kv["dropout"]),
    )
    return cfg, heads


def save_checkpoint(path, params: SsptParams, digest: str = "",
                    optimizer=None, log: list | None = None) -> None:
    heads = {
        name: params.groups[f"head-{name}"]["w"].data.shape[1]
        for name in params.head_names()
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_bytes(f, digest.encode())
        _write_bytes(f, _config_blob(params.config, heads))
        named = list(params.named_tensors())
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            _write_bytes(f, name.encode())
            shape = t.data.shape
            f.write(struct.pack("<I", len(shape)))
            for dim in shape:
                f.write(struct.pack("<I", dim))
            f.write(t.data.astype("<f4").tobytes())
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            st = optimizer.state_dict()
            f.write(struct.pack("<Q", st["t"]))
            f.write(struct.pack("<dddd", st["lr"], st["beta1"], st["beta2"],
                                st["eps"]))
            for arrs in (st["m"], st["v"]):
                for a in arrs:
                    f.write(np.asarray(a).astype("<f4").tobytes())
        blob = "".join(
            f"{epoch},{split},{metric},{value!r}\n" for epoch, split, metric, value
            in (log or [])
        )
        _write_bytes(f, blob.encode())


def load_checkpoint(path):
    """Returns (params, digest, optimizer_state_or_None, log)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ShapeError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_bytes(f).decode()
        cfg, _heads = _parse_config_blob(_read_bytes(f))
        (count,) = struct.unpack("<I", f.read(4))
        groups: dict[str, dict[str, Tensor]] = {}
        shapes = []
        for _ in range(count):
            name = _read_bytes(f).decode()
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            data = np.frombuffer(
                f.read(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4"
            ).reshape(shape).copy()
            group, _, member = name.partition("/")
            groups.setdefault(group, {})[member] = Tensor(data)
            shapes.append(shape)
        params = SsptParams(config=replace(cfg, dtype="float32"), groups=groups)
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt_state = None
        if has_opt:
            (t,) = struct.unpack("<Q", f.read(8))
            lr, b1, b2, eps = struct.unpack("<dddd", f.read(32))
            moments = []
            for _ in range(2):
                arrs = []
                for shape in shapes:
                    arrs.append(np.frombuffer(
                        f.read(4 * int(np.prod(shape, dtype=np.int64))),
                        dtype="<f4",
                    ).reshape(shape).copy())
                moments.append(arrs)
            opt_state = {"t": t, "lr": lr, "beta1": b1, "beta2": b2, "eps": eps,
                         "m": moments[0], "v": moments[1]}
        log = []
        for line in _read_bytes(f).decode().splitlines():
            epoch, split, metric, value = line.split(",")
            log.append((int(epoch), split, metric, float(value)))
    return params, digest, opt_state, log

"""Two-stage Virtual Cell Embedder: nuclear stage (VCE-N) and cytosolic stage (VCE-C).

Parameters live in a flat, ordered ``name -> ndarray`` mapping. Names are
the transfer contract: a stage-1 (RNA-only) checkpoint holds exactly the
``vce_n.*`` tensors and loads by name-and-shape into a two-stage model.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tensorio import FormatError, atomic_write_bytes, decode_from, encode

TWO_STAGE = "two_stage"
SINGLE_STAGE = "single_stage_fusion"
VARIANTS = (TWO_STAGE, SINGLE_STAGE)

ATTENTION_MAPS = ("dna_sa_0", "dna_sa_1", "rna_sa", "dna2rna", "prot_sa", "rna2prot")

CKPT_MAGIC = b"CDT3CKPT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 896
    d_dna: int = 3072
    n_genes: int = 2361
    n_prot: int = 189
    d: int = 512
    heads: int = 8
    ffn: int = 2048
    dropout: float = 0.3
    pool_heads: int = 4
    lambda_prot: float = 0.1
    head_hidden: int = 1024
    architecture_variant: str = TWO_STAGE

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_bins", "d_dna", "n_genes", "n_prot", "d", "heads", "ffn", "pool_heads", "head_hidden"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % self.pool_heads:
            raise ConfigError(f"d={self.d} is not divisible by pool_heads={self.pool_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout!r}")
        if not self.lambda_prot >= 0.0:
            raise ConfigError(f"lambda_prot must be >= 0, got {self.lambda_prot!r}")
        if self.architecture_variant not in VARIANTS:
            raise ConfigError(f"architecture_variant must be one of {VARIANTS}, got {self.architecture_variant!r}")

    @classmethod
    def paper(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        base = dict(n_bins=64, d_dna=48, n_genes=50, n_prot=16, d=32, heads=4, ffn=64,
                    pool_heads=2, head_hidden=64, dropout=0.1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


# ------------------------------------------------------------ parameter layout


def _linear(prefix, n_in, n_out):
    return {f"{prefix}.weight": (n_in, n_out), f"{prefix}.bias": (n_out,)}


def _ln(prefix, d):
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def _block(prefix, d, ffn, cross=False):
    shapes = {}
    shapes.update(_ln(f"{prefix}.ln1", d))
    if cross:
        shapes.update(_ln(f"{prefix}.ln_kv", d))
    for p in "qkvo":
        shapes.update(_linear(f"{prefix}.attn.{p}", d, d))
    shapes.update(_ln(f"{prefix}.ln2", d))
    shapes.update(_linear(f"{prefix}.ffn.fc1", d, ffn))
    shapes.update(_linear(f"{prefix}.ffn.fc2", ffn, d))
    return shapes


def _pool(prefix, d):
    shapes = {f"{prefix}.query": (1, d)}
    for p in "kvo":
        shapes.update(_linear(f"{prefix}.{p}", d, d))
    return shapes


def _encoder(prefix, n, d):
    return {f"{prefix}.embedding": (n, d), f"{prefix}.value.weight": (1, d), f"{prefix}.value.bias": (d,)}


def _mlp(prefix, n_in, n_hidden, n_out):
    shapes = _linear(f"{prefix}.fc1", n_in, n_hidden)
    shapes.update(_linear(f"{prefix}.fc2", n_hidden, n_out))
    return shapes


def parameter_shapes(config: ModelConfig, stage1_only: bool = False) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; every shape is a pure function of ``config``."""
    c = config
    d = c.d
    fusion_in = 3 * d if c.architecture_variant == SINGLE_STAGE else 2 * d
    s: dict[str, tuple[int, ...]] = {}
    s.update(_linear("vce_n.dna_proj", c.d_dna, d))
    s.update(_ln("vce_n.dna_proj.ln", d))
    s.update(_block("vce_n.dna_sa.0", d, c.ffn))
    s.update(_block("vce_n.dna_sa.1", d, c.ffn))
    s.update(_encoder("vce_n.rna_enc", c.n_genes, d))
    s.update(_block("vce_n.rna_sa", d, c.ffn))
    s.update(_block("vce_n.xattn_dna2rna", d, c.ffn, cross=True))
    s.update(_pool("vce_n.pool.dna", d))
    s.update(_pool("vce_n.pool.rna", d))
    s.update(_mlp("vce_n.fusion", fusion_in, 2 * d, d))
    s.update(_mlp("vce_n.rna_head", d, c.head_hidden, c.n_genes))
    if stage1_only:
        return s
    s.update(_encoder("vce_c.prot_enc", c.n_prot, d))
    s.update(_block("vce_c.prot_sa", d, c.ffn))
    s.update(_block("vce_c.xattn_rna2prot", d, c.ffn, cross=True))
    s.update(_pool("vce_c.pool.prot", d))
    if c.architecture_variant == TWO_STAGE:
        s.update(_mlp("vce_c.fusion", 2 * d, 2 * d, d))
    s.update(_mlp("vce_c.prot_head", d, c.head_hidden, c.n_prot))
    return s


def group_of(name: str) -> str:
    """Module group of a parameter name, e.g. ``vce_n.dna_sa.0`` or ``vce_c.pool``."""
    parts = name.split(".")
    return ".".join(parts[:3] if parts[1] == "dna_sa" else parts[:2])


def stage_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    config: ModelConfig
    seed: int = 0

    def copy(self) -> ModelState:
        return ModelState({k: v.copy() for k, v in self.params.items()}, self.config, self.seed)

    @property
    def has_vce_c(self) -> bool:
        return any(k.startswith("vce_c.") for k in self.params)

    def names(self, stage: str | None = None) -> list[str]:
        return [k for k in self.params if stage is None or stage_of(k) == stage]


def _init_tensor(name, shape, seed, dtype):
    if len(shape) == 1:
        return np.ones(shape, dtype) if name.endswith(".gain") else np.zeros(shape, dtype)
    rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(config: ModelConfig, seed: int = 0, *, stage1_only: bool = False,
                dtype=np.float32) -> ModelState:
    """Deterministic initialization: each tensor is seeded by (seed, name)."""
    config.validate()
    shapes = parameter_shapes(config, stage1_only=stage1_only)
    params = {name: _init_tensor(name, shape, seed, dtype) for name, shape in shapes.items()}
    return ModelState(params, config, int(seed))


def count_parameters(state: ModelState) -> int:
    return int(sum(int(np.prod(v.shape)) for v in state.params.values()))


def _group_sizes(shapes) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, shape in shapes:
        g = group_of(name)
        out[g] = out.get(g, 0) + int(np.prod(shape))
    return out


def parameter_breakdown(state: ModelState) -> dict[str, int]:
    return _group_sizes((k, v.shape) for k, v in state.params.items())


def planned_breakdown(config: ModelConfig, stage1_only: bool = False) -> dict[str, int]:
    """Per-group sizes from the layout alone, without allocating tensors."""
    return _group_sizes(parameter_shapes(config, stage1_only).items())


# --------------------------------------------------------------------- forward


@dataclass
class AttentionBundle:
    maps: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.maps[key]

    def __len__(self):
        return len(self.maps)

    def merged(self, other: AttentionBundle) -> AttentionBundle:
        return AttentionBundle({**self.maps, **other.maps})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.maps.items()}


@dataclass
class ForwardOutput:
    y_hat_rna: np.ndarray
    y_hat_prot: np.ndarray | None
    e_rna: np.ndarray
    e_prot: np.ndarray | None
    rna_tokens: np.ndarray


class ParamLeaves:
    """Lazily materializes parameter leaves on a graph."""

    def __init__(self, graph: ad.Graph, params: Mapping[str, np.ndarray],
                 trainable: Callable[[str], bool] | None = None):
        self.graph = graph
        self.params = params
        self.trainable = trainable or (lambda name: False)
        self.used: dict[str, ad.Tensor] = {}

    def __getitem__(self, name: str) -> ad.Tensor:
        t = self.used.get(name)
        if t is None:
            t = self.graph.leaf(name, self.params[name], requires_grad=self.trainable(name))
            self.used[name] = t
        return t


def _lin(P, prefix, x):
    return ad.add(ad.matmul(x, P[f"{prefix}.weight"]), P[f"{prefix}.bias"])


def _ln_apply(P, prefix, x):
    return ad.layernorm(x, P[f"{prefix}.gain"], P[f"{prefix}.bias"])


def _block_fwd(P, prefix, x, cfg, kv=None):
    """Pre-norm transformer block; ``kv`` switches it to cross-attention."""
    h = _ln_apply(P, f"{prefix}.ln1", x)
    src = h if kv is None else _ln_apply(P, f"{prefix}.ln_kv", kv)
    q = _lin(P, f"{prefix}.attn.q", h)
    k = _lin(P, f"{prefix}.attn.k", src)
    v = _lin(P, f"{prefix}.attn.v", src)
    att, weights = ad.attention(q, k, v, cfg.heads)
    x = ad.add(x, ad.dropout(_lin(P, f"{prefix}.attn.o", att), cfg.dropout))
    h2 = _ln_apply(P, f"{prefix}.ln2", x)
    f = _lin(P, f"{prefix}.ffn.fc2", ad.gelu(_lin(P, f"{prefix}.ffn.fc1", h2)))
    x = ad.add(x, ad.dropout(f, cfg.dropout))
    return x, weights


def _pool_fwd(P, prefix, x, cfg):
    k = _lin(P, f"{prefix}.k", x)
    v = _lin(P, f"{prefix}.v", x)
    att, _ = ad.attention(P[f"{prefix}.query"], k, v, cfg.pool_heads)
    return ad.reshape(_lin(P, f"{prefix}.o", att), (cfg.d,))


def _encoder_fwd(P, prefix, values):
    n = values.data.shape[0]
    contrib = ad.matmul(ad.reshape(values, (n, 1)), P[f"{prefix}.value.weight"])
    return ad.add(ad.add(P[f"{prefix}.embedding"], contrib), P[f"{prefix}.value.bias"])


def _mlp_fwd(P, prefix, x, cfg):
    h = ad.dropout(ad.gelu(_lin(P, f"{prefix}.fc1", x)), cfg.dropout)
    return _lin(P, f"{prefix}.fc2", h)


def _check_input(name, arr, shape):
    if tuple(arr.shape) != tuple(shape):
        raise ad.DimensionError(f"{name}: expected shape {list(shape)}, got {list(arr.shape)}")


def vce_n_graph(P: ParamLeaves, cfg: ModelConfig, dna: ad.Tensor, rna: ad.Tensor, prot_pooled=None):
    """Nuclear stage on an existing graph.

    Returns a dict of tensors (``e_rna``, ``y_hat_rna``, ``rna_tokens``,
    ``dna_tokens``) and the partial attention bundle. ``prot_pooled`` is
    only used by the single-stage fusion variant.
    """
    _check_input("dna", dna.data, (cfg.n_bins, cfg.d_dna))
    _check_input("x_rna", rna.data, (cfg.n_genes,))
    maps = {}
    x = _ln_apply(P, "vce_n.dna_proj.ln", _lin(P, "vce_n.dna_proj", dna))
    x, maps["dna_sa_0"] = _block_fwd(P, "vce_n.dna_sa.0", x, cfg)
    x, maps["dna_sa_1"] = _block_fwd(P, "vce_n.dna_sa.1", x, cfg)
    r = _encoder_fwd(P, "vce_n.rna_enc", rna)
    r, maps["rna_sa"] = _block_fwd(P, "vce_n.rna_sa", r, cfg)
    r, maps["dna2rna"] = _block_fwd(P, "vce_n.xattn_dna2rna", r, cfg, kv=x)
    pooled = [_pool_fwd(P, "vce_n.pool.dna", x, cfg), _pool_fwd(P, "vce_n.pool.rna", r, cfg)]
    if prot_pooled is not None:
        pooled.append(prot_pooled)
    e = _mlp_fwd(P, "vce_n.fusion", ad.concat(pooled, axis=0), cfg)
    y = _mlp_fwd(P, "vce_n.rna_head", e, cfg)
    return {"e_rna": e, "y_hat_rna": y, "rna_tokens": r, "dna_tokens": x}, AttentionBundle(maps)


def _prot_tokens(P, cfg, prot, rna_tokens):
    maps = {}
    p = _encoder_fwd(P, "vce_c.prot_enc", prot)
    p, maps["prot_sa"] = _block_fwd(P, "vce_c.prot_sa", p, cfg)
    p, maps["rna2prot"] = _block_fwd(P, "vce_c.xattn_rna2prot", p, cfg, kv=rna_tokens)
    return p, maps


def vce_c_graph(P: ParamLeaves, cfg: ModelConfig, e_rna: ad.Tensor, rna_tokens: ad.Tensor, prot: ad.Tensor):
    _check_input("x_prot", prot.data, (cfg.n_prot,))
    _check_input("rna_tokens", rna_tokens.data, (cfg.n_genes, cfg.d))
    p, maps = _prot_tokens(P, cfg, prot, rna_tokens)
    pooled = _pool_fwd(P, "vce_c.pool.prot", p, cfg)
    e = _mlp_fwd(P, "vce_c.fusion", ad.concat([e_rna, pooled], axis=0), cfg)
    y = _mlp_fwd(P, "vce_c.prot_head", e, cfg)
    return {"e_prot": e, "y_hat_prot": y}, AttentionBundle(maps)


def forward_graph(P: ParamLeaves, cfg: ModelConfig, dna, x_rna, x_prot=None, *,
                  with_vce_c: bool = True):
    """Whole model on a graph; inputs may be arrays (made constants) or tensors."""
    g = P.graph

    def as_t(v, name):
        return v if isinstance(v, ad.Tensor) else g.constant(v, name=name)

    dna_t, rna_t = as_t(dna, "input.dna"), as_t(x_rna, "input.x_rna")
    if cfg.architecture_variant == SINGLE_STAGE and with_vce_c:
        prot_t = as_t(x_prot, "input.x_prot")
        _check_input("x_prot", prot_t.data, (cfg.n_prot,))
        # protein tokens attend to the raw-encoded RNA tokens before joint fusion
        r0 = _encoder_fwd(P, "vce_n.rna_enc", rna_t)
        p, pmaps = _prot_tokens(P, cfg, prot_t, r0)
        pooled = _pool_fwd(P, "vce_c.pool.prot", p, cfg)
        out, bundle = vce_n_graph(P, cfg, dna_t, rna_t, prot_pooled=pooled)
        out["e_prot"] = out["e_rna"]
        out["y_hat_prot"] = _mlp_fwd(P, "vce_c.prot_head", out["e_rna"], cfg)
        return out, bundle.merged(AttentionBundle(pmaps))
    out, bundle = vce_n_graph(P, cfg, dna_t, rna_t)
    if with_vce_c:
        c_out, c_bundle = vce_c_graph(P, cfg, out["e_rna"], out["rna_tokens"], as_t(x_prot, "input.x_prot"))
        out.update(c_out)
        bundle = bundle.merged(c_bundle)
    return out, bundle


def _eval_graph(state: ModelState):
    return ad.Graph(training=False, dtype=next(iter(state.params.values())).dtype)


def vce_n_forward(state: ModelState, dna, rna):
    g = _eval_graph(state)
    out, bundle = vce_n_graph(ParamLeaves(g, state.params), state.config,
                              g.constant(dna, "input.dna"), g.constant(rna, "input.x_rna"))
    return out["e_rna"].data, out["y_hat_rna"].data, out["rna_tokens"].data, bundle


def vce_c_forward(state: ModelState, e_rna, rna_tokens, prot):
    if state.config.architecture_variant != TWO_STAGE:
        raise ConfigError("vce_c_forward applies to the two_stage variant only")
    g = _eval_graph(state)
    out, bundle = vce_c_graph(ParamLeaves(g, state.params), state.config, g.constant(e_rna, "e_rna"),
                              g.constant(rna_tokens, "rna_tokens"), g.constant(prot, "input.x_prot"))
    return out["e_prot"].data, out["y_hat_prot"].data, bundle


def full_forward(state: ModelState, sample, *, return_attention: bool = False):
    """Evaluation-mode forward of one cell (dropout off)."""
    g = _eval_graph(state)
    with_c = state.has_vce_c
    out, bundle = forward_graph(ParamLeaves(g, state.params), state.config, sample.dna, sample.x_rna,
                                sample.x_prot if with_c else None, with_vce_c=with_c)
    fo = ForwardOutput(
        y_hat_rna=out["y_hat_rna"].data,
        y_hat_prot=out["y_hat_prot"].data if with_c else None,
        e_rna=out["e_rna"].data,
        e_prot=out["e_prot"].data if with_c else None,
        rna_tokens=out["rna_tokens"].data,
    )
    return (fo, bundle) if return_attention else fo


def capture_attention(state: ModelState, sample) -> AttentionBundle:
    return full_forward(state, sample, return_attention=True)[1]


def expected_attention_shapes(config: ModelConfig) -> dict[str, tuple[int, int, int]]:
    h, b, n, p = config.heads, config.n_bins, config.n_genes, config.n_prot
    return {"dna_sa_0": (h, b, b), "dna_sa_1": (h, b, b), "rna_sa": (h, n, n),
            "dna2rna": (h, n, b), "prot_sa": (h, p, p), "rna2prot": (h, p, n)}


# ------------------------------------------------------------------ checkpoint


def _manifest(state: ModelState) -> dict:
    return {
        "format": "cdt3-checkpoint",
        "version": 1,
        "config": state.config.to_dict(),
        "seed": state.seed,
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.params.items()],
    }


def checkpoint_bytes(state: ModelState) -> bytes:
    """Serialized checkpoint.

    Layout: ``b"CDT3CKPT"``, uint64 LE manifest length, UTF-8 JSON
    manifest, then one tensor container per manifest entry, in order.
    """
    manifest = json.dumps(_manifest(state), sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<Q", len(manifest)), manifest]
    parts.extend(encode(v) for v in state.params.values())
    return b"".join(parts)


def save_checkpoint(state: ModelState, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(state))


def parse_checkpoint(data: bytes) -> ModelState:
    if len(data) < len(CKPT_MAGIC) + 8 or data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("not a cdt3 checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) - pos < mlen:
        raise FormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[pos:pos + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from None
    pos += mlen
    try:
        config = ModelConfig(**manifest["config"])
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"bad config in checkpoint manifest: {exc}") from None
    params = {}
    for entry in manifest["tensors"]:
        arr, pos = decode_from(data, pos)
        if list(arr.shape) != list(entry["shape"]) or str(arr.dtype) != entry["dtype"]:
            raise FormatError(f"tensor {entry['name']}: payload {list(arr.shape)}/{arr.dtype} "
                              f"does not match manifest {entry['shape']}/{entry['dtype']}")
        params[entry["name"]] = arr
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return ModelState(params, config, int(manifest.get("seed", 0)))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelState:
    state = parse_checkpoint(Path(path).read_bytes())
    if expected_config is not None:
        stage1 = not state.has_vce_c
        want = parameter_shapes(expected_config, stage1_only=stage1)
        bad = []
        for name, shape in want.items():
            got = state.params.get(name)
            if got is None:
                bad.append(f"{name}: missing")
            elif tuple(got.shape) != tuple(shape):
                bad.append(f"{name}: {list(got.shape)} != expected {list(shape)}")
        bad.extend(f"{name}: unexpected" for name in state.params if name not in want)
        if bad:
            raise FormatError("checkpoint does not match config:\n  " + "\n  ".join(bad))
    return state


# -------------------------------------------------------------------- transfer


LOADED = "loaded_exact"
MISMATCH = "shape_mismatch"
ABSENT = "absent_in_source"


@dataclass
class TransferReport:
    status: dict[str, str]
    n_source: int

    @property
    def counts(self) -> dict[str, int]:
        out = {LOADED: 0, MISMATCH: 0, ABSENT: 0}
        for s in self.status.values():
            out[s] += 1
        return out

    @property
    def fraction_loaded(self) -> float:
        """Share of source tensors that landed bit-exactly in the target."""
        return self.counts[LOADED] / self.n_source if self.n_source else 0.0

    def names_with(self, status: str) -> list[str]:
        return [k for k, v in self.status.items() if v == status]

    def groups_with(self, status: str) -> list[str]:
        return sorted({group_of(k) for k in self.names_with(status)})


def transfer_weights(source, target_config: ModelConfig, seed: int = 0) -> tuple[ModelState, TransferReport]:
    """Load every name-and-shape match from ``source``; fresh-init the rest.

    ``source`` is a checkpoint path, a :class:`ModelState`, or a plain
    ``name -> array`` mapping. Incompatibility is reported, never raised.
    """
    if isinstance(source, ModelState):
        src = source.params
    elif isinstance(source, Mapping):
        src = source
    else:
        src = load_checkpoint(source).params
    target = build_model(target_config, seed)
    status = {}
    for name, arr in target.params.items():
        s = src.get(name)
        if s is None:
            status[name] = ABSENT
        elif tuple(s.shape) != tuple(arr.shape):
            status[name] = MISMATCH
        else:
            target.params[name] = np.array(s, dtype=arr.dtype, copy=True)
            status[name] = LOADED
    return target, TransferReport(status, len(src))

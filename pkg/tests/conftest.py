"""Shared builders and the session-wide trained desk models."""

from __future__ import annotations

import functools
import time

import numpy as np
import pytest

from cdt3 import autodiff as ad
from cdt3.config import default_config
from cdt3.model import (
    SINGLE_STAGE,
    TWO_STAGE,
    ModelConfig,
    ParamLeaves,
    build_model,
    forward_graph,
)
from cdt3.pipeline import evaluate_split, synthesize, train
from cdt3.training import loss_graph

ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE_LINES: list[str] = []
TRAIN_SECONDS: dict[int, float] = {}


# ------------------------------------------------------------ parameter oracle


def closed_form_count(n_bins, d_dna, n_genes, n_prot, d, ffn, head_hidden, fusion_inputs=2, stage1=False):
    """Parameter total written out from the architecture description, layer by layer."""
    def lin(i, o):
        return i * o + o

    def ln(w):
        return 2 * w

    def block(cross=False):
        return ln(d) * (3 if cross else 2) + 4 * lin(d, d) + lin(d, ffn) + lin(ffn, d)

    def pool():
        return d + 3 * lin(d, d)

    def enc(n):
        return n * d + 2 * d

    def mlp(i, h, o):
        return lin(i, h) + lin(h, o)

    nuclear = (lin(d_dna, d) + ln(d) + 2 * block() + enc(n_genes) + block() + block(cross=True)
               + 2 * pool() + mlp(fusion_inputs * d, 2 * d, d) + mlp(d, head_hidden, n_genes))
    if stage1:
        return nuclear
    cyto = enc(n_prot) + block() + block(cross=True) + pool() + mlp(d, head_hidden, n_prot)
    if fusion_inputs == 2:
        cyto += mlp(2 * d, 2 * d, d)
    return nuclear + cyto


# ------------------------------------------------------------ random graphs


def random_graph_case(seed: int):
    """A random chain of primitives ending in a scalar, and the point to check it at."""
    rng = np.random.default_rng([seed, 0xAD])
    n, d = int(rng.integers(2, 5)), 2 * int(rng.integers(1, 4))
    point = {"x0": rng.normal(size=(n, d))}
    ops = rng.choice(["linear", "layernorm", "gelu", "softmax", "attention", "concat", "slice", "mean",
                      "scale", "dropout", "residual"], size=int(rng.integers(3, 7)))
    plan = []
    width = d
    for i, op in enumerate(ops):
        if op == "linear":
            out = 2 * int(rng.integers(1, 4))
            point[f"w{i}"] = rng.normal(scale=1 / np.sqrt(width), size=(width, out))
            point[f"b{i}"] = rng.normal(size=out)
            width = out
        elif op == "layernorm":
            point[f"g{i}"] = rng.normal(size=width)
            point[f"b{i}"] = rng.normal(size=width)
        elif op in ("attention", "concat", "residual"):
            point[f"w{i}"] = rng.normal(scale=1 / np.sqrt(width), size=(width, width))
        plan.append(str(op))
    target = rng.normal(size=(n, width))
    mask = rng.random((n, width)) < 0.8
    mask.flat[0] = True

    def fn(g, L):
        x = L["x0"]
        for i, op in enumerate(plan):
            if op == "linear":
                x = ad.add(ad.matmul(x, L[f"w{i}"]), L[f"b{i}"])
            elif op == "layernorm":
                x = ad.layernorm(x, L[f"g{i}"], L[f"b{i}"])
            elif op == "gelu":
                x = ad.gelu(x)
            elif op == "softmax":
                x = ad.softmax(x)
            elif op == "attention":
                kv = ad.matmul(x, L[f"w{i}"])
                x = ad.attention(x, kv, kv, 2)[0]
            elif op == "concat":
                y = ad.matmul(x, L[f"w{i}"])
                half = x.data.shape[1] // 2
                x = ad.concat([ad.slice_(x, (slice(None), slice(0, half))),
                               ad.slice_(y, (slice(None), slice(half, None)))], axis=1)
            elif op == "slice":
                x = ad.concat([ad.slice_(x, slice(1, None)), ad.slice_(x, slice(0, 1))], axis=0)
            elif op == "mean":
                x = ad.add(x, ad.mean(x, 0))
            elif op == "scale":
                x = ad.scale(x, -1.7)
            elif op == "dropout":
                x = ad.dropout(x, 0.25)
            else:
                x = ad.add(x, ad.gelu(ad.matmul(x, L[f"w{i}"])))
        return ad.mse(x, g.constant(target), mask)

    return fn, point, plan


# ------------------------------------------------------------ random models


def random_model_config(seed: int) -> ModelConfig:
    rng = np.random.default_rng([seed, 0x30DE1])
    heads = int(rng.choice([1, 2]))
    # layernorm over 2 features collapses to a sign and has no usable derivative
    d = int(rng.choice([4, 8]))
    return ModelConfig(n_bins=int(rng.integers(3, 7)), d_dna=int(rng.integers(2, 6)),
                       n_genes=int(rng.integers(2, 6)), n_prot=int(rng.integers(2, 5)), d=d, heads=heads,
                       ffn=int(rng.integers(3, 7)), dropout=float(rng.choice([0.0, 0.2])),
                       pool_heads=int(rng.choice([1, 2])), lambda_prot=float(rng.uniform(0.05, 1.0)),
                       head_hidden=int(rng.integers(3, 7)),
                       architecture_variant=str(rng.choice([TWO_STAGE, SINGLE_STAGE])))


class _Bound(ParamLeaves):
    """ParamLeaves over leaves that already exist on the graph."""

    def __init__(self, graph, leaves):
        super().__init__(graph, {})
        self.used = dict(leaves)


class _Sample:
    def __init__(self, rng, cfg):
        self.y_rna = rng.normal(size=cfg.n_genes)
        self.y_prot = rng.normal(size=cfg.n_prot)


def random_model_case(seed: int):
    """(config, fn, point): the masked loss of a whole random model over params and inputs."""
    cfg = random_model_config(seed)
    rng = np.random.default_rng([seed, 0xF00D])
    point = dict(build_model(cfg, seed, dtype=np.float64).params)
    # fresh-init biases and gains are 0/1; move them off the symmetric point
    for k, v in point.items():
        if v.ndim == 1:
            point[k] = v + rng.normal(scale=0.3, size=v.shape)
    point["input.dna"] = rng.normal(size=(cfg.n_bins, cfg.d_dna))
    point["input.x_rna"] = rng.normal(size=cfg.n_genes)
    point["input.x_prot"] = rng.normal(size=cfg.n_prot)
    sample = _Sample(rng, cfg)
    mask = rng.random(cfg.n_prot) < 0.6
    mask[0] = True

    def fn(g, L):
        out, _ = forward_graph(_Bound(g, L), cfg, L["input.dna"], L["input.x_rna"], L["input.x_prot"])
        return loss_graph(out, sample, mask, cfg.lambda_prot)[0]

    return cfg, fn, point


# ------------------------------------------------------------ trained desk models


@functools.cache
def desk_run(seed: int):
    """(config, world, dataset, trained run, held-out report) for one desk seed; trained once per session."""
    cfg = default_config("desk", seed)
    world, data = synthesize(cfg)
    t0 = time.perf_counter()
    run = train(cfg, data)
    TRAIN_SECONDS[seed] = time.perf_counter() - t0
    return cfg, world, data, run, evaluate_split(run.state, data, "heldout")


@functools.cache
def desk_data(seed: int = 0):
    cfg = default_config("desk", seed)
    world, data = synthesize(cfg)
    return cfg, world, data


@pytest.fixture(scope="session")
def desk0():
    return desk_data(0)


@pytest.fixture(scope="session")
def trained0():
    return desk_run(0)


def unit_scaled(fn, point, *, training=False, graph_seed=0):
    """``fn`` divided by its magnitude at ``point``.

    Central differences carry an absolute noise of about |f| * 1e-12 at
    epsilon 1e-4; scaling to |f| = 1 keeps that noise under the 1e-8
    relative-error floor for gradients that are zero in exact arithmetic.
    """
    g = ad.Graph(seed=graph_seed, training=training, dtype=np.float64)
    f0 = abs(float(fn(g, {k: g.leaf(k, v) for k, v in point.items()}).data))
    c = 1.0 / f0 if f0 > 0 else 1.0
    return lambda g, L: ad.scale(fn(g, L), c)


@pytest.fixture(scope="session")
def cli_run0(tmp_path_factory):
    """synth -> train -> eval through the command line, desk preset, seed 0."""
    from cdt3.cli import main

    root = tmp_path_factory.mktemp("cli")
    data, model, ev = root / "data", root / "model", root / "eval"
    assert main(["synth", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(model)]) == 0
    assert main(["eval", "--data", str(data), "--model", str(model / "model.ckpt"), "--out", str(ev)]) == 0
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

"""Masked multi-task loss, Adam with per-group learning rates, and the
two-phase freeze/unfreeze schedule with patience-based early stopping."""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import (
    TWO_STAGE,
    ModelConfig,
    ModelState,
    ParamLeaves,
    build_model,
    forward_graph,
    full_forward,
    stage_of,
    transfer_weights,
    vce_c_graph,
    vce_n_graph,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ContractError(RuntimeError):
    pass


def derive_expression_mask(protein_matrix, threshold: float = 0.5) -> np.ndarray:
    """``mask[j]`` is true iff the column mean of ``protein_matrix`` exceeds ``threshold``."""
    m = np.asarray(protein_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty cells x proteins matrix, got shape {m.shape}")
    return m.mean(axis=0) > threshold


def compute_loss(pred, sample, mask, lambda_prot: float) -> tuple[float, float, float]:
    """``L = L_RNA + lambda * L_Prot``; ``L_Prot`` covers masked-in proteins only."""
    mask = np.asarray(mask, dtype=bool)
    if pred.y_hat_prot is not None and mask.shape != np.shape(pred.y_hat_prot):
        raise ad.DimensionError(f"mask length {mask.shape} does not match protein output")
    r = np.asarray(pred.y_hat_rna, dtype=np.float64) - np.asarray(sample.y_rna, dtype=np.float64)
    l_rna = float(np.mean(r * r))
    if pred.y_hat_prot is None:
        return l_rna, l_rna, 0.0
    if not mask.any():
        warnings.warn("expression mask is all false; protein loss set to 0", RuntimeWarning, stacklevel=2)
        return l_rna, l_rna, 0.0
    p = (np.asarray(pred.y_hat_prot, dtype=np.float64) - np.asarray(sample.y_prot, dtype=np.float64))[mask]
    l_prot = float(np.mean(p * p))
    return l_rna + lambda_prot * l_prot, l_rna, l_prot


def loss_graph(out: Mapping[str, ad.Tensor], sample, mask, lambda_prot: float):
    """Graph version of :func:`compute_loss`; returns (L, L_RNA, L_Prot) tensors."""
    l_rna = ad.mse(out["y_hat_rna"], sample.y_rna)
    if "y_hat_prot" not in out:
        return l_rna, l_rna, None
    l_prot = ad.mse(out["y_hat_prot"], sample.y_prot, mask)
    return ad.add(l_rna, ad.scale(l_prot, lambda_prot)), l_rna, l_prot


# ------------------------------------------------------------------- optimizer


def lr_for(name: str, lr_map: Mapping[str, float | None]) -> float | None:
    """Longest-prefix lookup of a parameter's learning rate (``None`` = frozen)."""
    best, best_len = None, -1
    for key, lr in lr_map.items():
        if (name == key or name.startswith(key + ".")) and len(key) > best_len:
            best, best_len = lr, len(key)
    return best


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(state: ModelState, gradients: Mapping[str, np.ndarray],
                   lr_map: Mapping[str, float | None], moments: AdamMoments) -> ModelState:
    """One Adam update in place; parameters whose group is frozen are untouched.

    Frozen parameters never acquire moment buffers, and passing a gradient
    for one is a contract violation.
    """
    frozen = [n for n in gradients if lr_for(n, lr_map) is None]
    if frozen:
        raise ContractError(f"gradients supplied for frozen parameters: {frozen[:5]}")
    moments.t += 1
    t = moments.t
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in gradients.items():
        lr = lr_for(name, lr_map)
        p = state.params[name]
        g = np.asarray(g, dtype=np.float64)
        m = moments.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = moments.v[name]
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        moments.m[name], moments.v[name] = m, v
        if lr == 0.0:
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        state.params[name] = (p - update).astype(p.dtype)
    return state


# ---------------------------------------------------------------------- phases


@dataclass
class PhaseConfig:
    epochs_max: int = 300
    patience: int = 30
    lr_map: dict = field(default_factory=lambda: {"vce_n": None, "vce_c": 1e-3})
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if not 1 <= self.patience <= self.epochs_max:
            raise ValueError("patience must be in [1, epochs_max]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for k, lr in self.lr_map.items():
            if lr is not None and not lr >= 0.0:
                raise ValueError(f"learning rate for {k!r} must be >= 0 or null (frozen)")

    @classmethod
    def phase1(cls, **kw):
        base = dict(epochs_max=300, patience=30, lr_map={"vce_n": None, "vce_c": 1e-3})
        base.update(kw)
        return cls(**base)

    @classmethod
    def phase2(cls, **kw):
        base = dict(epochs_max=500, patience=50, lr_map={"vce_n": 1e-5, "vce_c": 5e-5})
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {"epochs_max": self.epochs_max, "patience": self.patience, "lr_map": dict(self.lr_map),
                "batch_size": self.batch_size, "seed": self.seed}


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    l_rna: list[float] = field(default_factory=list)
    l_prot: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def rows(self):
        for i in range(len(self.train_loss)):
            yield i + 1, self.train_loss[i], self.val_loss[i], self.l_rna[i], self.l_prot[i]


class _FrozenCache:
    """Eval-mode VCE-N outputs, reused while VCE-N is frozen."""

    def __init__(self, state: ModelState, samples):
        self.e_rna, self.tokens, self.y_rna = [], [], []
        for s in samples:
            g = ad.Graph(training=False)
            out, _ = vce_n_graph(ParamLeaves(g, state.params), state.config,
                                 g.constant(s.dna), g.constant(s.x_rna))
            self.e_rna.append(out["e_rna"].data)
            self.tokens.append(out["rna_tokens"].data)
            self.y_rna.append(out["y_hat_rna"].data)


def _cell_graph(state, sample, *, training, seed, step, trainable, cache=None, idx=None):
    cfg = state.config
    g = ad.Graph(seed=seed, step=step, training=training)
    P = ParamLeaves(g, state.params, trainable)
    if cache is not None:
        y_rna = g.constant(cache.y_rna[idx])
        out, _ = vce_c_graph(P, cfg, g.constant(cache.e_rna[idx]), g.constant(cache.tokens[idx]),
                             g.constant(sample.x_prot))
        out["y_hat_rna"] = y_rna
    else:
        out, _ = forward_graph(P, cfg, sample.dna, sample.x_rna,
                               sample.x_prot if state.has_vce_c else None, with_vce_c=state.has_vce_c)
    return g, out


def evaluate_loss(state: ModelState, samples, mask, cache=None) -> tuple[float, float, float]:
    """Mean (L, L_RNA, L_Prot) over ``samples`` in evaluation mode."""
    tot = np.zeros(3)
    lam = state.config.lambda_prot
    for i, s in enumerate(samples):
        g, out = _cell_graph(state, s, training=False, seed=0, step=0, trainable=None, cache=cache, idx=i)
        L, lr_, lp = loss_graph(out, s, mask, lam)
        tot += [float(L.data), float(lr_.data), 0.0 if lp is None else float(lp.data)]
    return tuple(tot / max(len(samples), 1))


def train_phase(state: ModelState, train_set: Sequence, val_set: Sequence,
                phase: PhaseConfig, mask=None) -> tuple[ModelState, TrainHistory]:
    """Train with early stopping on validation total loss.

    Returns the state from the best validation epoch (ties keep the
    earlier epoch), not the last one. ``state`` is not modified.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    train_targets = {s.target_gene for s in train_set}
    overlap = train_targets & {s.target_gene for s in val_set}
    if overlap:
        raise ValueError(f"train/val share target genes: {sorted(overlap)}")
    phase.validate()
    cfg: ModelConfig = state.config
    if mask is None:
        mask = np.ones(cfg.n_prot, dtype=bool)
    state = state.copy()
    trainable_names = {n for n in state.params if lr_for(n, phase.lr_map) is not None}
    if not trainable_names:
        raise ValueError("every parameter group is frozen")
    trainable = trainable_names.__contains__
    # a frozen nuclear stage feeds the protein stage constants, so compute them once
    vce_n_frozen = (state.has_vce_c and cfg.architecture_variant == TWO_STAGE
                    and not any(stage_of(n) == "vce_n" for n in trainable_names))
    train_cache = _FrozenCache(state, train_set) if vce_n_frozen else None
    val_cache = _FrozenCache(state, val_set) if vce_n_frozen else None

    moments = AdamMoments()
    hist = TrainHistory()
    best_state = state.copy()
    best = math.inf
    since_best = 0
    lam = cfg.lambda_prot
    n = len(train_set)
    step = 0
    for epoch in range(phase.epochs_max):
        order = np.random.default_rng([phase.seed, epoch]).permutation(n)
        ep_loss = ep_rna = ep_prot = 0.0
        for start in range(0, n, phase.batch_size):
            batch = order[start:start + phase.batch_size]
            acc: dict[str, np.ndarray] = {}
            for i in batch:
                s = train_set[i]
                g, out = _cell_graph(state, s, training=True, seed=phase.seed, step=step,
                                     trainable=trainable, cache=train_cache, idx=int(i))
                step += 1
                L, lr_, lp = loss_graph(out, s, mask, lam)
                ep_loss += float(L.data)
                ep_rna += float(lr_.data)
                ep_prot += 0.0 if lp is None else float(lp.data)
                names = [k for k, t in g.leaves.items() if t.needs_grad]
                grads = ad.backward(g, L, wrt=names)
                for k in names:
                    gk = grads[k]
                    acc[k] = gk.astype(np.float64) if k not in acc else acc[k] + gk
            scale = 1.0 / len(batch)
            optimizer_step(state, {k: v * scale for k, v in acc.items()}, phase.lr_map, moments)
        val = evaluate_loss(state, val_set, mask, cache=val_cache)[0]
        hist.train_loss.append(ep_loss / n)
        hist.l_rna.append(ep_rna / n)
        hist.l_prot.append(ep_prot / n)
        hist.val_loss.append(val)
        if val < best:
            best, since_best = val, 0
            hist.best_epoch = epoch
            best_state = state.copy()
        else:
            since_best += 1
        log.debug("epoch %d train %.5f val %.5f", epoch + 1, ep_loss / n, val)
        if since_best >= phase.patience:
            hist.stop_reason = "patience"
            break
    else:
        hist.stop_reason = "max_epochs"
    return best_state, hist


def train_stage1(config: ModelConfig, train_set, val_set, phase: PhaseConfig, seed: int = 0):
    """RNA-only nuclear-stage model, the transfer source for two-stage training."""
    state = build_model(config, seed, stage1_only=True)
    return train_phase(state, train_set, val_set, phase)


def two_phase_train(stage1_checkpoint, config: ModelConfig, train_set, val_set, mask,
                    phase1: PhaseConfig, phase2: PhaseConfig, seed: int = 0):
    """Transfer stage-1 weights, train VCE-C alone, then fine-tune everything.

    Each phase starts from fresh optimizer moments.
    """
    state, report = transfer_weights(stage1_checkpoint, config, seed)
    state, h1 = train_phase(state, train_set, val_set, phase1, mask)
    state, h2 = train_phase(state, train_set, val_set, phase2, mask)
    return state, (h1, h2), report


def predict(state: ModelState, samples) -> tuple[np.ndarray, np.ndarray | None]:
    """Evaluation-mode predictions stacked over ``samples``."""
    rna, prot = [], []
    for s in samples:
        fo = full_forward(state, s)
        rna.append(fo.y_hat_rna)
        if fo.y_hat_prot is not None:
            prot.append(fo.y_hat_prot)
    return np.array(rna), (np.array(prot) if prot else None)


@dataclass
class Schedule:
    """The three phases of a full run: RNA-only pre-training, then the two-phase schedule."""

    stage1: PhaseConfig
    phase1: PhaseConfig
    phase2: PhaseConfig

    def to_dict(self) -> dict:
        return {"stage1": self.stage1.to_dict(), "phase1": self.phase1.to_dict(), "phase2": self.phase2.to_dict()}


def desk_schedule(seed: int = 0) -> Schedule:
    """Short phases with small batches; sized for a few CPU minutes per seed."""
    return Schedule(
        stage1=PhaseConfig(epochs_max=25, patience=10, lr_map={"vce_n": 3e-3}, batch_size=8, seed=seed),
        phase1=PhaseConfig.phase1(epochs_max=20, patience=10, batch_size=8, seed=seed),
        phase2=PhaseConfig.phase2(epochs_max=10, patience=5, batch_size=8, seed=seed),
    )


def run_schedule(config: ModelConfig, train_set, val_set, mask, schedule: Schedule, seed: int = 0):
    """Stage-1 training followed by transfer and the two-phase schedule."""
    stage1, h0 = train_stage1(config, train_set, val_set, schedule.stage1, seed)
    state, (h1, h2), report = two_phase_train(stage1, config, train_set, val_set, mask,
                                              schedule.phase1, schedule.phase2, seed)
    return state, stage1, (h0, h1, h2), report

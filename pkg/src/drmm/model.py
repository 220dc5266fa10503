"""Toy multi-stage detection head and its first-order trainer.

Each stage crops features from the scene raster inside every proposal box,
runs a small tanh MLP per proposal and activates the raw rows into mixture
parameters. Stage ``s`` uses the (detached) locations of stage ``s - 1`` as
its proposals, optionally keeping only the top fraction by objectness.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .activation import Activated, activate, activate_backward, raw_width
from .geometry import Box
from .losses import DEFAULT_BETA, StageLoss, StopGradConfig, pack_gts, stage_loss
from .mixture import ComponentParams, MixtureParams

log = logging.getLogger(__name__)

WEIGHTS_FORMAT = "drmm-weights/1"
RELATION_DIM = 3


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_stages: int = 2
    num_proposals: int = 20
    num_classes: int = 4
    hidden_sizes: tuple = (64,)
    topk_ratio: float = 1.0
    seed: int = 0
    out_size: int = 4
    crop_sampling: int = 4
    in_channels: int = 3
    embed_dim: int = 16
    min_scale: float = 0.1
    jitter: float = 0.05
    relation: bool = True
    objectness_bias: float = 0.0
    crop_context: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.num_stages < 1 or self.num_proposals < 1 or self.num_classes < 1:
            raise ConfigError("stages, proposals and classes must be positive")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ConfigError("topk_ratio must lie in (0, 1]")
        if self.stage_sizes()[-1] < 1:
            raise ConfigError("top-k pruning leaves no proposals")
        if self.crop_context < 0:
            raise ConfigError("crop_context must be non-negative")

    @property
    def relation_dim(self) -> int:
        return RELATION_DIM if self.relation else 0

    @property
    def embed_offset(self) -> int:
        return self.out_size * self.out_size * self.in_channels + 4 + self.relation_dim

    @property
    def input_dim(self) -> int:
        return self.embed_offset + self.embed_dim

    def stage_sizes(self) -> list:
        sizes = [self.num_proposals]
        for _ in range(1, self.num_stages):
            sizes.append(int(math.floor(self.topk_ratio * sizes[-1] + 1e-9)))
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "hidden_sizes": tuple(d.get("hidden_sizes", (64,)))})


# ------------------------------------------------------------------- weights

def layer_names(cfg: ModelConfig, stage: int) -> list:
    n_layers = len(cfg.hidden_sizes) + 1
    return [(f"s{stage}.w{j}", f"s{stage}.b{j}") for j in range(n_layers)]


def init_weights(cfg: ModelConfig) -> dict:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, jittered full-scene proposals."""
    rng = np.random.default_rng(cfg.seed)
    w = {}
    jit = rng.uniform(-cfg.jitter, cfg.jitter, size=(cfg.num_proposals, 4))
    w["proposals"] = np.clip(np.array([0.0, 0.0, 1.0, 1.0]) + jit, 0.0, 1.0)
    w["embed"] = rng.uniform(-1.0, 1.0, size=(cfg.num_proposals, cfg.embed_dim))
    dims = [cfg.input_dim, *cfg.hidden_sizes, raw_width(cfg.num_classes)]
    for s in range(cfg.num_stages):
        for j, (wn, bn) in enumerate(layer_names(cfg, s)):
            bound = 1.0 / math.sqrt(dims[j])
            w[wn] = rng.uniform(-bound, bound, size=(dims[j], dims[j + 1]))
            w[bn] = np.zeros(dims[j + 1])
        w[layer_names(cfg, s)[-1][1]][-1] = cfg.objectness_bias
    return w


def check_weights(weights: dict, cfg: ModelConfig):
    ref = init_weights(replace(cfg, seed=0))
    if set(ref) != set(weights):
        raise ConfigError(f"weight names differ from config: {sorted(set(ref) ^ set(weights))}")
    for k, v in ref.items():
        if np.shape(weights[k]) != v.shape:
            raise ConfigError(f"{k}: shape {np.shape(weights[k])} != {v.shape}")


def save_weights(weights: dict, cfg: ModelConfig, path, meta: dict | None = None):
    doc = {
        "format": WEIGHTS_FORMAT,
        "config": cfg.to_dict(),
        "meta": meta or {},
        "arrays": [
            {"name": k, "shape": list(v.shape), "data": [repr(float(x)) for x in np.ravel(v)]}
            for k, v in weights.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_weights(path):
    """Returns (weights, cfg, meta)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ConfigError(f"unsupported weights format {doc.get('format')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    weights = {}
    for a in doc["arrays"]:
        weights[a["name"]] = np.array([float(x) for x in a["data"]], dtype=np.float64).reshape(a["shape"])
    check_weights(weights, cfg)
    return weights, cfg, doc.get("meta", {})


# ------------------------------------------------------------------- forward

def crop_features(scene_raster, proposal: Box, out_size: int, sampling: int = 1) -> np.ndarray:
    """Bilinear samples of one raster on an out_size x out_size lattice inside ``proposal``."""
    r = np.asarray(scene_raster, dtype=np.float64)
    if r.ndim == 2:
        r = r[:, :, None]
    boxes = np.array([[[proposal.l, proposal.t, proposal.r, proposal.b]]])
    return kernels.crop(r[None], boxes, out_size, sampling).reshape(-1)


def context_boxes(boxes, margin):
    """Boxes grown by ``margin`` times their width/height on every side."""
    if margin == 0.0:
        return boxes
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    d = np.stack([-w, -h, w, h], axis=-1) * margin
    return boxes + d


def relation_features(boxes, o):
    """Detached context from the previous stage for each surviving component.

    Columns: objectness relative to the scene maximum, the largest IoU with a
    stronger component, and the IoU-weighted relative objectness of the others.
    """
    bsz, k = o.shape
    rel_o = o / np.maximum(o.max(axis=1, keepdims=True), 1e-300)
    out = np.zeros((bsz, k, RELATION_DIM))
    for b in range(bsz):
        ious = kernels.iou_matrix(boxes[b], boxes[b])
        np.fill_diagonal(ious, 0.0)
        stronger = rel_o[b][None, :] > rel_o[b][:, None]
        out[b, :, 0] = rel_o[b]
        out[b, :, 1] = np.max(np.where(stronger, ious, 0.0), axis=1)
        out[b, :, 2] = ious @ rel_o[b]
    return out


@dataclass
class StageTrace:
    idx: np.ndarray        # (B, Ks) original proposal index of each component
    base: np.ndarray       # (B, Ks, 4) boxes the deltas are added to
    rel: np.ndarray        # (B, Ks, RELATION_DIM) detached context
    x: np.ndarray          # (B, Ks, D) head input
    hidden: list           # tanh activations per hidden layer
    raw: np.ndarray        # (B, Ks, 9 + C)
    act: Activated


@dataclass
class Trace:
    stages: list = field(default_factory=list)

    def routing(self):
        """Survivor indices, stage proposals and relation context; reuse them to freeze the routing."""
        return [(st.idx, st.base, st.rel) for st in self.stages]


@dataclass
class StageState:
    proposals: list
    features: np.ndarray
    mixture: MixtureParams
    objectness: np.ndarray
    index: np.ndarray


def stack_rasters(scenes) -> np.ndarray:
    return np.stack([np.asarray(s.raster, dtype=np.float64) for s in scenes])


def forward_batch(weights: dict, cfg: ModelConfig, rasters, frozen=None) -> Trace:
    """Run every stage on a (B, H, W, Cin) raster stack.

    ``frozen`` (from ``Trace.routing``) pins survivor indices and stage
    proposals, so the output is a smooth function of the weights; gradient
    checks use it.
    """
    rasters = np.asarray(rasters, dtype=np.float64)
    if rasters.ndim != 4 or rasters.shape[3] != cfg.in_channels:
        raise ConfigError(f"raster stack shape {rasters.shape} incompatible with config")
    bsz = rasters.shape[0]
    k = cfg.num_proposals
    trace = Trace()
    idx = np.broadcast_to(np.arange(k), (bsz, k))
    base = np.broadcast_to(weights["proposals"], (bsz, k, 4))
    rel = np.zeros((bsz, k, cfg.relation_dim))
    for s in range(cfg.num_stages):
        if frozen is not None:
            idx, sample, rel = frozen[s]
            if s == 0:
                base = weights["proposals"][idx]
            else:
                base = sample
        else:
            sample = base
        ks = idx.shape[1]
        feats = kernels.crop(rasters, context_boxes(sample, cfg.crop_context), cfg.out_size,
                             cfg.crop_sampling).reshape(bsz, ks, -1)
        x = np.concatenate([feats, sample, rel, weights["embed"][idx]], axis=2)
        hidden = []
        h = x
        names = layer_names(cfg, s)
        for wn, bn in names[:-1]:
            h = np.tanh(h @ weights[wn] + weights[bn])
            hidden.append(h)
        wn, bn = names[-1]
        raw = h @ weights[wn] + weights[bn]
        act = activate(raw, base, cfg.num_classes, cfg.min_scale)
        trace.stages.append(StageTrace(idx, np.array(sample), rel, x, hidden, raw, act))
        if s + 1 < cfg.num_stages and frozen is None:
            keep = cfg.stage_sizes()[s + 1]
            order = np.argsort(-act.o, axis=1, kind="stable")[:, :keep]
            order = np.sort(order, axis=1)
            idx = np.take_along_axis(idx, order, axis=1)
            base = np.take_along_axis(act.mu, order[:, :, None], axis=1).copy()
            if cfg.relation:
                rel = relation_features(base, np.take_along_axis(act.o, order, axis=1))
            else:
                rel = np.zeros((bsz, keep, 0))
    return trace


def stage_state(trace: Trace, stage: int, scene: int, cfg: ModelConfig) -> StageState:
    st = trace.stages[stage]
    act = st.act
    pi = np.exp(act.log_pi[scene])
    pi = pi / pi.sum()
    p = np.exp(act.logp[scene])
    p = p / p.sum(axis=1, keepdims=True)
    comps = [
        ComponentParams(float(pi[q]), act.mu[scene, q], act.gamma[scene, q], p[q],
                        float(np.clip(act.o[scene, q], 1e-300, 1 - 1e-16)))
        for q in range(pi.shape[0])
    ]
    proposals = [Box.from_array(b, normalized=False) for b in st.base[scene]]
    return StageState(proposals, st.x[scene], MixtureParams(tuple(comps), cfg.num_classes),
                      act.o[scene].copy(), st.idx[scene].copy())


def forward(scene, weights: dict, cfg: ModelConfig) -> list:
    """Stage-by-stage mixture states for one scene."""
    check_weights(weights, cfg)
    trace = forward_batch(weights, cfg, stack_rasters([scene]))
    return [stage_state(trace, s, 0, cfg) for s in range(cfg.num_stages)]


# ------------------------------------------------------------------ backward

def backward(weights: dict, cfg: ModelConfig, trace: Trace, d_raws, d_bases=None) -> dict:
    """Weight gradients given d(loss)/d(raw) per stage.

    ``d_bases[s]`` is the gradient w.r.t. the stage's base boxes; only
    stage 0 bases are parameters (later ones are detached).
    """
    grads = {k: np.zeros_like(v) for k, v in weights.items()}
    for s, (st, d_raw) in enumerate(zip(trace.stages, d_raws)):
        if d_raw is None:
            continue
        names = layer_names(cfg, s)
        acts = [st.x, *st.hidden]
        g = d_raw
        for j in range(len(names) - 1, -1, -1):
            wn, bn = names[j]
            a = acts[j]
            grads[wn] += np.einsum("bki,bko->io", a, g)
            grads[bn] += g.sum(axis=(0, 1))
            g = g @ weights[wn].T
            if j > 0:
                g = g * (1.0 - acts[j] ** 2)
        d_emb = g[:, :, cfg.embed_offset:]
        np.add.at(grads["embed"], st.idx.reshape(-1), d_emb.reshape(-1, cfg.embed_dim))
        if s == 0 and d_bases is not None and d_bases[0] is not None:
            np.add.at(grads["proposals"], st.idx.reshape(-1), d_bases[0].reshape(-1, 4))
    return grads


def objectness_gauge(raw_o, counts, weight):
    """``weight`` times the batch mean of (sum_k o_k - N)^2, and its gradient w.r.t. o_bar.

    pi = o / sum(o) is unchanged when every o of a scene is scaled by the same
    factor, so the likelihood leaves that scale free. This term fixes it by
    asking the objectness scores of a scene to add up to its object count N.
    """
    bsz = raw_o.shape[0]
    o = 1.0 / (1.0 + np.exp(-raw_o))
    err = o.sum(axis=1) - counts
    loss = weight * float(np.sum(err * err)) / bsz
    grad = (2.0 * weight / bsz) * err[:, None] * o * (1.0 - o)
    return loss, grad


def drmm_objective(trace: Trace, gt_boxes, gt_cls, beta=DEFAULT_BETA, stop=StopGradConfig(),
                   need_grad=True, gauge=0.0):
    """Summed-over-stages NLL + beta*MCM (+ the objectness gauge when ``gauge`` > 0).

    Returns (total, stage_losses, d_raws, d_bases).
    """
    total = 0.0
    stages, d_raws, d_bases = [], [], []
    counts = (gt_cls >= 0).sum(axis=1)
    for st in trace.stages:
        a = st.act
        sl: StageLoss = stage_loss(gt_boxes, gt_cls, a.log_pi, a.mu, a.gamma, a.logp, beta, stop,
                                   need_grad=need_grad)
        total += sl.nll + beta * sl.mcm
        stages.append(sl)
        if gauge > 0.0:
            g_loss, g_obar = objectness_gauge(st.raw[:, :, -1], counts, gauge)
            total += g_loss
        if need_grad:
            d_raw, d_base = activate_backward(a, sl.g_mu, sl.g_gamma, sl.g_logp, sl.g_logpi)
            if gauge > 0.0:
                d_raw[:, :, -1] += g_obar
            d_raws.append(d_raw)
            d_bases.append(d_base)
    return total, stages, d_raws, d_bases


# ------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    beta: float = DEFAULT_BETA
    lr: float = 3e-3
    steps: int = 4000
    batch_size: int = 32
    optimizer: str = "adam"     # sgd | momentum | adam
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "cosine"    # constant | cosine
    stop: StopGradConfig = StopGradConfig()
    gauge: float = 0.1
    seed: int = 0
    log_every: int = 0


class Optimizer:
    def __init__(self, weights: dict, tcfg: TrainConfig):
        if tcfg.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {tcfg.optimizer!r}")
        if tcfg.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {tcfg.schedule!r}")
        self.cfg = tcfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}

    def rate(self) -> float:
        """Learning rate for the update about to be applied (``t`` already advanced)."""
        c = self.cfg
        if c.schedule == "constant" or c.steps <= 1:
            return c.lr
        return 0.5 * c.lr * (1.0 + math.cos(math.pi * (self.t - 1) / c.steps))

    def step(self, weights: dict, grads: dict):
        c = self.cfg
        self.t += 1
        lr = self.rate()
        for k in weights:
            g = grads[k]
            if c.optimizer == "sgd":
                weights[k] = weights[k] - lr * g
            elif c.optimizer == "momentum":
                self.m[k] = c.momentum * self.m[k] + g
                weights[k] = weights[k] - lr * self.m[k]
            else:
                b1, b2 = c.adam_betas
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mhat = self.m[k] / (1 - b1 ** self.t)
                vhat = self.v[k] / (1 - b2 ** self.t)
                weights[k] = weights[k] - lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def batches(n: int, batch_size: int, steps: int, seed: int):
    """Deterministic epoch-shuffled minibatch indices."""
    rng = np.random.default_rng(seed)
    perm = np.empty(0, dtype=np.int64)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > len(perm):
            perm = np.concatenate([perm[pos:], rng.permutation(n)])
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def _check_finite(value, grads, scene_ids, step):
    if not math.isfinite(value):
        raise NumericError(f"step {step}: non-finite loss on scenes {list(scene_ids)}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"step {step}: non-finite gradient for '{k}' on scenes {list(scene_ids)}")


def train_loop(dataset, cfg: ModelConfig, tcfg: TrainConfig, objective, weights=None):
    """Generic minibatch loop. ``objective(trace, batch_scenes, gt_boxes, gt_cls)``
    returns ``(total, stage_losses, d_raws, d_bases)``."""
    if not dataset:
        raise ConfigError("empty dataset")
    weights = init_weights(cfg) if weights is None else {k: v.copy() for k, v in weights.items()}
    opt = Optimizer(weights, tcfg)
    rasters = stack_rasters(dataset)
    history = []
    for step, bidx in enumerate(batches(len(dataset), min(tcfg.batch_size, len(dataset)), tcfg.steps, tcfg.seed)):
        batch = [dataset[i] for i in bidx]
        gt_boxes, gt_cls = pack_gts([s.gts for s in batch])
        trace = forward_batch(weights, cfg, rasters[bidx])
        total, stages, d_raws, d_bases = objective(trace, batch, gt_boxes, gt_cls)
        grads = backward(weights, cfg, trace, d_raws, d_bases)
        _check_finite(total, grads, [s.id for s in batch], step)
        opt.step(weights, grads)
        history.append(
            {
                "step": step,
                "total": total,
                "per_stage": [(sl.nll, sl.mcm, sl.ratio) for sl in stages],
            }
        )
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("step %d total %.4f", step, total)
    return weights, history


def train(dataset, cfg: ModelConfig, tcfg: TrainConfig = TrainConfig(), weights=None):
    """Train with NLL + beta*MCM summed over stages. Returns (weights, history)."""

    def objective(trace, batch, gt_boxes, gt_cls):
        return drmm_objective(trace, gt_boxes, gt_cls, tcfg.beta, tcfg.stop, gauge=tcfg.gauge)

    return train_loop(dataset, cfg, tcfg, objective, weights)


# --------------------------------------------------------------- grad check

def model_loss(weights, cfg, scenes, beta=DEFAULT_BETA, stop=StopGradConfig(), frozen=None, gauge=0.0):
    gt_boxes, gt_cls = pack_gts([s.gts for s in scenes])
    trace = forward_batch(weights, cfg, stack_rasters(scenes), frozen=frozen)
    total, _, _, _ = drmm_objective(trace, gt_boxes, gt_cls, beta, stop, need_grad=False, gauge=gauge)
    return total


def gradcheck(weights, cfg, scenes, n_weights=50, beta=DEFAULT_BETA, h=1e-5, seed=0, gauge=0.0):
    """Central differences vs backprop on a random subset of weight entries.

    Routing (survivors and detached stage proposals) is frozen at the
    unperturbed point and no MCM factor is stop-gradiented, so the check
    sees exactly the function the analytic path differentiates.
    Returns a list of (name, flat_index, analytic, numeric, rel_err).
    """
    from .losses import NO_STOP

    gt_boxes, gt_cls = pack_gts([s.gts for s in scenes])
    rasters = stack_rasters(scenes)
    trace = forward_batch(weights, cfg, rasters)
    _, _, d_raws, d_bases = drmm_objective(trace, gt_boxes, gt_cls, beta, NO_STOP, gauge=gauge)
    grads = backward(weights, cfg, trace, d_raws, d_bases)
    frozen = trace.routing()

    rng = np.random.default_rng(seed)
    names = sorted(weights)
    sizes = np.array([weights[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=min(n_weights, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, i = names[j], int(flat - offsets[j])
        w = {k: v.copy() for k, v in weights.items()}
        orig = w[name].flat[i]
        w[name].flat[i] = orig + h
        fp = model_loss(w, cfg, scenes, beta, NO_STOP, frozen, gauge)
        w[name].flat[i] = orig - h
        fm = model_loss(w, cfg, scenes, beta, NO_STOP, frozen, gauge)
        num = (fp - fm) / (2 * h)
        ana = float(grads[name].flat[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        out.append((name, i, ana, num, rel))
    return out

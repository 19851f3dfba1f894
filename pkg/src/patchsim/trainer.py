"""Calibration of the feature distance against human judgments.

A small scoring head maps a distance pair (d0, d1) to a probability that the
second patch is judged closer; training minimizes cross-entropy against the
empirical vote fraction h. Channel weights are projected onto the
non-negative orthant after every optimizer step. Three configurations:

    lin     frozen backbone, learn channel weights + scoring head
    tune    additionally update all backbone weights
    scratch like tune, but the backbone starts from random init

The optimizer is plain mini-batch gradient descent: 5 epochs at the initial
learning rate, then 5 epochs of linear decay to zero, batch size 50.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import metric
from .dataset import LabeledTriplet
from .errors import ConfigurationError, MissingLabelError, RangeError
from .imagecore import Rng

CLAMP = 1e-7  # probability clamp before the logs


# ---------------------------------------------------------------------------
# scoring head
# ---------------------------------------------------------------------------

class GNet:
    """Two 32-wide affine+relu layers, a 1-wide affine layer, and a sigmoid."""

    HIDDEN = 32

    def __init__(self, params: dict[str, np.ndarray]):
        self.p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        shapes = {"w1": (self.HIDDEN, 2), "b1": (self.HIDDEN,),
                  "w2": (self.HIDDEN, self.HIDDEN), "b2": (self.HIDDEN,),
                  "w3": (1, self.HIDDEN), "b3": (1,)}
        for k, s in shapes.items():
            if k not in self.p or self.p[k].shape != s:
                raise ConfigurationError(f"GNet parameter {k} must have shape {s}")

    @classmethod
    def init(cls, rng: Rng, scale: float = 0.1) -> "GNet":
        h = cls.HIDDEN
        return cls({
            "w1": rng.normal(0.0, scale, (h, 2)), "b1": np.zeros(h),
            "w2": rng.normal(0.0, scale, (h, h)), "b2": np.zeros(h),
            "w3": rng.normal(0.0, scale, (1, h)), "b3": np.zeros(1),
        })

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.p.values())

    def copy(self) -> "GNet":
        return GNet({k: v.copy() for k, v in self.p.items()})

    def forward_batch(self, d: np.ndarray):
        """d is (N, 2); returns (h_hat (N,), cache)."""
        z1 = d @ self.p["w1"].T + self.p["b1"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.p["w2"].T + self.p["b2"]
        a2 = np.maximum(z2, 0.0)
        z3 = a2 @ self.p["w3"].T + self.p["b3"]
        h_hat = 1.0 / (1.0 + np.exp(-z3[:, 0]))
        return h_hat, (d, z1, a1, z2, a2, h_hat)

    def backward_batch(self, cache, grad_h: np.ndarray):
        """grad_h is d(loss)/d(h_hat), (N,). Returns (param grads, d(loss)/dd (N, 2))."""
        d, z1, a1, z2, a2, h_hat = cache
        gz3 = (grad_h * h_hat * (1.0 - h_hat))[:, None]
        grads = {"w3": gz3.T @ a2, "b3": gz3.sum(axis=0)}
        ga2 = gz3 @ self.p["w3"]
        gz2 = ga2 * (z2 > 0)
        grads["w2"] = gz2.T @ a1
        grads["b2"] = gz2.sum(axis=0)
        ga1 = gz2 @ self.p["w2"]
        gz1 = ga1 * (z1 > 0)
        grads["w1"] = gz1.T @ d
        grads["b1"] = gz1.sum(axis=0)
        return grads, gz1 @ self.p["w1"]


def g_forward(d0: float, d1: float, g: GNet) -> float:
    """Score one distance pair; output lies strictly inside (0, 1)."""
    h_hat, _ = g.forward_batch(np.array([[d0, d1]], dtype=np.float64))
    return float(h_hat[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _bce(h_hat: np.ndarray, h: np.ndarray):
    """Clamped cross-entropy and its derivative w.r.t. h_hat (zero where clamped)."""
    hc = np.clip(h_hat, CLAMP, 1.0 - CLAMP)
    loss = -h * np.log(hc) - (1.0 - h) * np.log(1.0 - hc)
    inside = (h_hat > CLAMP) & (h_hat < 1.0 - CLAMP)
    grad = np.where(inside, -h / hc + (1.0 - h) / (1.0 - hc), 0.0)
    return loss, grad


def loss_2afc(d0: float, d1: float, h: float, g: GNet) -> float:
    """Cross-entropy between the head's score and the vote fraction h."""
    if not 0.0 <= h <= 1.0:
        raise ConfigurationError(f"h must be in [0, 1], got {h}")
    h_hat, _ = g.forward_batch(np.array([[d0, d1]], dtype=np.float64))
    loss, _ = _bce(h_hat, np.array([h]))
    return float(loss[0])


def loss_margin(d0: float, d1: float, h: int, margin: float) -> float:
    """Hinge on the distance gap with a fixed margin; hard labels only.

    h = 0 means the first patch was judged closer, so d1 should exceed d0 by
    at least the margin (and symmetrically for h = 1).
    """
    if h not in (0, 1):
        raise ConfigurationError("margin loss takes hard labels h in {0, 1}")
    sign = 1.0 if h == 0 else -1.0
    return float(max(0.0, margin - sign * (d1 - d0)))


def lr_at(epoch: float, cfg: "TrainConfig") -> float:
    """Constant for the first phase, then linear decay to zero."""
    total = cfg.epochs_const + cfg.epochs_decay
    if epoch < 0 or epoch > total:
        raise RangeError(f"epoch {epoch} outside [0, {total}]")
    if epoch <= cfg.epochs_const:
        return cfg.lr0
    return cfg.lr0 * (total - epoch) / cfg.epochs_decay


def project_nonneg(w: metric.ChannelWeights) -> metric.ChannelWeights:
    """Componentwise max(w, 0); applied after every optimizer step."""
    return metric.ChannelWeights([np.maximum(v, 0.0) for v in w.layers])


# ---------------------------------------------------------------------------
# config / state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    mode: str = "lin"  # lin | tune | scratch
    epochs_const: int = 5
    epochs_decay: int = 5
    lr0: float = 1e-4
    batch: int = 50
    loss: str = "bce"  # bce | margin_ranking
    margin: float = 0.5
    optimizer: str = "sgd"  # sgd (default) | adam (config extension)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("lin", "tune", "scratch"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.loss not in ("bce", "margin_ranking"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr0 < 0:
            raise ConfigurationError("lr0 must be >= 0")
        if self.batch < 1:
            raise ConfigurationError("batch size must be >= 1")


class _Sgd:
    """Plain gradient descent, the default per the published schedule."""

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        return {k: params[k] - lr * g for k, g in grads.items()}


class _Adam:
    """Adam with standard constants; useful when the channel-weight gradients
    live on a very different scale than the scoring head's (desk-scale runs).
    """

    def __init__(self, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = params[k] - lr * mh / (np.sqrt(vh) + self.eps)
        return out


def _make_optimizer(cfg: TrainConfig):
    return _Adam() if cfg.optimizer == "adam" else _Sgd()


@dataclass
class TrainState:
    spec: bb.BackboneSpec
    weights: bb.WeightStore
    w: metric.ChannelWeights
    gnet: GNet
    step: int = 0
    epoch: float = 0.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stack_features(spec, weights, x):
    return metric.normalize_channels(bb.forward(spec, weights, x))


def precompute_pair_features(spec, weights, records: list[LabeledTriplet]):
    """Frozen-backbone fast path: per record, the per-channel spatial means of
    squared normalized-feature differences, flattened across layers. The
    weighted distance is then a single dot product.
    """
    rows0, rows1 = [], []
    for rec in records:
        x, x0, x1 = rec.load()
        s = _stack_features(spec, weights, x)
        s0 = _stack_features(spec, weights, x0)
        s1 = _stack_features(spec, weights, x1)
        rows0.append(np.concatenate(metric.channel_mean_sq_diff(s, s0)))
        rows1.append(np.concatenate(metric.channel_mean_sq_diff(s, s1)))
    n_feat = rows0[0].size if rows0 else 0
    return (np.array(rows0).reshape(len(records), n_feat),
            np.array(rows1).reshape(len(records), n_feat))


def _two_afc_from_distances(d0, d1, p0):
    credit = np.where(d0 < d1, p0, np.where(d0 > d1, 1.0 - p0, 0.5))
    return float(np.mean(credit, dtype=np.float64))


def _batch_loss_and_grads(cfg, gnet, d0, d1, h):
    """Mean loss over a batch plus d(loss)/d(d0), d(loss)/d(d1) and head grads."""
    n = d0.size
    if cfg.loss == "bce":
        dmat = np.stack([d0, d1], axis=1)
        h_hat, cache = gnet.forward_batch(dmat)
        losses, grad_h = _bce(h_hat, h)
        g_params, g_d = gnet.backward_batch(cache, grad_h / n)
        return float(np.mean(losses, dtype=np.float64)), g_params, g_d[:, 0], g_d[:, 1]
    # margin ranking: head is unused; fractional labels are skipped upstream
    sign = np.where(h == 0.0, 1.0, -1.0)
    raw = cfg.margin - sign * (d1 - d0)
    active = raw > 0
    losses = np.where(active, raw, 0.0)
    gd1 = np.where(active, -sign, 0.0) / n
    return float(np.mean(losses, dtype=np.float64)), {}, -gd1, gd1


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict] = field(default_factory=list)
    skipped_fractional: int = 0


def train(train_records: list[LabeledTriplet], spec: bb.BackboneSpec,
          weights: bb.WeightStore | None, cfg: TrainConfig,
          val_records: list[LabeledTriplet] | None = None,
          step_hook=None) -> TrainResult:
    """Run the full two-phase schedule over labeled triplets.

    lin keeps the backbone bytes untouched; tune updates them; scratch first
    draws fresh random backbone weights from the config seed. Deterministic
    under (records, cfg): the shuffle order and all inits derive from cfg.seed.
    """
    if not train_records:
        raise MissingLabelError("training needs a labeled train split")
    rng = Rng(cfg.seed, stream=0x7124)
    if cfg.mode == "scratch":
        weights = bb.init_scratch(spec, rng.derive(1))
    elif weights is None:
        raise ConfigurationError("lin/tune modes need initial backbone weights")
    else:
        weights = weights.copy()

    records = train_records
    skipped = 0
    if cfg.loss == "margin_ranking":
        usable = [r for r in records if r.h in (0.0, 1.0)]
        skipped = len(records) - len(usable)
        records = usable
        if not records:
            raise MissingLabelError("margin loss found no hard-labeled records")

    state = TrainState(
        spec=spec, weights=weights,
        w=metric.ChannelWeights.ones(spec.tap_channels()),
        gnet=GNet.init(rng.derive(2)),
    )

    frozen_backbone = cfg.mode == "lin"
    if frozen_backbone:
        m0, m1 = precompute_pair_features(spec, weights, records)
        if val_records:
            v0, v1 = precompute_pair_features(spec, weights, val_records)

    h_arr = np.array([r.h for r in records])
    n = len(records)
    total_epochs = cfg.epochs_const + cfg.epochs_decay
    steps_per_epoch = max(1, (n + cfg.batch - 1) // cfg.batch)
    optimizer = _make_optimizer(cfg)
    log: list[dict] = []

    for epoch in range(total_epochs):
        order = rng.derive(100 + epoch).permutation(n)
        epoch_losses = []
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch:(bi + 1) * cfg.batch]
            if idx.size == 0:
                continue
            lr = lr_at(epoch + bi / steps_per_epoch, cfg)
            wflat = state.w.as_flat()
            backbone_grads = {}
            if frozen_backbone:
                d0 = m0[idx] @ wflat
                d1 = m1[idx] @ wflat
                loss, g_params, gd0, gd1 = _batch_loss_and_grads(
                    cfg, state.gnet, d0, d1, h_arr[idx])
                gw = m0[idx].T @ gd0 + m1[idx].T @ gd1
            else:
                loss, g_params, gw, backbone_grads = _full_backprop_batch(
                    cfg, state, [records[i] for i in idx], h_arr[idx])
            params = {"w": wflat}
            grads = {"w": gw}
            for k, gv in g_params.items():
                params[f"g.{k}"] = state.gnet.p[k]
                grads[f"g.{k}"] = gv
            for name, gv in backbone_grads.items():
                params[f"f.{name}"] = state.weights[name]
                grads[f"f.{name}"] = gv
            updated = optimizer.step(params, grads, lr)
            for k in g_params:
                state.gnet.p[k] = updated[f"g.{k}"]
            for name in backbone_grads:
                state.weights[name] = updated[f"f.{name}"]
            state.w = project_nonneg(state.w.replace_flat(updated["w"]))
            assert state.w.min() >= 0.0, "non-negativity projection violated"
            state.step += 1
            state.epoch = epoch + (bi + 1) / steps_per_epoch
            epoch_losses.append(loss)
            if step_hook is not None:
                step_hook(state)
        entry = {"epoch": epoch + 1, "lr": lr_at(float(epoch), cfg),
                 "train_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0}
        if val_records:
            if frozen_backbone:
                wflat = state.w.as_flat()
                entry["val_2afc"] = _two_afc_from_distances(
                    v0 @ wflat, v1 @ wflat, np.array([r.p0 for r in val_records]))
            else:
                entry["val_2afc"] = evaluate_2afc(val_records, state)
        log.append(entry)
    return TrainResult(state=state, log=log, skipped_fractional=skipped)


def _full_backprop_batch(cfg, state: TrainState, batch: list[LabeledTriplet],
                         h: np.ndarray):
    """tune/scratch path: chain loss -> head -> distance -> normalization ->
    backbone for every patch in the batch; returns summed backbone gradients
    along with the head and channel-weight gradients.
    """
    spec, weights = state.spec, state.weights
    n = len(batch)
    d0 = np.zeros(n)
    d1 = np.zeros(n)
    raws, normed, tensors = [], [], []
    for i, rec in enumerate(batch):
        x, x0, x1 = rec.load()
        raw = (bb.forward(spec, weights, x), bb.forward(spec, weights, x0),
               bb.forward(spec, weights, x1))
        nrm = tuple(metric.normalize_channels(s) for s in raw)
        d0[i] = metric.lpips_distance(nrm[0], nrm[1], state.w).total
        d1[i] = metric.lpips_distance(nrm[0], nrm[2], state.w).total
        raws.append(raw)
        normed.append(nrm)
        tensors.append((x, x0, x1))
    loss, g_params, gd0, gd1 = _batch_loss_and_grads(cfg, state.gnet, d0, d1, h)

    gw_total = np.zeros(state.w.n_params)
    acc = {name: np.zeros_like(arr) for name, arr in weights.items()}
    for i in range(n):
        raw, (sx, s0, s1) = raws[i], normed[i]
        gw0, gs_x0, gs_p0 = metric.lpips_backward(sx, s0, state.w, upstream=gd0[i])
        gw1, gs_x1, gs_p1 = metric.lpips_backward(sx, s1, state.w, upstream=gd1[i])
        gw_total += np.concatenate(gw0) + np.concatenate(gw1)
        up_x = metric.normalize_channels_backward(
            raw[0], [a + b for a, b in zip(gs_x0, gs_x1)])
        up_0 = metric.normalize_channels_backward(raw[1], gs_p0)
        up_1 = metric.normalize_channels_backward(raw[2], gs_p1)
        x, x0, x1 = tensors[i]
        for inp, up in ((x, up_x), (x0, up_0), (x1, up_1)):
            g_store, _ = bb.backward(spec, weights, inp, up)
            for name, g in g_store.items():
                acc[name] += g
    return loss, g_params, gw_total, acc


def evaluate_2afc(records: list[LabeledTriplet], state: TrainState) -> float:
    """Agreement score of the calibrated distance on labeled triplets."""
    d0 = np.zeros(len(records))
    d1 = np.zeros(len(records))
    for i, rec in enumerate(records):
        x, x0, x1 = rec.load()
        sx = _stack_features(state.spec, state.weights, x)
        s0 = _stack_features(state.spec, state.weights, x0)
        s1 = _stack_features(state.spec, state.weights, x1)
        d0[i] = metric.lpips_distance(sx, s0, state.w).total
        d1[i] = metric.lpips_distance(sx, s1, state.w).total
    return _two_afc_from_distances(d0, d1, np.array([r.p0 for r in records]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(out_dir, state: TrainState, log: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "backbone.json").write_text(state.spec.to_json(), "utf-8")
    bb.save_weights(state.weights, out / "backbone.lpw")
    metric.save_calibration(state.w, out / "calib.lpw",
                            extra={f"g.{k}": v for k, v in state.gnet.p.items()})
    (out / "train_log.json").write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n", "utf-8")


def load_checkpoint(ckpt_dir) -> TrainState:
    ckpt = Path(ckpt_dir)
    spec = bb.BackboneSpec.from_json((ckpt / "backbone.json").read_text("utf-8"))
    weights = bb.load_weights(ckpt / "backbone.lpw")
    w, extra = metric.load_calibration(ckpt / "calib.lpw")
    gnet = GNet({k[2:]: v for k, v in extra.items() if k.startswith("g.")})
    return TrainState(spec=spec, weights=weights, w=w, gnet=gnet)

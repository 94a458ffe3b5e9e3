"""Training strategies and the per-batch update loop.

Six strategies share one loop skeleton:

  simclr_base - contrastive only; each transform is applied with
                probability 0.5 at uniform strength, otherwise neutral
  random      - contrastive only; all seven strengths uniform every batch
  random_sup  - random strengths plus supervised terms on the labeled subset
  selfsup_m   - the transform network picks strengths, trained purely
                adversarially against the contrastive loss
  m_sup       - the transform network picks strengths and is also penalized
                when transformed images become unclassifiable
  supervised  - encoder and classifier trained on cross-entropy over the
                labeled subset only, with coin-gated augmentation

For the two transform-network strategies each batch runs two phases.  First
`m_step` updates only the transform network: strengths are predicted,
images transformed, and the objective is differentiated with respect to the
transform-network weights alone, with the untransformed embeddings held
constant.  Then `encoder_step` regenerates the transformed views from the
updated network (treated as constants) and updates encoder, projection
head, and classifier.  The backward pass's scoping guarantees each phase
touches only its own parameters.

Everything is seeded: weight init, subset selection, batch order, strength
draws, and noise fields each use their own stream derived from the run
seed, so reruns are bitwise identical.  The per-batch `seconds` column in
metrics.csv is written as 0 to keep the file reproducible; wall-clock
timings go to run.log instead.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .models import (
    Encoder,
    LinearClassifier,
    ParameterStore,
    ProjectionHead,
    TransformNet,
    init_weights,
    save_checkpoint,
)
from .objectives import ObjectiveConfig, bce, contrastive_loss, encoder_objective, m_objective
from .tensor import Rng, Tensor, concat, no_grad
from .transforms import (
    DEFAULT_ORDER,
    NEUTRAL_LAMBDAS,
    PARAM_COLUMNS,
    CompositionOrder,
    NoiseRealization,
    TransformParams,
    compose,
)

__all__ = [
    "STRATEGIES",
    "STRATEGY_DEFAULTS",
    "TrainConfig",
    "TrainState",
    "Adam",
    "sample_random_params",
    "sample_gated_params",
    "select_supervised_subset",
    "m_step",
    "encoder_step",
    "supervised_step",
    "train",
]

STRATEGIES = ("simclr_base", "random", "random_sup", "selfsup_m", "m_sup", "supervised")

# Per-strategy loss weights (alpha0..alpha4) and transform-network learning
# rate where one is trained.
STRATEGY_DEFAULTS = {
    "simclr_base": {"alphas": (0.0, 0.0, 1.0, 0.0, 0.0), "lr_m": 1e-4},
    "random": {"alphas": (0.0, 0.0, 1.0, 0.0, 0.0), "lr_m": 1e-4},
    "random_sup": {"alphas": (0.0, 0.0, 1.0, 10.0, 10.0), "lr_m": 1e-4},
    "selfsup_m": {"alphas": (1.0, 0.0, 1.0, 0.0, 0.0), "lr_m": 1e-4},
    "m_sup": {"alphas": (1.0, 10.0, 1.0, 1.0, 1.0), "lr_m": 1e-3},
    "supervised": {"alphas": (0.0, 0.0, 0.0, 0.0, 0.0), "lr_m": 1e-4},
}

_USES_TNET = ("selfsup_m", "m_sup")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str
    alpha0: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 1.0
    alpha3: float = 0.0
    alpha4: float = 0.0
    lr_f: float = 1e-4
    lr_m: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    order: CompositionOrder = DEFAULT_ORDER
    supervision_fraction: float = 0.10
    label_fraction: float = 1.0
    tau: float = 1.0
    use_cosine: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 10
    encoder_widths: tuple = (16, 32, 64, 128)
    tnet_widths: tuple = (8, 16)
    head_hidden: int = 128
    head_out: int = 64

    @classmethod
    def for_strategy(cls, strategy: str, **overrides) -> "TrainConfig":
        """Build a config with the strategy's default weights; keyword
        overrides win."""
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
        d = STRATEGY_DEFAULTS[strategy]
        base = dict(zip(("alpha0", "alpha1", "alpha2", "alpha3", "alpha4"), d["alphas"]))
        base["lr_m"] = d["lr_m"]
        base.update(overrides)
        cfg = cls(strategy=strategy, **base)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.supervision_fraction <= 1.0):
            raise ValueError(f"supervision_fraction must be in (0, 1], got {self.supervision_fraction}")
        if not (0.0 < self.label_fraction <= 1.0):
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr_f <= 0 or self.lr_m <= 0:
            raise ValueError("learning rates must be positive")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        a = (self.alpha0, self.alpha1, self.alpha2, self.alpha3, self.alpha4)
        if any(x < 0 for x in a):
            raise ValueError(f"loss weights must be >= 0, got {a}")
        s = self.strategy
        if s in ("simclr_base", "random"):
            if a[2] <= 0 or a[0] or a[1] or a[3] or a[4]:
                raise ValueError(f"{s} is contrastive-only: needs alpha2 > 0 and all other weights 0, got {a}")
        elif s == "random_sup":
            if a[0] or a[1] or a[2] <= 0 or (a[3] + a[4]) <= 0:
                raise ValueError(f"random_sup needs alpha2 > 0, supervision weight > 0, and no "
                                 f"transform-network weights, got {a}")
        elif s == "selfsup_m":
            if a[0] <= 0 or a[2] <= 0 or a[1] or a[3] or a[4]:
                raise ValueError(f"selfsup_m needs alpha0 > 0 and alpha2 > 0 with no supervised "
                                 f"terms, got {a}")
        elif s == "m_sup":
            if a[0] <= 0 or a[2] <= 0 or (a[1] + a[3] + a[4]) <= 0:
                raise ValueError(f"m_sup needs alpha0 > 0, alpha2 > 0, and at least one "
                                 f"supervised weight > 0, got {a}")
        elif s == "supervised":
            if any(a):
                raise ValueError(f"supervised ignores the contrastive weights; set all to 0, got {a}")

    @property
    def uses_transform_net(self) -> bool:
        return self.strategy in _USES_TNET

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.alpha0, self.alpha1, self.alpha2, self.alpha3,
                               self.alpha4, tau=self.tau, use_cosine=self.use_cosine)

    def snapshot(self) -> str:
        """Flat key=value form, one line per field, written before training."""
        lines = []
        for key in ("strategy", "alpha0", "alpha1", "alpha2", "alpha3", "alpha4",
                    "lr_f", "lr_m", "batch_size", "epochs", "seed", "order",
                    "supervision_fraction", "label_fraction", "tau", "use_cosine",
                    "dtype", "checkpoint_every", "encoder_widths", "tnet_widths",
                    "head_hidden", "head_out"):
            v = getattr(self, key)
            if key == "order":
                v = ",".join(v.names)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


class Adam(object):
    """Adam with bias correction over one parameter store.  A parameter with
    no gradient is treated as having a zero gradient, so from a zero state
    it stays put while its moments decay."""

    def __init__(self, store: ParameterStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * np.square(g)
            mhat = self.m[name] / b1t
            vhat = self.v[name] / b2t
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_entries(self, prefix: str) -> dict:
        out = {}
        for name in self.store.names():
            out[f"{prefix}.{name}.m"] = self.m[name]
            out[f"{prefix}.{name}.v"] = self.v[name]
        out[f"optimizer.step.{prefix}"] = np.array([float(self.t)])
        return out

    def load_state_entries(self, entries: dict, prefix: str) -> None:
        for name, t in self.store.items():
            for slot, table in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}.{slot}"
                if key not in entries:
                    raise KeyError(f"optimizer state missing {key!r}")
                arr = entries[key]
                if arr.shape != t.data.shape:
                    raise ValueError(f"optimizer entry {key!r} has shape {arr.shape}, "
                                     f"expected {t.data.shape}")
                table[name] = arr.astype(t.data.dtype, copy=True)
        self.t = int(entries[f"optimizer.step.{prefix}"][0])


@dataclass
class TrainState:
    """Networks and optimizers for one run."""

    cfg: TrainConfig
    encoder: Encoder
    head: ProjectionHead
    classifier: LinearClassifier
    tnet: TransformNet
    opt_encoder: Adam
    opt_head: Adam
    opt_classifier: Adam
    opt_tnet: Adam

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        dt = cfg.np_dtype
        encoder = Encoder(widths=cfg.encoder_widths, dtype=dt)
        head = ProjectionHead(in_dim=encoder.out_dim, hidden=cfg.head_hidden,
                              out_dim=cfg.head_out, dtype=dt)
        classifier = LinearClassifier(in_dim=encoder.out_dim, dtype=dt)
        tnet = TransformNet(widths=cfg.tnet_widths, n_out=len(PARAM_COLUMNS), dtype=dt)
        init_weights(encoder.store, Rng(cfg.seed, stream=1))
        init_weights(head.store, Rng(cfg.seed, stream=2))
        init_weights(classifier.store, Rng(cfg.seed, stream=3))
        init_weights(tnet.store, Rng(cfg.seed, stream=4))
        return cls(
            cfg, encoder, head, classifier, tnet,
            Adam(encoder.store, cfg.lr_f), Adam(head.store, cfg.lr_f),
            Adam(classifier.store, cfg.lr_f), Adam(tnet.store, cfg.lr_m))

    def stores(self) -> dict:
        return {"encoder": self.encoder.store, "head": self.head.store,
                "classifier": self.classifier.store, "tnet": self.tnet.store}

    def optimizer_entries(self) -> dict:
        out = {}
        for prefix, opt in (("encoder", self.opt_encoder), ("head", self.opt_head),
                            ("classifier", self.opt_classifier), ("tnet", self.opt_tnet)):
            out.update(opt.state_entries(prefix))
        return out


# -- strength sampling --------------------------------------------------------

_NEUTRAL_ROW = np.array([NEUTRAL_LAMBDAS[c] for c in PARAM_COLUMNS])


def sample_random_params(rng: Rng, batch: int, dtype) -> TransformParams:
    """All seven strengths uniform on [0, 1]."""
    m = rng.uniform(0.0, 1.0, (batch, len(PARAM_COLUMNS)), dtype=dtype)
    return TransformParams.from_matrix(m)


def sample_gated_params(rng: Rng, batch: int, dtype) -> TransformParams:
    """Coin-gated strengths: each transform is applied with probability 0.5
    at uniform strength; excluded transforms take their neutral value (the
    crop window centers at 0.5)."""
    coins = rng.uniform(0.0, 1.0, (batch, len(PARAM_COLUMNS))).data < 0.5
    strengths = rng.uniform(0.0, 1.0, (batch, len(PARAM_COLUMNS))).data
    vals = np.where(coins, strengths, _NEUTRAL_ROW[None, :]).astype(dtype)
    return TransformParams.from_matrix(Tensor(vals))


def select_supervised_subset(labels: np.ndarray, fraction: float, rng: Rng,
                             groups: np.ndarray | None = None) -> np.ndarray:
    """Pick a label-stratified subset; returns sorted image indices.

    The total is round(fraction * n_units) exactly and each class count is
    within one of its proportional share.  Units are groups when a group id
    array is given (all images of a unit share a label and are selected
    together); with the default one-image-per-group this is plain stratified
    image selection.
    """
    labels = np.asarray(labels)
    n_img = labels.shape[0]
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if groups is None:
        groups = np.arange(n_img)
    groups = np.asarray(groups)
    if groups.shape != labels.shape:
        raise ValueError(f"groups shape {groups.shape} does not match labels {labels.shape}")

    uniq, first = np.unique(groups, return_index=True)
    unit_labels = labels[first]
    for gid, lbl in zip(uniq, unit_labels):
        members = labels[groups == gid]
        if not np.all(members == lbl):
            raise ValueError(f"group {gid} mixes labels")

    n_units = uniq.shape[0]
    n_take = max(1, round(fraction * n_units))
    pos = uniq[unit_labels == 1]
    neg = uniq[unit_labels == 0]
    n_pos = min(len(pos), round(fraction * len(pos)))
    n_neg = min(len(neg), n_take - n_pos)
    n_pos = min(len(pos), n_take - n_neg)

    chosen = np.concatenate([
        pos[rng.permutation(len(pos))[:n_pos]],
        neg[rng.permutation(len(neg))[:n_neg]],
    ])
    picked = np.isin(groups, chosen)
    return np.sort(np.nonzero(picked)[0])


# -- per-batch updates --------------------------------------------------------


def _labeled_views(feats, labeled_rows: np.ndarray, labels: np.ndarray, classifier, dtype):
    if labeled_rows.size == 0:
        return None, None
    preds = classifier.forward(feats.gather_rows(labeled_rows))
    return preds, Tensor(labels[labeled_rows].astype(dtype))


def m_step(state: TrainState, x: np.ndarray, labels: np.ndarray,
           labeled_rows: np.ndarray, noise: NoiseRealization) -> tuple[float, float]:
    """One transform-network update.

    Predicts strengths, transforms the batch, and minimizes the transform
    objective with respect to the transform-network weights only; the
    untransformed embeddings are computed without a graph and entered as
    constants, and the selective backward pass leaves every encoder, head,
    and classifier gradient untouched.
    """
    cfg = state.cfg
    obj = cfg.objective_config()
    if labeled_rows.size == 0 and obj.alpha1 > 0:
        obj = replace(obj, alpha1=0.0)  # batch carries no labels
    X = Tensor(x)
    strengths = state.tnet.forward(X)
    params = TransformParams.from_matrix(strengths)
    xm = compose(X, params, noise, cfg.order)
    feats_m = state.encoder.forward(xm)
    zm = state.head.forward(feats_m)
    with no_grad():
        z_const = state.head.forward(state.encoder.forward(X)).data
    z = Tensor(z_const)
    preds_m = y = None
    if obj.alpha1 > 0:
        preds_m, y = _labeled_views(feats_m, labeled_rows, labels, state.classifier, x.dtype)
    loss = m_objective(zm, z, preds_m, y, obj)

    state.tnet.store.zero_grad()
    loss.backward(wrt=state.tnet.store.tensors())
    state.opt_tnet.step()

    with no_grad():
        con = contrastive_loss(Tensor(zm.data), z, obj).item()
        sup = bce(Tensor(preds_m.data), y).item() if preds_m is not None else 0.0
    return con, sup


def encoder_step(state: TrainState, x: np.ndarray, labels: np.ndarray,
                 labeled_rows: np.ndarray, params: TransformParams,
                 noise: NoiseRealization) -> tuple[float, float]:
    """One update of encoder, projection head, and classifier for fixed
    transform strengths (sampled, or predicted under no_grad)."""
    cfg = state.cfg
    obj = cfg.objective_config()
    if labeled_rows.size == 0 and (obj.alpha3 > 0 or obj.alpha4 > 0):
        obj = replace(obj, alpha3=0.0, alpha4=0.0)
    B = x.shape[0]
    X = Tensor(x)
    xm = compose(X, params, noise, cfg.order)
    both = concat([xm, X], axis=0)
    feats_all = state.encoder.forward(both)
    z_all = state.head.forward(feats_all)
    idx_m = np.arange(B)
    idx_o = np.arange(B, 2 * B)
    zm = z_all.gather_rows(idx_m)
    z = z_all.gather_rows(idx_o)
    preds_m = preds = y = None
    if labeled_rows.size:
        feats_m = feats_all.gather_rows(idx_m)
        feats_o = feats_all.gather_rows(idx_o)
        if obj.alpha3 > 0:
            preds_m, y = _labeled_views(feats_m, labeled_rows, labels, state.classifier, x.dtype)
        if obj.alpha4 > 0:
            preds, y = _labeled_views(feats_o, labeled_rows, labels, state.classifier, x.dtype)
    loss = encoder_objective(zm, z, preds_m, preds, y, obj)

    wrt = (state.encoder.store.tensors() + state.head.store.tensors()
           + state.classifier.store.tensors())
    for store in (state.encoder.store, state.head.store, state.classifier.store):
        store.zero_grad()
    loss.backward(wrt=wrt)
    state.opt_encoder.step()
    state.opt_head.step()
    state.opt_classifier.step()

    with no_grad():
        con = contrastive_loss(Tensor(zm.data), Tensor(z.data), obj).item()
        sup = 0.0
        terms = 0
        for p in (preds_m, preds):
            if p is not None:
                sup += bce(Tensor(p.data), y).item()
                terms += 1
        sup = sup / terms if terms else 0.0
    return con, sup


def supervised_step(state: TrainState, x: np.ndarray, labels: np.ndarray,
                    params: TransformParams, noise: NoiseRealization) -> tuple[float, float]:
    """Cross-entropy update of encoder and classifier on a labeled batch."""
    cfg = state.cfg
    xm = compose(Tensor(x), params, noise, cfg.order)
    feats = state.encoder.forward(xm)
    preds = state.classifier.forward(feats)
    y = Tensor(labels.astype(x.dtype))
    loss = bce(preds, y)

    wrt = state.encoder.store.tensors() + state.classifier.store.tensors()
    state.encoder.store.zero_grad()
    state.classifier.store.zero_grad()
    loss.backward(wrt=wrt)
    state.opt_encoder.step()
    state.opt_classifier.step()
    return 0.0, loss.item()


# -- the loop -----------------------------------------------------------------


def _batches(indices: np.ndarray, batch_size: int):
    """Successive slices of a permutation; a trailing remainder is kept when
    it still holds two samples (the contrastive loss minimum)."""
    for lo in range(0, indices.shape[0], batch_size):
        chunk = indices[lo:lo + batch_size]
        if chunk.shape[0] >= 2:
            yield chunk


@dataclass
class TrainResult:
    out_dir: str
    checkpoints: list
    metrics_path: str
    n_batches: int


def train(cfg: TrainConfig, images: np.ndarray, labels: np.ndarray, out_dir,
          groups: np.ndarray | None = None, log=None) -> TrainResult:
    """Run one training configuration end to end.

    Writes into out_dir: config.txt (before training), metrics.csv (one row
    per batch), run.log (wall-clock timings, excluded from metrics for
    reproducibility), and ckpt_ep*.augd every checkpoint_every epochs plus
    the final epoch.
    """
    cfg.validate()
    dt = cfg.np_dtype
    x_all = np.ascontiguousarray(images, dtype=dt)
    y_all = np.asarray(labels).astype(np.float64)
    n = x_all.shape[0]

    state = TrainState.create(cfg)

    sup_fraction = cfg.label_fraction if cfg.strategy == "supervised" else cfg.supervision_fraction
    labeled_idx = select_supervised_subset(y_all, sup_fraction, Rng(cfg.seed, stream=5), groups)
    labeled_mask = np.zeros(n, dtype=bool)
    labeled_mask[labeled_idx] = True

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(cfg.snapshot())
    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics = open(metrics_path, "w")
    metrics.write("epoch,batch,strategy,loss_con,loss_sup,seconds\n")
    run_log = open(os.path.join(out_dir, "run.log"), "w")

    checkpoints = []
    n_batches = 0
    t_start = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t_epoch = time.perf_counter()
            rng_e = Rng(cfg.seed, stream=1000 + epoch)
            pool = labeled_idx if cfg.strategy == "supervised" else np.arange(n)
            perm = pool[rng_e.permutation(pool.shape[0])]
            m_seconds = 0.0
            for b_i, idx in enumerate(_batches(perm, cfg.batch_size)):
                x = x_all[idx]
                y = y_all[idx]
                labeled_rows = np.nonzero(labeled_mask[idx])[0]
                shape = x.shape

                if cfg.strategy == "supervised":
                    params = sample_gated_params(rng_e, shape[0], dt)
                    noise = NoiseRealization.draw(rng_e, shape, dt)
                    con, sup = supervised_step(state, x, y, params, noise)
                elif cfg.uses_transform_net:
                    t_m = time.perf_counter()
                    noise_m = NoiseRealization.draw(rng_e, shape, dt)
                    con_m, sup_m = m_step(state, x, y, labeled_rows, noise_m)
                    m_seconds += time.perf_counter() - t_m
                    with no_grad():
                        strengths = state.tnet.forward(Tensor(x))
                    params = TransformParams.from_matrix(Tensor(strengths.data))
                    noise = NoiseRealization.draw(rng_e, shape, dt)
                    con, sup = encoder_step(state, x, y, labeled_rows, params, noise)
                else:
                    if cfg.strategy == "simclr_base":
                        params = sample_gated_params(rng_e, shape[0], dt)
                    else:
                        params = sample_random_params(rng_e, shape[0], dt)
                    noise = NoiseRealization.draw(rng_e, shape, dt)
                    con, sup = encoder_step(state, x, y, labeled_rows, params, noise)

                # The seconds column is fixed at zero so reruns produce
                # byte-identical metrics; timings live in run.log.
                metrics.write(f"{epoch},{b_i},{cfg.strategy},{con:.9g},{sup:.9g},0\n")
                n_batches += 1

            dt_epoch = time.perf_counter() - t_epoch
            frac = m_seconds / dt_epoch if dt_epoch > 0 else 0.0
            run_log.write(f"epoch {epoch}: {dt_epoch:.3f}s"
                          f" (transform-network share {100.0 * frac:.1f}%)\n")
            run_log.flush()
            if log is not None:
                log(f"epoch {epoch}/{cfg.epochs}: {dt_epoch:.3f}s")

            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                ck = os.path.join(out_dir, f"ckpt_ep{epoch:04d}.augd")
                if not checkpoints or checkpoints[-1] != ck:
                    save_checkpoint(ck, state.stores(), state.optimizer_entries())
                    checkpoints.append(ck)
    finally:
        metrics.close()
        run_log.close()

    with open(os.path.join(out_dir, "run.log"), "a") as f:
        f.write(f"total: {time.perf_counter() - t_start:.3f}s\n")
    return TrainResult(str(out_dir), checkpoints, metrics_path, n_batches)

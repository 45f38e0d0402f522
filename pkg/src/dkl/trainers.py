"""Desk-scale training loops hosting the divergence losses.

Three entry points: a hard-label baseline, teacher distillation against a
fixed logits cache, and TRADES-style adversarial training where a PGD
inner loop crafts perturbations and the chosen divergence couples the
natural and adversarial branches.

Determinism: every loop draws all randomness from named PCG64 substreams
of the single config seed (0 init, 1 batch shuffling, 2 attack starts,
(3, epoch) per-epoch evaluation), so identical (seed, config, data) give
identical metrics and parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .class_stats import ClassStats, exact_recompute
from .data import Dataset
from .losses import (
    LossConfig,
    WeightSource,
    dkl_family,
    jsd_forward_backward,
    kl_backward,
    soft_ce,
    wmse_efficient_values,
)
from .model import MlpParams, SgdOptimizer, backward, cosine_lr, forward, init_mlp
from .numerics import log_softmax, softmax

__all__ = [
    "AttackConfig",
    "TrainConfig",
    "TrainingDiverged",
    "DESK_ATTACK",
    "IMAGE_ATTACK",
    "pgd_attack",
    "evaluate",
    "eval_seed",
    "train_baseline",
    "train_distill",
    "train_adversarial",
    "make_dataset",
]

LOSS_CHOICES = ("kl", "dkl", "ikl", "jsd", "ce")


class TrainingDiverged(RuntimeError):
    """Raised when a loop produces non-finite losses or gradients."""


@dataclass(frozen=True)
class AttackConfig:
    """Infinity-ball PGD settings, in feature units of the unit box."""

    epsilon: float = 0.1
    step_size: float = 0.025
    iterations: int = 10
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0 or not np.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.step_size <= 0 or self.iterations < 1:
            raise ValueError(f"need step_size > 0 and iterations >= 1, got "
                             f"{self.step_size}, {self.iterations}")


# Desk-scale default for [0,1]-scaled synthetic features, and the usual
# 8/255, 2/255 preset for image-like CSV data.
DESK_ATTACK = AttackConfig(epsilon=0.1, step_size=0.025, iterations=10)
IMAGE_ATTACK = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=10)


@dataclass(frozen=True)
class TrainConfig:
    """Flat run configuration; every field doubles as a config-file key."""

    mode: str = ""                      # baseline | distill | adversarial
    loss: str = "kl"                    # kl | dkl | ikl | jsd | ce
    alpha: float = 4.0                  # wMSE weight (forward prefactor alpha/4)
    beta: float = 1.0                   # soft cross-entropy weight
    break_asymmetry: bool = False       # dkl only; ikl always breaks it
    weight_source: str = "sample"       # dkl only; ikl always uses "class"
    epochs: int = 12
    batch_size: int = 128
    hidden_dims: tuple[int, ...] = (32,)
    base_lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    # adversarial mode
    trades_lambda: float = 6.0
    epsilon: float = 0.1
    attack_step: float = 0.025
    attack_iters: int = 10
    attack_random_start: bool = True
    eps_warmup_epochs: int = -1         # -1: first 40% of epochs; 0: no warmup
    # class statistics
    stats_temperature: float = 4.0
    stats_momentum: float = 0.9
    # distillation mode
    kd_temperature: float = 4.0
    gamma: float = 1.0                  # hard-label CE weight
    teacher_logits: str = ""
    teacher_params: str = ""
    # data
    data: str = "gaussian"              # gaussian | csv
    csv_path: str = ""
    csv_normalize: bool = False
    classes: int = 5
    dim: int = 8
    n_per_class: int = 120
    spread: float = 0.35
    data_seed: int = 1
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.loss not in LOSS_CHOICES:
            raise ValueError(f"loss must be one of {LOSS_CHOICES}, got {self.loss!r}")
        if self.weight_source not in ("sample", "class"):
            raise ValueError(f"weight_source must be 'sample' or 'class', got {self.weight_source!r}")
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0 or self.trades_lambda < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr < 0 or self.kd_temperature <= 0:
            raise ValueError("base_lr must be nonnegative and kd_temperature positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")

    def attack(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.attack_step, self.attack_iters,
                            self.attack_random_start)

    def loss_config(self, detach_m: bool) -> LossConfig:
        if self.loss == "ikl":
            return LossConfig(self.alpha, self.beta, detach_m=detach_m, break_asymmetry=True,
                              weight_source=WeightSource.CLASS_WISE)
        source = WeightSource.CLASS_WISE if self.weight_source == "class" else WeightSource.SAMPLE_WISE
        return LossConfig(self.alpha, self.beta, detach_m=detach_m,
                          break_asymmetry=self.break_asymmetry, weight_source=source)


def make_dataset(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Materialize the configured dataset and its stratified split."""
    if cfg.data == "csv":
        from .data import load_csv

        full = load_csv(cfg.csv_path, normalize=cfg.csv_normalize)
    elif cfg.data == "gaussian":
        from .data import gaussian_mixture

        full = gaussian_mixture(cfg.classes, cfg.dim, cfg.n_per_class, cfg.spread,
                                seed=cfg.data_seed)
    else:
        raise ValueError(f"data must be 'gaussian' or 'csv', got {cfg.data!r}")
    from .data import split

    return split(full, cfg.test_fraction, seed=cfg.data_seed)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def eval_seed(seed: int, epoch: int) -> int:
    """Seed of the per-epoch evaluation stream (stable across reruns)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(3, epoch))
    return int(ss.generate_state(1, np.uint64)[0])


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def pgd_attack(params: MlpParams, batch, reference, atk: AttackConfig,
               objective: str = "ce", rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterative signed-gradient ascent inside the epsilon ball.

    objective 'ce' maximizes the cross-entropy against `reference` labels;
    objective 'kl' maximizes KL(softmax(reference) || softmax(current)),
    the usual inner loop when distilling robustness from the natural
    branch. The output always satisfies both |x - x0|_inf <= epsilon and
    the [0, 1] box, with the projection applied after every step.
    """
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.min(initial=0.0) < -1e-9 or x0.max(initial=1.0) > 1.0 + 1e-9:
        raise ValueError("attack inputs must lie in [0, 1]")
    if objective not in ("ce", "kl"):
        raise ValueError(f"objective must be 'ce' or 'kl', got {objective!r}")
    lo = np.maximum(x0 - atk.epsilon, 0.0)
    hi = np.minimum(x0 + atk.epsilon, 1.0)
    if atk.random_start:
        if rng is None:
            rng = _rng(0)
        x = np.clip(x0 + rng.uniform(-atk.epsilon, atk.epsilon, size=x0.shape), lo, hi)
    else:
        x = x0.copy()
    if objective == "kl":
        ref_probs = softmax(np.asarray(reference, dtype=np.float64))
    else:
        labels = np.asarray(reference)
        targets = _onehot(labels, params.dims[-1])
    for _ in range(atk.iterations):
        logits, cache = forward(params, x)
        if not np.all(np.isfinite(logits)):
            raise TrainingDiverged("non-finite logits inside the attack")
        probs = softmax(logits)
        g_logits = probs - (ref_probs if objective == "kl" else targets)
        if not np.all(np.isfinite(g_logits)):
            raise TrainingDiverged("non-finite gradients inside the attack")
        _, g_x = backward(params, cache, g_logits)
        x = np.clip(x + atk.step_size * np.sign(g_x), lo, hi)
    return x


def _accuracy(params: MlpParams, features: np.ndarray, labels: np.ndarray,
              chunk: int = 1024) -> float:
    hits = 0
    for start in range(0, features.shape[0], chunk):
        logits, _ = forward(params, features[start:start + chunk])
        hits += int((logits.argmax(axis=1) == labels[start:start + chunk]).sum())
    return hits / features.shape[0]


def evaluate(params: MlpParams, dataset: Dataset, atk: AttackConfig | None = None,
             seed: int = 0, chunk: int = 256) -> dict:
    """Clean accuracy, plus PGD (cross-entropy objective) robust accuracy."""
    out = {"clean_acc": _accuracy(params, dataset.features, dataset.labels)}
    if atk is not None:
        rng = _rng(seed)
        hits = 0
        for start in range(0, dataset.n, chunk):
            xb = dataset.features[start:start + chunk]
            yb = dataset.labels[start:start + chunk]
            x_adv = pgd_attack(params, xb, yb, atk, objective="ce", rng=rng)
            logits, _ = forward(params, x_adv)
            hits += int((logits.argmax(axis=1) == yb).sum())
        out["robust_acc"] = hits / dataset.n
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _check_finite(value: float, epoch: int, batch: int) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {batch}")
    return float(value)


def _step(opt: SgdOptimizer, params: MlpParams, grads: MlpParams, lr: float,
          epoch: int, batch: int) -> None:
    try:
        opt.step(params, grads, lr)
    except ValueError as exc:
        raise TrainingDiverged(f"epoch {epoch} batch {batch}: {exc}") from None


def _forward_checked(params: MlpParams, x: np.ndarray, epoch: int, batch: int):
    logits, cache = forward(params, x)
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged(f"non-finite logits at epoch {epoch} batch {batch}")
    return logits, cache


def _init_run(cfg: TrainConfig, train_ds: Dataset):
    dims = (train_ds.dim, *cfg.hidden_dims, train_ds.num_classes)
    params = init_mlp(dims, seed=np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))
    opt = SgdOptimizer(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = _rng(cfg.seed, 1)
    n_batches = -(-train_ds.n // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    return params, opt, shuffle_rng, total_steps


def train_baseline(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
                   on_epoch=None) -> tuple[MlpParams, list[dict]]:
    """Hard-label cross-entropy reference run."""
    params, opt, shuffle_rng, total_steps = _init_run(cfg, train_ds)
    metrics = []
    step = 0
    for epoch in range(cfg.epochs):
        ce_sum, nb, lr_epoch = 0.0, 0, None
        for bi, idx in enumerate(_batches(train_ds.n, cfg.batch_size, shuffle_rng)):
            xb, yb = train_ds.features[idx], train_ds.labels[idx]
            logits, cache = _forward_checked(params, xb, epoch, bi)
            lp = log_softmax(logits)
            ce = _check_finite(-lp[np.arange(yb.size), yb].mean(), epoch, bi)
            grad = (softmax(logits) - _onehot(yb, train_ds.num_classes)) / yb.size
            grads, _ = backward(params, cache, grad)
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            lr_epoch = lr if lr_epoch is None else lr_epoch
            _step(opt, params, grads, lr, epoch, bi)
            step += 1
            ce_sum += ce
            nb += 1
        record = {
            "epoch": epoch,
            "lr": float(lr_epoch),
            "loss_ce": ce_sum / nb,
            "train_acc": _accuracy(params, train_ds.features, train_ds.labels),
            "test_acc": _accuracy(params, test_ds.features, test_ds.labels),
        }
        metrics.append(record)
        if on_epoch:
            on_epoch(record)
    return params, metrics


def _kd_scores(cfg: TrainConfig, stats: ClassStats | None, s_teacher: np.ndarray,
               labels: np.ndarray) -> np.ndarray:
    if stats is not None:
        return stats.rows[labels]
    return s_teacher


def train_distill(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset, teacher_logits,
                  on_epoch=None) -> tuple[MlpParams, list[dict]]:
    """Student training against a fixed teacher logits cache.

    objective = gamma * CE(hard labels) + <divergence>(teacher, student)
    with both logit sets divided by the distillation temperature first.
    The teacher side is always detached; 'kl' reproduces classic soft-label
    distillation, 'dkl'/'ikl' route extra wMSE gradient into the student
    when asymmetry is broken.
    """
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if teacher.shape != (train_ds.n, train_ds.num_classes):
        raise ValueError(f"teacher logits shape {teacher.shape} does not match "
                         f"train set ({train_ds.n}, {train_ds.num_classes})")
    lcfg = cfg.loss_config(detach_m=True)
    stats = None
    if cfg.loss in ("dkl", "ikl") and lcfg.weight_source is WeightSource.CLASS_WISE:
        # The teacher is fixed, so its class means are exact, not stale.
        stats = exact_recompute(teacher, train_ds.labels, train_ds.num_classes,
                                temperature=cfg.stats_temperature, momentum=cfg.stats_momentum)
    params, opt, shuffle_rng, total_steps = _init_run(cfg, train_ds)
    temp = cfg.kd_temperature
    metrics = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = {"loss_ce": 0.0, "loss_wmse": 0.0, "loss_soft_ce": 0.0}
        nb, lr_epoch = 0, None
        for bi, idx in enumerate(_batches(train_ds.n, cfg.batch_size, shuffle_rng)):
            xb, yb = train_ds.features[idx], train_ds.labels[idx]
            logits, cache = _forward_checked(params, xb, epoch, bi)
            lp = log_softmax(logits)
            ce = _check_finite(-lp[np.arange(yb.size), yb].mean(), epoch, bi)
            grad = cfg.gamma * (softmax(logits) - _onehot(yb, train_ds.num_classes)) / yb.size
            o_m = teacher[idx] / temp
            o_n = logits / temp
            s_m = softmax(o_m)
            if cfg.loss == "kl":
                out = kl_backward(o_m, o_n)
                grad += out.grad_n / temp
            elif cfg.loss in ("dkl", "ikl"):
                out = dkl_family(o_m, o_n, lcfg, labels=yb, stats=stats)
                _check_finite(out.value, epoch, bi)
                grad += out.grad_n / temp
            elif cfg.loss == "jsd":
                out = jsd_forward_backward(o_m, o_n)
                grad += out.grad_n / temp
            scores = _kd_scores(cfg, stats, s_m, yb)
            sums["loss_ce"] += cfg.gamma * ce
            sums["loss_wmse"] += float(wmse_efficient_values(o_m, o_n, scores).mean())
            sums["loss_soft_ce"] += soft_ce(o_n, s_m).value
            grads, _ = backward(params, cache, grad)
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            lr_epoch = lr if lr_epoch is None else lr_epoch
            _step(opt, params, grads, lr, epoch, bi)
            step += 1
            nb += 1
        train_logits = forward(params, train_ds.features)[0]
        record = {
            "epoch": epoch,
            "lr": float(lr_epoch),
            **{k: v / nb for k, v in sums.items()},
            "train_acc": float((train_logits.argmax(axis=1) == train_ds.labels).mean()),
            "test_acc": _accuracy(params, test_ds.features, test_ds.labels),
            "agreement": float((train_logits.argmax(axis=1) == teacher.argmax(axis=1)).mean()),
        }
        metrics.append(record)
        if on_epoch:
            on_epoch(record)
    return params, metrics


def _warmup_factor(cfg: TrainConfig, epoch: int) -> float:
    warmup = cfg.eps_warmup_epochs
    if warmup < 0:
        warmup = max(1, round(0.4 * cfg.epochs))
    if warmup == 0 or epoch >= warmup:
        return 1.0
    return (epoch + 1) / warmup


def train_adversarial(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
                      on_epoch=None) -> tuple[MlpParams, list[dict], ClassStats]:
    """TRADES-style loop: clean CE plus a scaled divergence to the PGD branch.

    Per batch: craft x_adv by maximizing KL(natural || current) inside the
    (warmed-up) epsilon ball, then descend on

        CE(natural, labels) + lambda * loss(natural logits, adversarial logits)

    where the loss is plain KL, the decoupled family, its class-weighted
    asymmetry-broken variant, or the Jensen-Shannon loss. Class statistics
    are refreshed from the natural branch after every step and feed both
    the class-wise weights and the margin metric.
    """
    num_classes = train_ds.num_classes
    lcfg = cfg.loss_config(detach_m=False)
    stats = ClassStats.uniform(num_classes, cfg.stats_temperature, cfg.stats_momentum)
    params, opt, shuffle_rng, total_steps = _init_run(cfg, train_ds)
    attack_rng = _rng(cfg.seed, 2)
    lam = cfg.trades_lambda
    metrics = []
    step = 0
    for epoch in range(cfg.epochs):
        atk = replace(cfg.attack(), epsilon=cfg.epsilon * _warmup_factor(cfg, epoch))
        sums = {"loss_ce": 0.0, "loss_wmse": 0.0, "loss_soft_ce": 0.0}
        nb, lr_epoch = 0, None
        for bi, idx in enumerate(_batches(train_ds.n, cfg.batch_size, shuffle_rng)):
            xb, yb = train_ds.features[idx], train_ds.labels[idx]
            o_nat, cache_nat = _forward_checked(params, xb, epoch, bi)
            x_adv = pgd_attack(params, xb, o_nat, atk, objective="kl", rng=attack_rng)
            o_adv, cache_adv = _forward_checked(params, x_adv, epoch, bi)
            s_nat = softmax(o_nat)
            lp_nat = log_softmax(o_nat)
            ce = _check_finite(-lp_nat[np.arange(yb.size), yb].mean(), epoch, bi)
            grad_nat = (s_nat - _onehot(yb, num_classes)) / yb.size
            grad_adv = np.zeros_like(o_adv)
            if cfg.loss == "kl":
                out = kl_backward(o_nat, o_adv)
            elif cfg.loss in ("dkl", "ikl"):
                out = dkl_family(o_nat, o_adv, lcfg, labels=yb, stats=stats)
            elif cfg.loss == "jsd":
                out = jsd_forward_backward(o_nat, o_adv)
            else:
                out = None
            if out is not None:
                _check_finite(out.value, epoch, bi)
                grad_nat = grad_nat + lam * out.grad_m
                grad_adv = grad_adv + lam * out.grad_n
            if lcfg.weight_source is WeightSource.CLASS_WISE:
                scores = stats.rows[yb]
            else:
                scores = s_nat
            sums["loss_ce"] += ce
            sums["loss_wmse"] += float(wmse_efficient_values(o_nat, o_adv, scores).mean())
            sums["loss_soft_ce"] += soft_ce(o_adv, s_nat).value
            g_nat, _ = backward(params, cache_nat, grad_nat)
            g_adv, _ = backward(params, cache_adv, grad_adv)
            grads = MlpParams([a + b for a, b in zip(g_nat.weights, g_adv.weights)],
                              [a + b for a, b in zip(g_nat.biases, g_adv.biases)])
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            lr_epoch = lr if lr_epoch is None else lr_epoch
            _step(opt, params, grads, lr, epoch, bi)
            step += 1
            stats.update(o_nat, yb)
            nb += 1
        scores_eval = evaluate(params, test_ds, cfg.attack(), seed=eval_seed(cfg.seed, epoch))
        record = {
            "epoch": epoch,
            "lr": float(lr_epoch),
            **{k: v / nb for k, v in sums.items()},
            "clean_acc": scores_eval["clean_acc"],
            "robust_acc": scores_eval["robust_acc"],
            "mean_margin": float(stats.margins().mean()),
        }
        metrics.append(record)
        if on_epoch:
            on_epoch(record)
    return params, metrics, stats

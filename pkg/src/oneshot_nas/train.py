"""Supernet pretraining, slimmable fine-tuning and standalone retraining.

One optimisation step of the supernet draws ``B`` distinct single-path
architectures, runs forward and backward for each of them on the *same*
mini-batch, sums their gradients into full-size buffers, divides by the
number of executions and applies a single SGD update. Parameters that no
sampled path touched receive no update at all (momentum and weight decay
included).
"""

import csv
import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import augment as augment_batch
from .errors import DataError, NumericError, StageError, UsageError
from .heads import HEAD_PREFIX, TASK_METRIC, evaluate
from .nn import OptimizerState, cosine_lr, sgd_update, softmax_cross_entropy
from .space import DEFAULT_EXPANSIONS, encode_genotype, sample_distinct, uniform_genotype
from .supernet import SubnetView, bn_recalibrate, export_standalone, init_weight_store

SANDWICH_MODES = ("per_subnet", "per_step")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    lr0: float = 0.045
    momentum: float = 0.9
    weight_decay: float = 4e-5
    subnets_per_step: int = 5
    width_list: tuple = DEFAULT_EXPANSIONS
    seed: int = 0
    augment: bool = True
    sandwich: str = "per_subnet"
    val_subnets: int = 2
    recal_batches: int = 8

    def __post_init__(self):
        object.__setattr__(self, "width_list", tuple(float(w) for w in self.width_list))
        if self.subnets_per_step < 1:
            raise UsageError("subnets_per_step (B) must be >= 1")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise UsageError("lr0 must be positive")
        if self.sandwich not in SANDWICH_MODES:
            raise UsageError(f"sandwich must be one of {SANDWICH_MODES}")

    def to_dict(self):
        d = asdict(self)
        d["width_list"] = list(self.width_list)
        return d


def pretrain_config(**kw):
    return TrainConfig(**{"epochs": 150, "lr0": 0.045, **kw})


def finetune_config(**kw):
    return TrainConfig(**{"epochs": 50, "lr0": 0.01, **kw})


def retrain_config(**kw):
    return TrainConfig(**{"epochs": 100, "lr0": 0.01, "subnets_per_step": 1, **kw})


@dataclass
class StepReport:
    losses: list
    lr: float
    genotypes: list
    executions: int = field(default=0)

    @property
    def loss(self):
        return float(np.mean(self.losses))


def make_optimizer(config):
    return OptimizerState(lr=config.lr0, momentum=config.momentum,
                          weight_decay=config.weight_decay)


def accumulate_gradients(store, genotypes, images, labels, scale=1.0):
    """Forward/backward every genotype on one batch; sum gradients.

    Returns ``(grads, losses)`` where ``grads`` maps store keys to
    full-size arrays holding ``scale * sum_i dL_i/dW``.
    """
    grads, losses = {}, []
    for g in genotypes:
        view = SubnetView(store, g)
        out = view.forward(images, "train")
        loss, dout = softmax_cross_entropy(out, labels)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss for {encode_genotype(g)}")
        view.backward(dout)
        view.accumulate_grads(grads, scale)
        losses.append(loss)
    return grads, losses


def _apply(store, grads, state, lr):
    state.lr = lr
    sgd_update(store.params, grads, state)


def ensemble_step(store, images, labels, state, rng, lr, config, space=None, genotypes=None):
    """Sample ``B`` distinct full-width paths, accumulate, update once."""
    space = space or store.space
    if genotypes is None:
        genotypes = sample_distinct(space, config.subnets_per_step, rng,
                                    expansion=space.max_expansion)
    grads, losses = accumulate_gradients(store, genotypes, images, labels,
                                         scale=1.0 / len(genotypes))
    _apply(store, grads, state, lr)
    return StepReport(losses, lr, list(genotypes), len(genotypes))


def _check_width_list(space, widths):
    if not widths:
        raise UsageError("width_list is empty")
    if min(widths) < 2.0 or max(widths) > 6.0:
        raise UsageError("width_list must lie within [2, 6]")
    unknown = [w for w in widths if w not in space.expansion_choices]
    if unknown:
        raise UsageError(f"widths {unknown} are not expansion choices of the space")


def sandwich_schedule(space, config, rng, topologies=None):
    """Genotypes executed in one fine-tuning step.

    ``per_subnet``: every sampled topology runs at the smallest width, the
    largest width and one random per-layer width assignment (3B runs).
    ``per_step``: smallest and largest once (on the first topology) plus a
    random width assignment for each topology (B + 2 runs).
    """
    widths = config.width_list
    _check_width_list(space, widths)
    if topologies is None:
        topologies = sample_distinct(space, config.subnets_per_step, rng,
                                     expansion=space.max_expansion)
    lo, hi = min(widths), max(widths)
    n = space.num_layers

    def random_widths(topo):
        picks = rng.integers(len(widths), size=n)
        return topo.with_expansions([widths[i] for i in picks])

    runs = []
    if config.sandwich == "per_subnet":
        for topo in topologies:
            runs += [topo.with_expansions([lo] * n), topo.with_expansions([hi] * n),
                     random_widths(topo)]
    else:
        runs += [topologies[0].with_expansions([lo] * n), topologies[0].with_expansions([hi] * n)]
        runs += [random_widths(t) for t in topologies]
    return runs


def sandwich_finetune_step(store, images, labels, state, rng, lr, config, space=None,
                           topologies=None, head_only=False):
    space = space or store.space
    runs = sandwich_schedule(space, config, rng, topologies)
    grads, losses = accumulate_gradients(store, runs, images, labels, scale=1.0 / len(runs))
    if head_only:
        grads = {k: v for k, v in grads.items() if k.startswith(HEAD_PREFIX)}
    _apply(store, grads, state, lr)
    return StepReport(losses, lr, runs, len(runs))


def _steps_per_epoch(n, batch_size):
    return max(1, n // batch_size) if n >= batch_size else 1


def _epoch_batches(split, config, rng):
    drop_last = len(split) >= config.batch_size
    for images, labels in split.batches(config.batch_size, rng, drop_last=drop_last):
        if config.augment:
            images, labels = augment_batch(images, rng, labels)
        yield images, labels


def _check_head(store, dataset):
    if store.head is None:
        raise UsageError("attach a head before training")
    if store.head.task != dataset.task:
        raise DataError(f"store has a {store.head.task} head, dataset is {dataset.task}")
    if store.head.num_classes != dataset.num_classes:
        raise DataError(f"head predicts {store.head.num_classes} classes, "
                        f"dataset has {dataset.num_classes}")


def subnet_metric(store, genotype, dataset, split="val", recal_batches=8, batch_size=128):
    """Inherited-weight metric report of one architecture after BN recalibration."""
    view = SubnetView(store, genotype)
    bn_recalibrate(view, dataset.train.image_batches(batch_size), recal_batches)
    s = dataset.split(split)
    return evaluate(view, s.images, s.labels)


def _validation(store, dataset, config, epoch, space, random_width):
    if config.val_subnets <= 0:
        return None
    rng = np.random.default_rng([config.seed, epoch, 7])
    scores = []
    for _ in range(config.val_subnets):
        g = uniform_genotype(space, rng) if random_width else \
            uniform_genotype(space, rng, expansion=space.max_expansion)
        rep = subnet_metric(store, g, dataset, "val", config.recal_batches, config.batch_size)
        scores.append(rep["metrics"][TASK_METRIC[dataset.task]])
    return float(np.mean(scores))


def _run(store, dataset, config, step_fn, space, random_width_val, log):
    rng = np.random.default_rng(config.seed)
    state = make_optimizer(config)
    per_epoch = _steps_per_epoch(len(dataset.train), config.batch_size)
    total = config.epochs * per_epoch
    step = 0
    rows = []
    for epoch in range(config.epochs):
        losses = []
        lr = config.lr0
        for images, labels in _epoch_batches(dataset.train, config, rng):
            lr = cosine_lr(step, total, config.lr0)
            report = step_fn(store, images, labels, state, rng, lr, config, space)
            losses.append(report.loss)
            step += 1
        row = {"epoch": epoch + 1, "avg_loss": float(np.mean(losses)), "lr": lr,
               "val_metric": _validation(store, dataset, config, epoch, space, random_width_val)}
        rows.append(row)
        if log is not None:
            log(row)
    return rows, state


def pretrain(store, dataset, config, space=None, log=None):
    """Full-width ensemble single-path training of the whole supernet."""
    _check_head(store, dataset)
    if store.head.task != "classification":
        raise DataError("pretraining uses the classification head")
    space = space or store.space
    rows, _ = _run(store, dataset, config, ensemble_step, space, False, log)
    store.stage = "pretrained"
    return store, rows


def finetune(store, task, dataset, config, space=None, allow_scratch=False, head_only=False,
             log=None):
    """Slimmable (sandwich-rule) fine-tuning for one target task.

    ``head_only`` freezes every backbone weight and trains just the task
    head on the same schedule; the store is then tagged ``headtuned:<task>``
    and only a search that explicitly skips fine-tuning accepts it.
    """
    if store.stage != "pretrained" and not store.stage.startswith("finetuned") \
            and not allow_scratch:
        raise StageError(f"fine-tuning needs a pretrained store, got stage {store.stage!r} "
                         "(pass allow_scratch to override)")
    if store.head is None or store.head.task != task:
        raise DataError(f"attach a {task} head before fine-tuning")
    _check_head(store, dataset)
    space = (space or store.space).with_width_search(True)
    def step_fn(*args):
        return sandwich_finetune_step(*args, head_only=head_only)

    rows, _ = _run(store, dataset, config, step_fn, space, True, log)
    store.stage = f"{'headtuned' if head_only else 'finetuned'}:{task}"
    return store, rows


def retrain_standalone(template, genotype, dataset, config, inherit=False, log=None):
    """Train one architecture on its own and report its validation metric.

    ``template`` is a store carrying the head to use; unless ``inherit`` is
    set the standalone weights come from a fresh initialisation seeded by
    ``config.seed``. Returns ``(model, val_report, rows)``.
    """
    _check_head(template, dataset)
    model = export_standalone(template, genotype, fresh_seed=None if inherit else config.seed)
    config = replace(config, subnets_per_step=1, val_subnets=0)

    def step_fn(store, images, labels, state, rng, lr, cfg, space):
        return ensemble_step(store, images, labels, state, rng, lr, cfg, space,
                             genotypes=[genotype])

    rows, _ = _run(model, dataset, config, step_fn, model.space, False, log)
    model.stage = "standalone"
    report = evaluate(SubnetView(model, genotype), dataset.val.images, dataset.val.labels)
    return model, report, rows


def fresh_store(space, head, seed, dtype=np.float32):
    return init_weight_store(space, seed, dtype=dtype, head=head)


METRIC_FIELDS = ("epoch", "avg_loss", "lr", "val_metric")


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in rows:
        writer.writerow([r["epoch"], repr(r["avg_loss"]), repr(r["lr"]),
                         "" if r["val_metric"] is None else repr(r["val_metric"])])
    return buf.getvalue()

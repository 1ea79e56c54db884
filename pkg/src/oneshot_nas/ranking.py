"""Ranking fidelity and ablation studies.

* :func:`kendall_tau` - tie-corrected rank correlation (tau-b).
* :func:`correlation_study` - inherited-weight vs stand-alone accuracy of
  sampled architectures, one supernet per ensemble size ``B``.
* :func:`ablation_channel_search` - fixed full-width search vs joint
  kernel + width search under the same FLOPs budget.
* :func:`ablation_finetune` - search over a fine-tuned supernet vs a frozen
  pretrained backbone with only a new head trained.
* :func:`ea_vs_random` - evolutionary vs random search at equal budget.
"""

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError
from .evolution import CachedFitness, SupernetFitness, evolutionary_search, random_search
from .heads import attach_head, classification_head, detach_head
from .space import encode_genotype, sample_distinct
from .train import finetune, fresh_store, pretrain, retrain_standalone, subnet_metric


def kendall_tau(xs, ys):
    """Kendall tau-b: ``(C - D) / sqrt((n0 - t_x) (n0 - t_y))``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise UsageError("kendall_tau needs two 1-d sequences of equal length")
    n = len(x)
    if n < 2:
        raise UsageError("kendall_tau needs at least two points")
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    untied_x = np.count_nonzero(sx)
    untied_y = np.count_nonzero(sy)
    if untied_x == 0 or untied_y == 0:
        raise UsageError("kendall_tau is undefined when one ranking is all ties")
    # count_nonzero(s) equals n0 - t for t tied pairs
    return float(np.sum(sx * sy) / np.sqrt(float(untied_x) * float(untied_y)))


@dataclass
class CorrelationStudyResult:
    subnets_per_step: int
    genotypes: list
    oneshot: list
    standalone: list
    tau: float  # None when one ranking is all ties

    def rows(self):
        return [{"B": self.subnets_per_step, "genotype": encode_genotype(g), "oneshot": o,
                 "standalone": s} for g, o, s in zip(self.genotypes, self.oneshot, self.standalone)]


def correlation_study(space, dataset, b_values, pretrain_cfg, retrain_cfg, n_archs=20,
                      seed=0, log=None):
    """Kendall tau between inherited-weight and stand-alone validation OA.

    Architectures are sampled once (full width, kernels varying) and shared
    by every ``B``; stand-alone accuracies therefore do not depend on ``B``
    and are computed once. Every stand-alone run uses the same seed, so
    initial weights (sliced from one supernet initialisation) and batch
    order are shared and accuracy differences come from the architecture.
    """
    rng = np.random.default_rng([seed, 11])
    genotypes = sample_distinct(space, n_archs, rng, expansion=space.max_expansion)
    head = classification_head(space, dataset.num_classes)
    template = fresh_store(space, head, seed)
    standalone = []
    for g in genotypes:
        _, report, _ = retrain_standalone(template, g, dataset, replace(retrain_cfg, seed=seed))
        standalone.append(report["metrics"]["oa"])
        if log is not None:
            log({"stage": "standalone", "genotype": encode_genotype(g), "oa": standalone[-1]})
    results = []
    for b in b_values:
        store = fresh_store(space, head, seed)
        pretrain(store, dataset, replace(pretrain_cfg, subnets_per_step=b, seed=seed))
        oneshot = [subnet_metric(store, g, dataset, "val", pretrain_cfg.recal_batches,
                                 pretrain_cfg.batch_size)["metrics"]["oa"] for g in genotypes]
        res = CorrelationStudyResult(b, genotypes, oneshot, standalone,
                                     _tau_or_none(oneshot, standalone))
        results.append(res)
        if log is not None:
            log({"stage": "oneshot", "B": b, "tau": res.tau})
    return results


def _tau_or_none(xs, ys):
    """Tau, or ``None`` when every architecture ties on one of the two axes."""
    try:
        return kendall_tau(xs, ys)
    except UsageError:
        if len(xs) >= 2 and len(xs) == len(ys):
            return None
        raise


def correlation_csv(results):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("B", "genotype", "oneshot", "standalone"))
    for res in results:
        for r in res.rows():
            writer.writerow((r["B"], r["genotype"], repr(r["oneshot"]), repr(r["standalone"])))
    return buf.getvalue()


def scatter_data(result):
    """Whitespace-separated columns for plotting one-shot vs stand-alone accuracy."""
    lines = [f"# B={result.subnets_per_step} tau={result.tau!r}", "# oneshot standalone genotype"]
    for g, o, s in zip(result.genotypes, result.oneshot, result.standalone):
        lines.append(f"{o!r} {s!r} {encode_genotype(g)}")
    return "\n".join(lines) + "\n"


def _search_summary(result, space):
    best = result.best
    return {**best.to_dict(), "width_search": space.width_search,
            "evaluations": result.evaluations}


def ablation_channel_search(store, dataset, evo_config, split="val", jobs=1):
    """Search the same fine-tuned store with widths fixed at the maximum and searched."""
    out = {}
    for name, enabled in (("fixed_width", False), ("joint", True)):
        space = store.space.with_width_search(enabled)
        fitness = SupernetFitness(store, dataset, split, evo_config.recal_batches)
        result = evolutionary_search(fitness, space, evo_config, jobs=jobs)
        out[name] = _search_summary(result, space)
        out[name]["history"] = result.history
    return out


def ablation_finetune(pretrained, dataset, finetune_cfg, evo_config, head, seed=0, jobs=1):
    """Best search fitness with and without fine-tuning the backbone.

    Both variants start from the same pretrained store, replace its head by
    a fresh ``head`` and train on the same schedule; without fine-tuning
    only the head learns.
    """
    out = {}
    for name, head_only in (("finetuned", False), ("skip_finetune", True)):
        store = pretrained.copy()
        if store.head is not None:
            detach_head(store)
        attach_head(store, head, seed=seed)
        finetune(store, head.task, dataset, finetune_cfg, head_only=head_only)
        fitness = SupernetFitness(store, dataset, "val", evo_config.recal_batches,
                                  allow_unfinetuned=head_only)
        space = store.space.with_width_search(True)
        result = evolutionary_search(fitness, space, evo_config, jobs=jobs)
        out[name] = _search_summary(result, space)
        out[name]["history"] = result.history
    return out


def ea_vs_random(fitness_fn, space, evo_config, jobs=1):
    """EA and random search given the same number of fitness calls.

    Both share one memo of raw scores so repeated genotypes cost nothing,
    but each search counts its own calls.
    """
    memo = CachedFitness(fitness_fn, jobs)
    ea = evolutionary_search(CachedFitness(memo, jobs), space, evo_config)
    rs = random_search(CachedFitness(memo, jobs), space, evo_config.budget,
                       evo_config.max_flops, seed=evo_config.seed)
    return {"ea": _search_summary(ea, space), "random": _search_summary(rs, space),
            "ea_history": ea.history}

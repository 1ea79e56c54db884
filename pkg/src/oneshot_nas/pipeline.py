"""Stage commands over a run directory.

Layout of a run directory::

    checkpoints/pretrained/      supernet after pretraining (classification head)
    checkpoints/finetuned/       supernet after sandwich fine-tuning on the target task
    checkpoints/headtuned/       pretrained backbone + head trained alone (--skip-finetune)
    checkpoints/retrained/       stand-alone model of the searched genotype
    logs/<stage>.csv             per-epoch or per-generation logs
    result.json                  one entry per completed stage
    summary.txt                  written by ``report``

Every checkpoint records the config digest, the seed and the blob hash of
the checkpoint it was derived from. Later stages check that chain and
refuse stale or missing inputs with a :class:`StageError` naming the
command to run. No timestamps are written, so re-running a command with the
same config and seed reproduces every output byte.
"""

import json
from pathlib import Path

from .data import generate
from .errors import CheckpointError, StageError, UsageError
from .evolution import SupernetFitness, evolutionary_search, history_csv
from .heads import attach_head, detach_head, evaluate
from .ranking import (
    ablation_channel_search,
    ablation_finetune,
    correlation_csv,
    correlation_study,
    ea_vs_random,
    scatter_data,
)
from .space import count_resources, decode_genotype, encode_genotype
from .supernet import SubnetView, checkpoint_digest, load_checkpoint, save_checkpoint
from .train import finetune, fresh_store, metrics_csv, pretrain, retrain_standalone

STAGE_DIRS = {"pretrain": "pretrained", "finetune": "finetuned", "headtune": "headtuned",
              "retrain": "retrained"}
STUDIES = ("correlation", "channel", "finetune", "ea-vs-random")


class Run:
    """Paths and shared helpers of one run directory."""

    def __init__(self, config, jobs=1):
        self.config = config
        self.root = Path(config.output_dir)
        self.jobs = jobs
        self.space = config.build_space()

    def checkpoint(self, stage):
        return self.root / "checkpoints" / STAGE_DIRS[stage]

    def log_path(self, name):
        return self.root / "logs" / f"{name}.csv"

    def write_text(self, path, text):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    def write_json(self, path, obj):
        return self.write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def update_result(self, key, value):
        path = self.root / "result.json"
        result = json.loads(path.read_text()) if path.exists() else {}
        result[key] = value
        self.write_json(path, result)
        return result

    def provenance(self, command, parent=None):
        return {"command": command, "config_sha256": self.config.digest(),
                "seed": self.config.seed, "parent_blob_sha256": parent}

    def load(self, stage, required_by, hint):
        path = self.checkpoint(stage)
        try:
            store = load_checkpoint(path, expected_space=self.space)
        except CheckpointError as err:
            if not (path / "manifest.json").exists():
                raise StageError(f"{required_by} needs {path}; run `{hint}` first") from err
            raise
        return store

    def save(self, store, stage):
        path = self.checkpoint(stage)
        save_checkpoint(store, path)
        return checkpoint_digest(path)

    def check_parent(self, store, parent_stage, hint):
        """The store's recorded parent must be the current ``parent_stage`` checkpoint."""
        want = store.provenance.get("parent_blob_sha256")
        path = self.checkpoint(parent_stage)
        have = checkpoint_digest(path) if (path / "manifest.json").exists() else None
        if want != have:
            raise StageError(f"{STAGE_DIRS[parent_stage]} checkpoint changed since this "
                             f"artifact was derived from it; re-run `{hint}`")


def cmd_validate(config):
    return {"config_sha256": config.digest(), "space_hash": config.build_space().hash(),
            "max_flops": config.max_flops()}


def cmd_pretrain(config, jobs=1):
    run = Run(config, jobs)
    dataset = generate(config.data.pretrain.build())
    store = fresh_store(run.space, config.pretrain_head(), config.seed)
    store, rows = pretrain(store, dataset, config.train.pretrain.build(config.seed))
    store.provenance = run.provenance("pretrain")
    digest = run.save(store, "pretrain")
    run.write_text(run.log_path("pretrain"), metrics_csv(rows))
    summary = {"blob_sha256": digest, "final_loss": rows[-1]["avg_loss"],
               "final_val_metric": rows[-1]["val_metric"]}
    run.update_result("pretrain", summary)
    return summary


def cmd_finetune(config, skip_finetune=False, allow_scratch=False, jobs=1):
    """Fine-tune the pretrained supernet on the target task.

    With ``skip_finetune`` the backbone stays frozen and only the new head
    is trained; the result feeds ``search --skip-finetune``.
    """
    run = Run(config, jobs)
    stage = "headtune" if skip_finetune else "finetune"
    if allow_scratch and not (run.checkpoint("pretrain") / "manifest.json").exists():
        store = fresh_store(run.space, None, config.seed)
        parent = None
    else:
        store = run.load("pretrain", "finetune", "pretrain")
        parent = checkpoint_digest(run.checkpoint("pretrain"))
    if store.head is not None:
        detach_head(store)
    head = config.target_head()
    attach_head(store, head, seed=config.seed + 2)
    dataset = generate(config.data.target.build())
    store, rows = finetune(store, head.task, dataset, config.train.finetune.build(config.seed),
                           allow_scratch=allow_scratch, head_only=skip_finetune)
    store.provenance = run.provenance(stage, parent)
    digest = run.save(store, stage)
    run.write_text(run.log_path(stage), metrics_csv(rows))
    summary = {"blob_sha256": digest, "stage": store.stage, "final_loss": rows[-1]["avg_loss"],
               "final_val_metric": rows[-1]["val_metric"]}
    run.update_result(stage, summary)
    return summary


def cmd_search(config, skip_finetune=False, jobs=1):
    run = Run(config, jobs)
    stage = "headtune" if skip_finetune else "finetune"
    hint = "finetune --skip-finetune" if skip_finetune else "finetune"
    store = run.load(stage, "search", hint)
    dataset = generate(config.data.target.build())
    if not skip_finetune and store.stage != f"finetuned:{dataset.task}":
        raise StageError(f"search needs a supernet fine-tuned for {dataset.task}, "
                         f"found stage {store.stage!r}; run `finetune`")
    run.check_parent(store, "pretrain", hint)
    evo = config.evo_config()
    fitness = SupernetFitness(store, dataset, "val", evo.recal_batches,
                              allow_unfinetuned=skip_finetune)
    space = run.space.with_width_search(config.search.width_search)
    result = evolutionary_search(fitness, space, evo, jobs=jobs)
    name = "search_skip_finetune" if skip_finetune else "search"
    run.write_text(run.log_path(name), history_csv(result.history))
    summary = {**result.best.to_dict(), "max_flops": evo.max_flops,
               "evaluations": result.evaluations, "unique_evaluations": result.unique_evaluations,
               "parent_blob_sha256": checkpoint_digest(run.checkpoint(stage))}
    run.update_result(name, summary)
    return summary


def cmd_retrain(config, genotype=None, jobs=1):
    """Train the searched (or given) genotype from scratch and score it on the test split."""
    run = Run(config, jobs)
    result_path = run.root / "result.json"
    if genotype is None:
        result = json.loads(result_path.read_text()) if result_path.exists() else {}
        if "search" not in result:
            raise StageError("retrain needs a searched genotype; run `search` or pass --genotype")
        genotype = result["search"]["genotype"]
    g = decode_genotype(genotype, run.space)
    dataset = generate(config.data.target.build())
    template = fresh_store(run.space, config.target_head(), config.seed)
    model, val_report, rows = retrain_standalone(template, g, dataset,
                                                 config.train.retrain.build(config.seed))
    test_report = evaluate(SubnetView(model, g), dataset.test.images, dataset.test.labels)
    model.provenance = run.provenance("retrain")
    digest = run.save(model, "retrain")
    run.write_text(run.log_path("retrain"), metrics_csv(rows))
    res = count_resources(run.space, g)
    summary = {"genotype": encode_genotype(g), "flops": res.flops, "params": res.params,
               "val": val_report, "test": test_report, "blob_sha256": digest}
    run.update_result("retrain", summary)
    return summary


def cmd_study(config, name, jobs=1):
    if name not in STUDIES:
        raise UsageError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}")
    run = Run(config, jobs)
    key = "study_" + name.replace("-", "_")
    out_dir = run.root / "studies"
    evo = config.evo_config()
    if name == "correlation":
        dataset = generate(config.data.pretrain.build())
        pre = config.train.pretrain.build(config.seed)
        retrain = config.train.retrain.build(config.seed)
        if config.study.retrain_epochs is not None:
            retrain = type(retrain)(**{**retrain.to_dict(), "epochs": config.study.retrain_epochs})
        results = correlation_study(run.space, dataset, config.study.b_values, pre, retrain,
                                    config.study.n_archs, config.seed)
        run.write_text(run.log_path(key), correlation_csv(results))
        for r in results:
            run.write_text(out_dir / f"scatter_B{r.subnets_per_step}.dat", scatter_data(r))
        summary = {"tau": {str(r.subnets_per_step): r.tau for r in results}}
    elif name == "channel":
        store = run.load("finetune", "study channel", "finetune")
        dataset = generate(config.data.target.build())
        summary = ablation_channel_search(store, dataset, evo, jobs=jobs)
    elif name == "finetune":
        store = run.load("pretrain", "study finetune", "pretrain")
        dataset = generate(config.data.target.build())
        summary = ablation_finetune(store, dataset, config.train.finetune.build(config.seed), evo,
                                    config.target_head(), seed=config.seed + 2, jobs=jobs)
    else:
        store = run.load("finetune", "study ea-vs-random", "finetune")
        dataset = generate(config.data.target.build())
        fitness = SupernetFitness(store, dataset, "val", evo.recal_batches)
        space = run.space.with_width_search(config.search.width_search)
        summary = ea_vs_random(fitness, space, evo, jobs=jobs)
    run.write_json(out_dir / f"{key}.json", summary)
    run.update_result(key, summary)
    return summary


def _fmt(v):
    return "-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(run_dir):
    """Plain-text summary of a run directory (also written to ``summary.txt``)."""
    root = Path(run_dir)
    path = root / "result.json"
    if not path.exists():
        raise StageError(f"no result.json in {root}; run a pipeline command first")
    result = json.loads(path.read_text())
    lines = [f"run: {root.name}"]
    for stage in ("pretrain", "finetune", "headtune"):
        if stage in result:
            r = result[stage]
            lines.append(f"{stage}: loss {_fmt(r['final_loss'])} val {_fmt(r['final_val_metric'])}")
    for name in ("search", "search_skip_finetune"):
        if name in result:
            r = result[name]
            lines.append(f"{name}: {r['genotype']} fitness {_fmt(r['fitness'])} "
                         f"flops {r['flops']} <= {r['max_flops']}")
    if "retrain" in result:
        r = result["retrain"]
        metrics = " ".join(f"{k} {_fmt(v)}" for k, v in sorted(r["test"]["metrics"].items()))
        lines.append(f"retrain: {r['genotype']} test {metrics} params {r['params']}")
    for key in sorted(k for k in result if k.startswith("study_")):
        lines.append(f"{key}: {json.dumps(_study_digest(result[key]), sort_keys=True)}")
    text = "\n".join(lines) + "\n"
    (root / "summary.txt").write_text(text)
    return text


def _study_digest(summary):
    if "tau" in summary:
        return summary["tau"]
    return {k: v["fitness"] for k, v in summary.items() if isinstance(v, dict) and "fitness" in v}

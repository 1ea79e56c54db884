"""One-shot neural architecture search on a small numpy deep-learning core.

The pieces, in pipeline order:

* :mod:`.space` - search space, genotypes, FLOPs/parameter counting
* :mod:`.supernet` - shared weight store, subnet views, checkpoints
* :mod:`.train` - ensemble single-path pretraining, sandwich fine-tuning,
  stand-alone retraining
* :mod:`.heads` - classification and segmentation heads, metrics
* :mod:`.evolution` - constrained evolutionary and random search
* :mod:`.ranking` - Kendall tau and the ablation studies
* :mod:`.data` - procedural datasets
* :mod:`.pipeline`, :mod:`.cli`, :mod:`.config` - run directories and the
  ``oneshot-nas`` command
"""

from .data import DatasetSpec, augment, generate, segmentation_spec
from .errors import (
    CheckpointError,
    ConstraintError,
    DataError,
    GenotypeParseError,
    NASError,
    NumericError,
    ShapeError,
    StageError,
    UsageError,
)
from .evolution import (
    EvoConfig,
    Individual,
    SupernetFitness,
    crossover,
    environment_selection,
    evolutionary_search,
    mutate,
    random_search,
)
from .heads import (
    HeadSpec,
    attach_head,
    classification_head,
    detach_head,
    evaluate,
    segmentation_head,
)
from .ranking import ablation_channel_search, ablation_finetune, correlation_study, kendall_tau
from .space import (
    Genotype,
    SearchSpace,
    StageSpec,
    constraint_preset,
    count_resources,
    decode_genotype,
    desk_space,
    encode_genotype,
    full_space,
)
from .supernet import (
    SubnetView,
    WeightStore,
    bn_recalibrate,
    export_standalone,
    init_weight_store,
    load_checkpoint,
    materialize_subnet,
    save_checkpoint,
)
from .train import (
    TrainConfig,
    ensemble_step,
    finetune,
    finetune_config,
    pretrain,
    pretrain_config,
    retrain_config,
    retrain_standalone,
    sandwich_finetune_step,
)

__version__ = "0.1.0"

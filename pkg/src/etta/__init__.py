"""Episodic training with task augmentation for domain generalization."""

from .domain_data import (
    Batch,
    DomainDataError,
    DomainDataset,
    LabeledSample,
    SplitSpec,
    generate_synthetic_domains,
    load_domain_dir,
    sample_batch,
    save_domain_dir,
    split_train_test,
)
from .episodes import MetaTask, MixRatioSchedule, apportion_counts, sample_task_mts, sample_task_ts
from .losses import (
    LossBreakdown,
    meta_objective,
    prototype_alignment_loss,
    sample_alignment_loss,
    symmetric_kl,
    task_loss,
)
from .metatrain import (
    DESK_SCALE,
    EpisodeLog,
    TrainConfig,
    clip_by_norm,
    inner_step,
    outer_step,
    train,
    train_deepall,
)
from .model import (
    IdentityBackbone,
    MLPBackbone,
    ModelParams,
    PrototypeSet,
    class_centroids,
    cosine_scores,
    embed,
    init_params,
    load_params,
    predict_probs,
    save_params,
)

__version__ = "0.1.0"

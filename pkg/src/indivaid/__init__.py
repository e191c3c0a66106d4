"""Two-stage animal re-identification toolkit.

Stage one trains an image-conditioned text description generator against
frozen image and text encoders; stage two merges the cached per-image
descriptions into one description per identity with a learnable attention
module while fine-tuning the image encoder. Evaluation ranks a gallery
against queries on cosine similarity and reports mAP and CMC.
"""

from .data import (
    AugmentConfig,
    BatchPlan,
    DatasetError,
    IdentityIndex,
    ImageRecord,
    augment,
    load_image,
    make_batches,
    scan_dataset,
    split_records,
)
from .encoders import (
    EncoderConfig,
    FeatureVector,
    ToyEncoders,
    image_to_tensor,
    make_encoders,
)
from .losses import (
    DEFAULT_FLAGS,
    cosine_sim,
    i2t_loss,
    i2tce_loss,
    identity_loss,
    similarity_matrix,
    smoothed_targets,
    stage1_loss,
    stage2_loss,
    t2i_loss,
    triplet_loss,
)
from .merge import AttentionMerge, DescriptionBank, build_description_bank, merged_descriptions
from .metrics import (
    MetricsReport,
    RankingResult,
    aggregate_runs,
    average_precision,
    cmc_at_k,
    evaluate_retrieval,
    rank_gallery,
    write_report,
)
from .prompts import (
    PromptState,
    assemble_prompt,
    assemble_prompts,
    describe_image,
    describe_images,
    init_prompt_state,
)
from .synthetic import make_synthetic_dataset
from .train import (
    TrainConfig,
    TrainResult,
    load_pipeline,
    lr_stage1,
    lr_stage2,
    run_baseline,
    run_stage1,
    run_stage2,
)

__version__ = "0.1.0"

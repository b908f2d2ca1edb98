"""Identity-conditioned diffusion data synthesis for re-identification.

The pipeline fine-tunes a (toy) text-to-image diffusion model per
identity with a prior-preservation objective, samples new images, keeps
those that pass a confidence-threshold filter, assembles them into an
annotated dataset, and pre-trains a retrieval backbone on the result.
"""

from .assembly import (
    DistributionCurve,
    RebalanceResult,
    assemble,
    compute_identity_cdf,
    rebalance,
    stats_report,
)
from .backends import GenerationBackend, ToyDiffusionBackend, get_backend, register_backend
from .config import PipelineConfig, serialize_config, validate_config, validate_config_file
from .denoiser import Denoiser, ToyDenoiser
from .diffusion import (
    FineTuneConfig,
    LossConfig,
    fine_tune,
    prior_preservation_grad,
    prior_preservation_loss,
    sample,
)
from .embedders import EmbeddingGallery, PixelProjectionEmbedder, ReidEmbedder, ToyJointEmbedder, build_gallery
from .errors import (
    BackendError,
    ConfigValidationError,
    DiffidError,
    IirExhaustedError,
    IntegrityError,
    InvalidArgument,
    NotFoundError,
    UnknownLabelError,
)
from .filters import (
    FilterModel,
    FilterReport,
    apply_threshold,
    calibrate_threshold,
    make_clip_scorer,
    make_reid_scorer,
    score_samples,
    train_id_classifier,
    train_reid_embedder,
)
from .manifest import DatasetManifest, ManifestRecord, read_manifest, write_manifest
from .metrics import (
    RetrievalInstance,
    RetrievalResult,
    compute_cmc,
    compute_map,
    evaluate_embedding_files,
    evaluate_embeddings,
    format_retrieval_report,
)
from .pipeline import IdentitySequence, IirRegistry, PipelineResult, run_identity, run_pipeline
from .pretrain import (
    FinetuneEvalConfig,
    PretrainCheckpoint,
    PretrainConfig,
    SubsetSpec,
    ToyBackbone,
    finetune_eval,
    pretrain,
    subsample,
    warmup_cosine_lr,
)
from .prompts import (
    CaptionerHandle,
    PromptBundle,
    allocate_iir,
    build_prompts,
    caption_sequence,
    default_iir_candidates,
    embed_prompt,
)
from .reference import ReferenceSet, build_reference_set, cache_reference_set, load_reference_set
from .samples import GeneratedSample
from .schedules import NoiseSchedule, add_noise, make_schedule

__version__ = "0.1.0"

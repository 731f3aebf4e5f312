"""Desk-scale text-conditional 3D volume generation pipeline."""

from .codec import CodecConfig, PatchConfig, TokenGrid, VolumeCodec, codec_loss, quantize
from .diffusion import (
    CascadeConfig,
    DiffusionSchedule,
    SRStage,
    SRStageConfig,
    forward_noise,
    run_cascade,
)
from .evaluation import (
    FeatureExtractor,
    MetricReport,
    VolumeClassifier,
    alignment_score,
    average_precision,
    auroc,
    compute_generation_metrics,
    frechet_distance,
    train_classifier,
)
from .masked import (
    MaskedBatch,
    MaskedConfig,
    MaskedTokenModel,
    MaskSchedule,
    extract_attention_maps,
    generate_tokens,
    mask_tokens,
)
from .phantoms import (
    AbnormalitySpec,
    PhantomDataset,
    PromptRecord,
    Volume,
    apply_window,
    build_dataset,
    clip_hu,
    make_phantom,
)
from .pipeline import RunConfig, batch_generate, generate_volume, load_pipeline, train_stage
from .text import TextEmbedding, TextEncoder, Vocabulary, default_vocabulary, tokenize

__version__ = "0.1.0"

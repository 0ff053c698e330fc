"""Continuous restoration of sharp face frames from a single motion-blurred image."""

from .dataio import (
    BlurSample,
    DatasetManifest,
    FrameSequence,
    ManifestRecord,
    ReorderedSequence,
    augment_sample,
    build_dataset,
    motion_reorder,
    read_manifest,
    synthesize_blur,
    write_manifest,
)
from .discriminator import DiscriminatorConfig, DiscriminatorOutput, UNetDiscriminator
from .errors import CheckpointError, InvalidInputError, NumericError
from .evaluation import EvalReport, evaluate_dataset, psnr, ssim, write_report
from .generator import (
    ControlAdaptiveBlock,
    ControlChannelAttention,
    ControlDeformConv,
    ControlField,
    DeblurGenerator,
    GeneratorConfig,
    MappingNetwork,
    MultiScaleOutput,
)
from .losses import LossWeights, RandomFeaturePyramid, charbonnier, discriminator_loss, generator_loss
from .training import TrainConfig, parse_config_file, train_loop, train_step

__version__ = "0.1.0"

"""Unsupervised HDR to LDR tone mapping for images and video."""

from .imaging import (Clip, LdrImage, LuminanceMap, RadianceImage, downsample,
                      extract_luminance, load_clip, load_ldr, load_radiance,
                      normalize_hdr, normalize_hdr_clip, reproduce_color,
                      save_radiance, write_clip, write_ldr)
from .model import (Critic, DiscriminatorConfig, GeneratorConfig,
                    TemporalBuffer, ToneMapGenerator, discriminator_features,
                    discriminator_score, generator_forward, generator_macs,
                    generator_penultimate, load_checkpoint, load_generator,
                    parameter_count, save_checkpoint, tfr_apply)
from .losses import (LossReport, LossWeights, dcl_d_objective, dcl_g_objective,
                     domain_cl_loss, instance_cl_loss, latent_code,
                     naturalness_inter, naturalness_intra,
                     naturalness_stats_dist, pearson_patch_corr, similarity,
                     structure_loss, total_generator_loss, tv_loss)
from .tmqi import TmqiResult, statistical_naturalness, structural_fidelity, tmqi, tmqi_q
from .flow import ConstantFlow, ExternalFlow, LucasKanadeFlow, warp
from .metrics import evaluate_testset, rwe
from .data import (BatchSampler, DatasetManifest, SampleConfig,
                   SyntheticClipSpec, TrainingBatch, build_manifest,
                   synth_clip_from_image)
from .training import (StageSchedule, TrainConfig, fixed_schedule, lr_schedule,
                       stage_weights, staged_schedule, train, train_step)
from .inference import TonemapPipeline

__version__ = "0.1.0"

"""Diffusion autoencoders for longitudinal stroke CT at desk scale."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import AdaGroupNorm, ada_spa_gn, ada_temp_gn, sinusoidal_encode
from .data import DataError, PairStrategy, load_records, read_manifest, split_patients
from .diffusion import (NoiseSchedule, build_schedule, forward_diffuse, invert_loop, reconstruct,
                        reverse_step, sample_loop)
from .encoder import EncoderConfig, OutcomeTask, build_encoder, build_head, encode, predict_outcome
from .evaluation import MetricReport, auc, fid, image_fid, mse, permutation_test_auc
from .synth import PhantomSpec, generate_cohort
from .trainer import NumericalError, TrainConfig, finetune, loss_simple, pretrain, train_direct
from .unet import ConditioningMode, UNetConfig, build_unet, predict_noise

__version__ = "0.1.0"

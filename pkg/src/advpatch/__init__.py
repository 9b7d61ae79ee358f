"""Location-optimized adversarial patch attacks and adversarial patch training."""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackOutcome, attack_with_restarts, default_suite, preset,
                     run_attack, universal_attack, worst_case_batch)
from .config import ExperimentConfig
from .data_io import (SynthSpec, load_checkpoint, load_dataset, make_synthetic, save_checkpoint,
                      save_dataset)
from .errors import AdvPatchError, ConfigError, FormatError, InputError
from .evaluation import (HeatmapGrid, RteReport, ablation_grid, location_heatmap,
                         patch_size_sweep, robust_test_error, test_error)
from .location import next_location
from .model import (ArchSpec, ClassifierParams, DatasetMeta, ImageBatch, TrainConfig,
                    build_model, cross_entropy, forward, input_gradient, param_gradient, predict,
                    sgd_step, small_cnn)
from .patches import (CenterRegion, Direction, PatchLocation, PatchState, apply_patch,
                      center_region, init_patch, shift_patch)
from .training import AugConfig, TrainMode, train

__all__ = [n for n in dir() if not n.startswith("_")]

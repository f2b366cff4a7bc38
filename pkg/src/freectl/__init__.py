"""One-step attention-query control for a toy diffusion transformer."""

from .control import (
    AttentionQuerySet,
    ControlPlan,
    controlled_generate,
    extract_iterative,
    extract_one_step,
    lcd_latent,
    run,
)
from .model import AttentionTap, DiTModel, InjectionError, ModelConfig, generate
from .numerics import DimensionError, SeededRng
from .scheduler import NoiseSchedule, SamplingGrid, build_grid, euler_step, forward_noise
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

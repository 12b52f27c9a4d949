from .gradcheck import GradCheckResult, grad_check
from .loss import DegenerateReferenceError, permutation_table, upit_loss, upit_loss_batch
from .model import (SEPARATOR_PRESETS, LinearMaskModel, SeparationSystem, SeparatorConfig,
                    SeparatorNet, separator_param_count)
from .train import (Example, StageConfigError, TrainConfig, TrainResult, TrainStage, batch_loss,
                    collate, default_stages, prepare_example, separate_utterance, train)

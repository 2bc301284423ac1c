"""Multi-head latent attention (MLA) and SVD upcycling from MHA/GQA on a numpy autodiff core."""

from .attention import (ATTENTION, MLA, AttentionGeometry, KvCache, MhaWeights, MlaWeights, absorb,
                        cache_footprint, mha_forward, mla_forward_absorbed, mla_forward_naive)
from .checkpoint import load_checkpoint, save_checkpoint
from .linalg import SvdResult, svd_full, svd_truncated
from .model import LmModel, ModelConfig, forward, generate, init_model, perplexity, upcycle_model
from .tensor import GradTape, Tensor
from .training import TrainPlan, distill_train, dpo_loss, dpo_train, kl_distill_loss, mixed_sft_loss, train_lm
from .upcycle import DynamicRanks, FixedRanks, parse_rank_spec, select_rank_dynamic, upcycle_attention

__version__ = "0.1.0"

"""Preference data, reward models, feedback learning and the 2x refiner."""
from .preferences import (DIMENSIONS, PerturbationConfig, PreferenceRecord, degrade_aesthetic, mutate_glyphs,
                          read_preferences, synthesize_preferences, write_preferences)
from .refiner import (RefinerConfig, RefinerRLHFConfig, build_refiner, hi_res_items, refine, refiner_rlhf,
                      train_refiner)
from .refl import (EMA, REFLConfig, REFLTrainer, RefinementConfig, RefinementResult, ema_update, failure_records,
                   iterative_refinement, refl_step, suite_accuracy, suite_prompts, weighted_reward)
from .reward import (DEGRADATIONS, LuminanceReward, RewardModel, RMTrainConfig, TextureRM, degrade,
                     evaluate_reward_model, pairwise_accuracy, ranking_loss, texture_pairs, train_reward_model,
                     train_texture_rm)

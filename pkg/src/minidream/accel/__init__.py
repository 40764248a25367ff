"""Guidance distillation, segmented consistency distillation and simulated quantization."""
from .guidance import DistillConfig, build_student, cfg_distill, cfg_target, distill_error, sample_w
from .quant import (BITS, GRANULARITIES, LayerPlan, QuantLinear, QuantPlan, activation_maxima, apply_quant,
                    base_scale, calib_loss, calibration_batches, fake_quant, finetune_scales, materialize,
                    passthrough_plan, plan_with_scales, quant_layers, quant_sensitivity_search, quantizable_layers,
                    roundoff_violation, sensitivity, smoothing_factors, uniform_plan)
from .tscd import (Discriminator, SegmentSchedule, TSCDLossConfig, few_step_sample, lower_boundary,
                   segment_boundaries, student_jump, teacher_solve, tscd_distill)

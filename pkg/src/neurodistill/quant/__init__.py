from .engine import (AuditReport, ClipSet, FloatOpTracer, FrontEnd, InferResult, QuantizedModel,
                     TracedArray, accumulator_bound, fold, from_checkpoint, int_infer, overflow_audit,
                     simulate, to_checkpoint)
from .primitives import (ADC, DyadicScale, FoldedLayerNorm, QuantSpec, alpha_grad, dequantize,
                         dyadic_approx, dyadic_array, fake_quant_weight, fold_layernorm, int_add, int_div,
                         int_div_scaled, int_layernorm, int_layernorm_float, isqrt, pact_clip_forward,
                         per_channel_weight_scales, qmax, quantize_sym, quantize_weight, requantize,
                         round_shift)
from .qat import PRESET_CLIPS, QATHyper, QuantHooks, calibrate_clips, qat_train, site_names, preset_clips

from .formats import (Checkpoint, Dataset, dump_bdck, dump_bdds, dump_bdte, load_bdck, load_bdds,
                      load_bdte, teacher_to_f32)
from .synth import (ClassSpec, SynthSpec, SyntheticTeacher, band_power_features, default_spec,
                    gen_synthetic, train_synthetic_teacher)

__all__ = [
    "Checkpoint", "Dataset", "dump_bdck", "dump_bdds", "dump_bdte", "load_bdck", "load_bdds",
    "load_bdte", "teacher_to_f32", "ClassSpec", "SynthSpec", "SyntheticTeacher",
    "band_power_features", "default_spec", "gen_synthetic", "train_synthetic_teacher",
]

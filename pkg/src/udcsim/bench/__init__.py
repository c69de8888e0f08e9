"""Dataset synthesis, evaluation, ablations and closed-loop experiments."""
from .ablation import AblationSpec, apply_generator_variant, build_generator_variant, build_restorer_variant, zeroed_branch
from .dataset import DatasetManifest, synthesize_dataset
from .evaluate import EvalReport, evaluate, evaluate_images
from .experiments import closed_loop_experiment, probe_degrader, run_ablation
from .schema import REPORT_SCHEMA

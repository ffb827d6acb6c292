"""Universal adversarial perturbation synthesis with a genetic algorithm.

A single noise tensor is evolved against a frozen image classifier so that,
added to many different inputs, it drives the misclassification rate up while
a decaying norm budget squeezes its visibility down.
"""

from .data import DatasetSource, batch_at, bound_sample, load_dataset, synthetic_dataset
from .engine import (
    GaConfig,
    Population,
    RunResult,
    Schedules,
    init_population,
    mutate,
    pixel_clean,
    run,
    schedule_linear,
    step_generation,
    tournament_select,
    uniform_crossover,
)
from .errors import (
    ConfigError,
    DatasetError,
    FileFormatError,
    OnnxError,
    ShapeError,
    UapError,
)
from .fitness import (
    EpsilonSchedule,
    FitnessReport,
    epsilon_at,
    evaluate_chromosome,
    evaluate_population,
    misclassification_rate,
    penalized_fitness,
)
from .oracle import (
    ClassifierOracle,
    LinearOracle,
    load_descriptor,
    load_linear_oracle,
    load_onnx_oracle,
    save_linear_oracle,
)
from .reporting import (
    GenerationRecord,
    append_record,
    export_attack_grid,
    export_perturbation_image,
    read_records,
    render_convergence_svg,
)
from .tensors import (
    DEFAULT_NORMALIZATION,
    ImageBatch,
    NormalizationSpec,
    Perturbation,
    PerturbationBounds,
    apply_perturbation,
    compute_bounds,
    l2_norm_255,
    load_perturbation,
    mse_255,
    save_perturbation,
)

__version__ = "0.1.0"

"""pitomo: physics-informed tomographic surrogate toolkit.

Builds contribution matrices for line-integral diagnostics, generates
synthetic peaked-field datasets with exact measurements, trains CNN
surrogates with an optional back-projection consistency loss term, and
evaluates reconstructions in both image space and measurement space.
"""

__version__ = "0.1.0"

from .geometry import (
    Grid,
    Chord,
    ContributionMatrix,
    build_grid,
    trace_chord,
    build_cmatrix,
    forward_project,
    load_chords_json,
    save_chords_json,
)
from .datastore import (
    Dataset,
    DatasetManifest,
    QualityReport,
    epsilon_j,
    assess_quality,
    split,
    content_hash,
    write_dataset,
    read_dataset,
    write_cmatrix,
    read_cmatrix,
)
from .phantom import (
    PhantomRule,
    NoiseSpec,
    PeakParams,
    PhantomSample,
    sample_field,
    generate_sample,
    generate_dataset,
)
from .network import (
    ModelSpec,
    SurrogateNet,
    build_model,
    init_weights,
    count_parameters,
    param_table,
    fusion_gradient_probe,
    save_checkpoint,
    load_checkpoint,
)
from .objective import (
    LossConfig,
    PilfResult,
    loss1,
    loss2,
    pilf,
    metric_E1,
    metric_E2,
    MetricsReport,
    metrics_report,
)
from .trainer import (
    TrainConfig,
    TrainHistory,
    cosine_lr,
    train,
    predict_fields,
    EvalReport,
    evaluate,
)

__all__ = [
    "__version__",
    "Grid",
    "Chord",
    "ContributionMatrix",
    "build_grid",
    "trace_chord",
    "build_cmatrix",
    "forward_project",
    "load_chords_json",
    "save_chords_json",
    "Dataset",
    "DatasetManifest",
    "QualityReport",
    "epsilon_j",
    "assess_quality",
    "split",
    "content_hash",
    "write_dataset",
    "read_dataset",
    "write_cmatrix",
    "read_cmatrix",
    "PhantomRule",
    "NoiseSpec",
    "PeakParams",
    "PhantomSample",
    "sample_field",
    "generate_sample",
    "generate_dataset",
    "ModelSpec",
    "SurrogateNet",
    "build_model",
    "init_weights",
    "count_parameters",
    "param_table",
    "fusion_gradient_probe",
    "save_checkpoint",
    "load_checkpoint",
    "LossConfig",
    "PilfResult",
    "loss1",
    "loss2",
    "pilf",
    "metric_E1",
    "metric_E2",
    "MetricsReport",
    "metrics_report",
    "TrainConfig",
    "TrainHistory",
    "cosine_lr",
    "train",
    "predict_fields",
    "EvalReport",
    "evaluate",
]

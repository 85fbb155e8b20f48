"""NormLIME: aggregating local sparse surrogates into global and per-class salience."""

from .exceptions import (
    CapabilityError,
    DataError,
    DegenerateWeightsError,
    DivergenceError,
    EmptyClassError,
    FormatError,
    InputShapeError,
    InvalidSalienceError,
    NormLimeError,
    VersionError,
)
from .model import CallablePredictor, MLPClassifier, TrainConfig, load_model, save_model
from .local_surrogate import (
    LocalExplanation,
    LocalSurrogateExplainer,
    PerturbationConfig,
    SurrogateConfig,
    explain_instance,
)
from .salience import (
    ExplanationSet,
    NormLIME,
    SalienceMap,
    normlime,
    normlime_for_class,
    splime_l2,
)
from .kar import KarConfig, KarReport, run_kar

__version__ = "0.1.0"

"""Online photometric calibration and joint photometric-geometric pose refinement."""

from .calibrator import (
    CalibrationConfig,
    CalibrationState,
    OnlineCalibrator,
    Phase,
    estimate_crf,
    estimate_vignette,
    feed_frame,
    run_pipeline,
    validate_exposure,
)
from .errors import (
    AlignmentError,
    DataError,
    DomainError,
    EmptyResidualError,
    FormatError,
    GenerationError,
    ModelError,
    NotReadyError,
    ParseError,
    PhotocalError,
    RecordError,
    SequenceError,
    StateError,
    UndefinedEnergyError,
    UnobservableError,
)
from .evaluation import Trajectory, align_trajectories, ate_rmse, drift_errors, evaluate_run
from .geometry import PinholeCamera, PoseSE3
from .photometry import (
    CalibrationSnapshot,
    ExposureRecord,
    Frame,
    InverseResponse,
    IrradianceImage,
    ValidationReport,
    VignetteModel,
    eval_inverse_response,
    eval_vignette,
    rectify_frame,
)
from .pose import (
    PoseConfig,
    PyramidContext,
    ResidualStats,
    SceneObservation,
    geometric_residuals,
    joint_energy,
    optimize_pose,
    photometric_residuals,
    utility_k,
)
from .synth import SceneSpec, SyntheticScene, generate_scene, render_frame
from .tracker import CorrespondencePair, FeatureTracker, PairSet, TrackSet

__version__ = "0.1.0"

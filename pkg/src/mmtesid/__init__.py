"""Physics-informed Gaussian-process identification of linear structural models.

Responses are modelled as a physics-based mean plus a Gaussian process whose
covariance combines a multi-modal trigonometric-exponential (MMTE) kernel
with the tangent covariance of uncertain model parameters.  Data are
processed partition by partition, with the hyper-parameters following a
random walk across partitions.
"""

__version__ = "0.1.0"

from ._accel import BACKEND
from .exceptions import ConvergenceWarning, FactorizationError, ValidationError
from .kernel import (CholeskyFactorization, MmteParams, TimeGrid, TruncatedFactorization,
                     assemble_block, factorize, kernel_psd, kernel_value, svd_truncate,
                     tangent_covariance)
from .gaussian import (GaussianDist, JointGaussianBlocks, condition, log_density,
                       marginalize_linear, mixture_moments)
from .series import Excitation, TimeSeries, stack_channels, unstack_channels
from .structure import (AffineStiffness, ModalDamping, RayleighDamping, StructuralSystem,
                        build_benchmark_frame, build_shear_frame, modal_damping_matrix,
                        modal_properties, response_sensitivities, simulate_response)
from .data import (ExperimentConfig, Partition, add_measurement_noise, draw_theta_sequence,
                   generate_gwn_excitation, load_config, partition_dataset, read_series,
                   simulate_segments, write_series)
from .spectral import SpectrumEstimate, residual_psd, suggest_modes
from .inference import (FitOptions, HyperState, PartitionState, PredictiveResult,
                        RandomWalkCov, conditional_predictive, estimate_Q, fit_partition,
                        initial_delta, negative_log_likelihood, noise_only_prediction,
                        parameter_summary, predict_response, run_pipeline, sample_next_delta)
from .order import bic_score, score_order, select_order

__all__ = [name for name in dir() if not name.startswith("_")]

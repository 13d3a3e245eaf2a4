"""Deterministic federated-learning simulator with spectral learning metrics.

Implements effective-rank-weighted model aggregation (FedER) next to FedAvg,
inverse-variance (precision) weighting and FedProx, on top of a small
numpy-only conv/dense training stack. Everything is seeded and reruns are
bit-identical.
"""
from .cli import (DataConfig, ExperimentConfig, ModelConfig, OptimizerConfig,
                  parse_config, run_experiment)
from .data import Dataset, PartitionPlan, generate_blobs, partition, split_train_test
from .errors import ConfigError
from .federation import (STRATEGIES, AggregationWeights, ClientState,
                         DegenerateLayerError, FederationConfig, RoundReport,
                         aggregate_fedavg, aggregate_feder_improved,
                         aggregate_feder_naive, aggregate_precision, client_update,
                         client_update_prox, compute_layer_alphas, compute_layer_ers,
                         make_clients, read_rounds_csv, run_round, write_rounds_csv)
from .linalg import (Matrix, MatrixTooLargeError, SingularSpectrum, Tensor4,
                     frobenius_norm, refold, svd_values, unfold)
from .metrics import (MetricReport, ZeroSpectrumError, condition_number,
                      denoise_spectrum, effective_rank, layer_effective_rank,
                      metric_report, model_effective_rank, normalize_spectrum,
                      stable_rank)
from .nn import (LrSchedule, MicroConvNet, ModelParams, OptimizerState,
                 optimizer_step, schedule_lr)
from .serialize import (load_dataset, load_params, load_tensors, save_dataset,
                        save_params, save_tensors)

__version__ = "0.1.0"

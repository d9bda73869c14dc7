"""Deterministic simulator of ledger-mediated federated learning with contribution records."""

from .aggregation import AggregationConfig, fed_avg, importance_from_sample_counts
from .contribution import (ContributionReport, federated_contribution, frobenius_norm, layer_delta,
                           relative_contributions, to_fixed_point)
from .crypto import decrypt_model, encrypt_model, generate_round_keypair
from .data import Dataset, PartitionPlan, add_gaussian_noise, load_idx, partition, subsample, synth_dataset
from .ledger import Ledger, verify_chain
from .model import (ModelWeights, TrainConfig, adam_step, backward, evaluate_accuracy, forward,
                    init_model, loss_sparse_ce, train_local)
from .protocol import AggregationServer, FederatedClient, Simulation, build_simulation
from .scenario import ScenarioConfig, emit_summary, run_scenario

__version__ = "0.1.0"

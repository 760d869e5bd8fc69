"""Desk-scale simulator for secure distributed fine-tuning by model slicing:
trusted/untrusted execution partitioning, one-time-pad masked linear algebra,
federated adapter aggregation, and split fine-tuning with head sparsification.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .data import Dataset, SyntheticTask, gen_dataset, load_dataset, save_dataset
from .errors import (ContractError, DimensionError, MaskReuse, ProtocolError,
                     SecurityBreach)
from .federation import (RunResult, SplitArtifacts, aggregate, local_train_step,
                         predict_with_server, run_baseline, run_centralized,
                         run_experiment, run_method1, run_method2)
from .harness import bench, compare, run, write_run_outputs
from .masking import (MaskDistribution, MaskPad, MaskedTensor, PadLedger, gen_mask,
                      mask, unmask_affine, unmask_matmul)
from .model import (LoraAdapter, PrefixEmbedding, SpfPartition, TransformerClassifier,
                    TransformerConfig, TuningConfig, count_trainable_params,
                    load_checkpoint, lora_forward, save_checkpoint, spf_forward,
                    spf_select_heads)
from .optim import Adam, Sgd
from .partition import (AuditReport, CostModel, CostReport, DomainTensor, Method,
                        PartitionPlan, SecureRuntime, TensorState, TrustDomain,
                        audit_taint, build_plan, build_workload, secure_forward,
                        simulate_cost)
from .tensor import PrecisionMode, Rng, Tensor, backward, precision, quantize_half

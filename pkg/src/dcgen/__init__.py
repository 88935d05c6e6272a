"""Training engine for two-tower deep candidate generation with queue-based
contrastive debiasing, exposure-bias simulation, and tabular verification of
the contrastive/IPW optimum equivalence."""

__version__ = "0.1.0"

from .corpus import (ClickRecord, ClickSequence, Dataset, EvalCase,
                     GroundTruth, Instance, Item, ItemCatalog, WorldConfig,
                     build_instances, empirical_item_distribution,
                     leave_last_split, load_catalog, load_interactions,
                     make_world_catalog, simulate_biased_logs)
from .encoder import (CandidateRef, CandidateSet, Gradients, Parameters, Tape,
                      batch_backward, batch_forward, encode_item, encode_user,
                      similarity)
from .losses import (CandidateLogits, LossOutput, contrastive_loss,
                     full_softmax_loss, ipw_loss, sampled_softmax_loss)
from .oracle import (ProbTable, fit_tabular_contrastive, fit_tabular_ipw,
                     finite_difference_check, kl_divergence,
                     target_distribution_r, total_variation)
from .samplers import (FifoQueue, Proposal, enqueue_batch,
                       in_batch_candidates, make_proposal, queue_candidates,
                       sample_negatives)
from .trainer import (StepCounters, TrainConfig, TrainHistory, apply_gradients,
                      run_workers, train, train_step, u2u_step)

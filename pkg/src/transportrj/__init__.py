"""Transport-map reversible-jump MCMC for trans-dimensional inference.

Train (conditional) normalizing-flow transport maps by reverse-KL
variational inference, then use them as reversible-jump proposals
across models of different dimension.  Includes importance-sampling
evidence estimates and acceptance-based mixing diagnostics.
"""

__version__ = "0.1.0"

from .autodiff import MlpParams, Node, Tape, finite_difference
from .config import ChainConfig, ConfigError, FlowConfig, RunConfig, preset
from .diagnostics import (BbeAccumulator, InsufficientPairData, bbe_estimate,
                          build_eval_set, chain_thinning_source,
                          conditional_mh_source,
                          exact_map_source, flow_mh_source, pair_alphas,
                          running_model_prob)
from .flows import (ConditionalBase, CouplingLayer, FlowStack, SasExactMap,
                    ScalarFlow, load_checkpoint, save_checkpoint)
from .reference import ReferenceDist, counter_uniform, derive_seed
from .rjmcmc import (ChainRecord, CtpKernel, NonFiniteTargetError, Proposal,
                     StandardSaturatedKernel, TransModelState, TrjKernel,
                     initial_state, run_chain, run_chains, within_model_update)
from .targets import (ModelSpace, TargetFamily, fa_family, fa_load_data,
                      fa_synthetic_data, gaussian_toy_family, sas_exact_map,
                      sas_family, vs_family, vs_simulate_data)
from .vi import (Adam, ElboTrace, EvidenceEstimate, TrainerConfig,
                 TrainingError, conditional_train, estimate_evidence,
                 negative_elbo, rejection_free_index_proposal, sgvi_train)

__all__ = [name for name in dir() if not name.startswith("_")]

"""MDL/Bayesian symbolic regression with a learnability phase-transition lab."""

from .trees import (ExprTree, OpVocabulary, ParseError, TreeError,
                    canonical_key, canonicalize, count_ops, default_vocabulary,
                    evaluate, evaluate_batch, param_count, parse_text, to_text)
from .priors import (PriorConfig, PriorError, default_prior, load_prior,
                     model_complexity, trivial_models)
from .inference import (Dataset, DescriptionLength, FitCache, FitOptions,
                        FitResult, Provenance, bic, description_length,
                        fit_params, log_likelihood, predicted_dl_true,
                        predicted_dl_trivial)
from .sampler import (ChainState, MoveProposal, SampleTrace, SamplerOptions,
                      enumerate_models, metropolis_step, posterior_table,
                      propose, sample, tempered_sample)
from .learnability import (Delta2Estimate, PlantedModel, SweepResult,
                           TransitionInfo, TrialRecord, estimate_delta2,
                           generate_dataset, learnability_curve,
                           learnability_trial, rho_crossing, rmse,
                           scaled_collapse, transition_noise_approx,
                           transition_noise_exact)
from .benchmarks import benchmark_models, model_a, model_b

__version__ = "0.1.0"

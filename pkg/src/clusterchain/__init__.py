"""Simulation and closed-form analysis of iterated cluster point processes."""
from .core import (BernoulliCount, ClusterChainError, ConfigError, DomainError, ExistenceError,
                   FixedCount, GaussianDisplacement, NegativeBinomialCount, PointPattern,
                   PoissonCount, RandomStream, UniformBallDisplacement, Window,
                   cluster_dispersion_c, grid_pattern, sample_displacement, sample_offspring_count)
from .chain import ChainParams, GenerationTrace, intensity_after_n, simulate_chain, step_generation
from .equilibrium import (EquilibriumConfig, Family, family_load_bound, horizon, simulate_equilibrium,
                          simulate_families, simulate_family)
from .noise import (GaussianDPP, PoissonNoise, WeightedPermanental, pcf_coefficient,
                    sample_gaussian_dpp, sample_noise, sample_poisson, sample_weighted_permanental)
from .theory import (GenerationModel, MixtureKernel, PcfModelConfig, SameSystem, gamma_index,
                     mixture_convolve, pcf_evaluate, pcf_generation_n, pcf_limit, pcf_step)
from .summaries import (EnvelopeResult, SummaryCurve, empirical_pcf, global_rank_envelope,
                        j_function, l_function, pooled_pcf)

__version__ = "0.1.0"

"""Mean-field networks of spiking neurons: particles, Volterra rates, steady states and spectra."""
from .errors import (BracketError, ConvergenceError, ModelError, NumericalError,
                     StepSizeError)
from .fokkerplanck import FPResult, FPState, fp_solve, fp_step
from .invariant import (U, gamma, stationarity_residual, stationary_measure,
                        steady_states)
from .measures import GridMeasure, check_f_moment, l1_distance, moment
from .model import (Affine, Constant, ExpApproach, ModelSpec, Power, Sampled,
                    TabulatedConvex, TabulatedLipschitz, TimeGrid, a_bar,
                    beta_sup, flow_at, psi, r_bar, sigma_a)
from .particle import ParticleConfig, ParticleTrace, empirical_rate, simulate
from .spectral import (SpectralReport, cone_bound, fit_decay_rate, lambda_star,
                       laplace_H, laplace_K)
from .volterra import (KernelMatrix, RateSolution, convolve, kernel_H, kernel_K,
                       marginal_law, perturbation_reconstruct, picard_closure,
                       resolvent, solve_rate, volterra_solve)

__version__ = "0.1.0"

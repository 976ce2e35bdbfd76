"""Desk-scale laboratory for gated residual diffusion models.

Core pieces: a minimal float64 autodiff engine, gated residual stacks in
flow-shaped and U-shaped arrangements, forward noising schedules with the
reverse probability-flow ODE, residual-sensitivity diagnostics, toy score
model training, and sample-based distribution metrics.
"""

from .autodiff import (NonFiniteError, ShapeError, Tape, Tensor, backward,
                       finite_difference_grad, forward_op, vjp)
from .dynamics import (DiscreteSchedule, OuSchedule, ParameterizedSchedule,
                       ScoreOracle, Trajectory, VeSchedule, VpSchedule,
                       analytic_score, analytic_score_t, ddpm_forward,
                       euler_solve, forward_sde_step, heun_solve, make_rng,
                       pf_ode_rhs, sde_vs_pfode_marginal_check)
from .residual import (GateParams, Mapper, MapperSpec, ScoreNet, StackModel,
                       flow_stack_forward, gating_residual_ode_rhs,
                       mrs_forward, time_embedding, u_stack_forward,
                       variant_forward, with_pinned_gates)
from .sensitivity import (GraphOdeMapper, LinearOdeMapper, SensitivityReport,
                          SensitivityTrace, adjoint_vs_autodiff_check,
                          integrate_sensitivity_gated,
                          integrate_sensitivity_vanilla, sensitivity_ode_rhs_gated,
                          sensitivity_ode_rhs_vanilla, sensitivity_report)
from .datasets import DatasetSpec, oracle_for, sample_dataset
from .metrics import (MetricReport, eval_generated, histogram_kl, mmd_rbf,
                      sample_reverse, sliced_wasserstein)
from .training import (Checkpoint, CheckpointError, DivergenceError, EmaState,
                       OptimState, TrainSettings, arch_of, ema_model, ema_update,
                       finetune_gates, load_checkpoint, load_params,
                       loss_score_matching, loss_sensitivity_reg, loss_simple,
                       model_from_arch, optimizer_step, save_checkpoint,
                       train_score_model, unit_input_states)

__version__ = "0.1.0"

"""Diffusion-model policies for offline reinforcement learning.

Builds a conditional denoising model as the policy class, trains it against
offline data with TD3-style, advantage-weighted, or expectile-based policy
improvement, and samples actions either with the stochastic reverse chain or
with a deterministic few-evaluation ODE integrator. Training avoids the
sampling chain entirely via a one-evaluation action approximation, so its
cost does not grow with the number of diffusion steps.
"""

from .algorithms import (AlgoConfig, TrainConfig, TrainState, crr_advantage,
                         elbo_coefficient, init_train_state, load_train_state,
                         save_train_state, td3_policy_loss, train, train_step,
                         weight_fn, weighted_elbo_loss, weighted_regression_loss)
from .critic import (CriticParams, DoubleQ, ValueFunction, critic_value,
                     expectile_loss, iql_q_loss, iql_value_loss, min_q, td_loss)
from .envdata import (OfflineDataset, SyntheticEnv, env_step, generate_dataset,
                      greedy_action, load_dataset, make_env, normalize_states,
                      optimal_score, save_dataset)
from .errors import FormatError, NumericError, ParameterError, ShapeError
from .harness import (BenchReport, EvalConfig, EvalReport, bench_training,
                      eas_select, evaluate_policy, oms_metric, rat_metric)
from .nn import (AdamState, NoiseNetParams, adam_step, clip_grad_norm,
                 init_critic, init_noise_net, load_checkpoint, mish,
                 polyak_update, save_checkpoint, sinusoidal_embed)
from .policy import (DiffusionPolicy, SamplerConfig, approx_action_batch,
                     diffusion_bc_loss, eval_count, eval_sample,
                     reset_eval_count, sample_action_ddpm, sample_action_ode)
from .schedule import (NoiseSchedule, approximate_action, build_schedule,
                       ddpm_reverse_step, default_schedule, forward_diffuse,
                       posterior_mean)

__version__ = "0.1.0"

"""Calibration: bandit BC coverage, TD3 guidance shift, CRR/IQL scores."""
import numpy as np, time
import diffpol as dp
from diffpol.algorithms import TrainConfig, AlgoConfig, init_train_state, train_step
from diffpol.harness import EvalConfig, evaluate_policy

env = dp.make_env("bimodal-bandit")
ds = dp.generate_dataset(env, {"mode0": 0.5, "mode1": 0.5}, 20000, seed=7)
print("anchors:", dp.optimal_score(env))

m1, m2 = env.mode_centers
w = env.mode_width

def mode_stats(samples):
    d1 = np.linalg.norm(samples - m1, axis=1)
    d2 = np.linalg.norm(samples - m2, axis=1)
    return (np.mean(d1 <= w), np.mean(d2 <= w), np.mean((d1 <= w) | (d2 <= w)))

scfg = dp.SamplerConfig()

def run(algo_name, lam, steps, tag, batch=256):
    cfg = TrainConfig(epochs=1, iters_per_epoch=steps, batch_size=batch, hidden_dim=64, seed=0)
    algo = AlgoConfig(algo=algo_name, policy_weight=lam)
    st = init_train_state(cfg, algo, 2, 2)
    t0 = time.perf_counter()
    for i in range(steps):
        train_step(st, ds, cfg, algo, scfg)
    dt = time.perf_counter() - t0
    samp = dp.eval_sample(st.policy, np.tile(np.zeros(2), (4000, 1)), scfg, np.random.default_rng(11))
    f1, f2, fe = mode_stats(samp)
    rep = evaluate_policy(st.policy, st.dq, env, EvalConfig(eas_n=10, episodes=200, seed=1))
    print(f"{tag}: {dt:.0f}s  frac_m1={f1:.3f} frac_m2={f2:.3f} either={fe:.3f} score={rep.normalized_score:.1f}")
    return st

run("td3bc", 0.0, 6000, "BC 6k")
run("td3bc", 1.0, 10000, "TD3 lam=1 10k")
run("crr", 1.0, 10000, "CRR 10k")
run("iql", 1.0, 10000, "IQL 10k")

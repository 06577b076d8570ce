"""Smoke test for the `vpd` extension module.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/vpd-*.whl
"""

import math
import sys
import tempfile

import vpd

CONFIG = """
method = "vpd"
beta = 0.1
total_batches = 10
rollouts_per_prompt = 4
prompts_per_batch = 4
estep_frequency = 2
eval_every = 5
seed = 0

[env]
family = "keyed-copy"
vocab_size = 3
prompt_len = 2
response_len = 2
transform_key = 1
"""


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    # scalar helpers
    adv = vpd.grpo_advantages([1.0, 1.0, 0.0, 0.0])
    assert all(close(abs(a), 1.0, 1e-5) for a in adv), adv
    assert close(vpd.reweight_advantage(-1.0, -0.3, 1.0, 0.2), -1.2)
    assert vpd.dpo_pair_loss(0.4, -0.2) <= vpd.decoupled_bound(0.4, -0.2)

    # exact oracle on a two-token alphabet, length one
    prior = vpd.DistTable.uniform(2, 1)
    star, log_z = vpd.tilt(prior, [1.0, 0.0], 1.0)
    assert close(log_z, math.log((math.e + 1.0) / 2.0))
    assert close(star.probs[0], math.e / (math.e + 1.0))
    j = vpd.objective(star, prior, [1.0, 0.0], 1.0)
    assert close(j, log_z)
    assert close(vpd.exact_kl(star, star), 0.0)

    env = vpd.EnvSpec.keyed_copy(3, 2, 1)
    x = env.all_prompts()[0]
    assert env.reward(x, env.target(x)) == 1.0

    cfg = vpd.TrainConfig.from_toml(CONFIG, ["seed=3"])
    assert cfg.seed == 3 and cfg.method == "vpd"
    try:
        vpd.TrainConfig.from_toml(CONFIG, ["bogus_key=1"])
    except ValueError as e:
        assert "bogus_key" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    trainer = vpd.Trainer(cfg)
    first = trainer.run_batch()
    assert first["metrics"]["batch"] == 1
    rest = trainer.run_all()
    assert [r["batch"] for r in rest] == list(range(2, 11))
    assert trainer.is_finished
    assert 0.0 <= trainer.evaluate() <= 1.0

    again = vpd.Trainer(cfg)
    replay = [again.run_batch()["metrics"] for _ in range(10)]
    assert replay[1:] == rest, "same seed must replay exactly"

    records = vpd.oracle_check(vpd.TrainConfig.from_toml(CONFIG), trials=10, gradient_instances=2)
    failed = [r["name"] for r in records if not r["passed"]]
    assert not failed, failed

    with tempfile.TemporaryDirectory() as d:
        summary = vpd.run_experiment(cfg, d)
        assert summary["batches"] == 10

    print("vpd smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Teaching a six-voxel walker to move
===================================

A 2x3 robot made only of actuators learns to crawl to the right.  We first
measure what random actuation achieves, then run a short PPO schedule and
compare.  Takes a few minutes on one CPU core.
"""

import numpy as np

from heteromorpheus import EnvConfig, ModelConfig, PPOConfig, TrainRunConfig, evaluate, parse_grid, train
from heteromorpheus.env import random_policy_baseline

# 3 = horizontal actuator, 4 = vertical actuator; row 0 is the top row
walker = parse_grid({"name": "walker", "grid": [[3, 4, 3], [4, 3, 4]]})
env = EnvConfig()

baseline = random_policy_baseline(walker, env, episodes=32, seed=0)
print(f"random actuation: {baseline:+.3f} m per episode")

# a desk-sized network: 32-wide embeddings, two graph-transformer layers
model = ModelConfig(embed_dim=32, num_layers=2, num_heads=2)
result = train(TrainRunConfig([walker], model, PPOConfig(total_updates=30), env, seed=0))

curve = np.array([m["mean_return_overall"] for m in result.metrics])
for start in range(0, len(curve), 10):
    print(f"updates {start + 1:3d}-{start + 10:3d}: mean return {curve[start:start + 10].mean():+.3f}")

# the trained policy, acting with its mean action
final = evaluate(result.checkpoint, walker, episodes=3)
print(f"deterministic policy: {final.mean_return:+.3f} m per episode")

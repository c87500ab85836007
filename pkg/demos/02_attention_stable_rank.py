"""
Where does a voxel look?
========================

Each node attends only to its four grid neighbours.  Over an episode the
attention pattern tightens and relaxes with the gait; the stable rank of
the head-averaged attention matrix summarises how spread out it is.  We
train briefly, trace one episode and print the matrices at the most and
least concentrated moments.
"""

import numpy as np

from heteromorpheus import ModelConfig, PPOConfig, TrainRunConfig, parse_grid, train, trace_attention

walker = parse_grid({"name": "walker", "grid": [[3, 4, 3], [4, 3, 4]]})
result = train(TrainRunConfig([walker], ModelConfig(embed_dim=32, num_layers=2, num_heads=2),
                              PPOConfig(total_updates=10), seed=1))

trace = trace_attention(result.checkpoint, walker, steps=128)
series = trace.series[0]
print(f"layer 0 stable rank: min {series.min():.3f}, mean {series.mean():.3f}, max {series.max():.3f}")
print(f"{trace.peaks[0].sum()} peaks and {trace.valleys[0].sum()} valleys (window of 5 steps)")

labels = trace.records[0].labels


def show(step):
    matrix = next(r.matrix for r in trace.records if r.layer == 0 and r.step == step)
    print(f"\nstep {step}, stable rank {series[step]:.3f}   rows: target voxel (row,col)")
    print("       " + " ".join(f"{l:>5}" for l in labels))
    for label, row in zip(labels, matrix):
        print(f"{label:>5}  " + " ".join("    ." if w == 0 else f"{w:5.2f}" for w in row))


# the most spread-out and the most concentrated attention of the episode
show(int(np.argmax(series)))
show(int(np.argmin(series)))

"""
Controlling robots it has never seen
====================================

One network controls every morphology, because its parameters are tied to
voxel types and neighbour relations rather than to robot size.  We train on
three robots, run the checkpoint on three different ones without any update,
then fine-tune briefly.
"""

from pathlib import Path

from heteromorpheus import ModelConfig, PPOConfig, TrainRunConfig, load_morphology_set, train, transfer

data = Path(__file__).resolve().parent.parent / "data"
train_set = load_morphology_set(data / "train_set.json")
held_out = load_morphology_set(data / "heldout_set.json")
print("training on:", ", ".join(f"{g.name} ({g.num_voxels} voxels)" for g in train_set))
print("held out:   ", ", ".join(f"{g.name} ({g.num_voxels} voxels)" for g in held_out))

pre = train(TrainRunConfig(train_set, ModelConfig(embed_dim=32, num_layers=2, num_heads=2),
                           PPOConfig(total_updates=20), seed=0))

report = transfer(pre.checkpoint, held_out, mode="fine-tune", budget=10, seed=0)
for row in report["per_morphology"]:
    print(f"{row['name']:>8}: zero-shot {row['zero_shot']:+.3f}   after 10 updates {row['fine_tuned']:+.3f}")

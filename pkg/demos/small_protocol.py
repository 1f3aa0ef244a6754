# %% [markdown]
# # A miniature experiment through the command line
#
# Runs the full pipeline on a reduced population (short walks, a coarse
# weight grid, two protocol rounds) and reads back the report. The settings
# are overrides of the default config, exactly as one would pass them to the
# `wigait` command.

# %%
import json
from pathlib import Path

from wigait.cli import main
from wigait.features import read_feature_table

OUT = Path("demo_out/pipeline")

# %%
args = [
    "pipeline", "--out", str(OUT), "--seed", "3",
    "--train-per-class", "3", "--pool-per-class", "7",
    "--set", "scene.walk_length=3.0",
    "--set", "adapt.grid_size=5", "--set", "adapt.repeats=3",
    "--set", "protocol.rounds=2",
]
assert main(args) == 0

# %%
for row in read_feature_table(OUT / "train" / "features.csv"):
    print(f"{row.subject_id:<12}{row.label:<10}{row.avg_speed:6.2f} m/s{row.gait_cycle:6.2f} s")

# %%
report = json.loads((OUT / "report.json").read_text())
print("per-class accuracy:", report["per_class_accuracy"])
for r in report["rounds"]:
    print(f"round {r['round']}: weight {r['class_weight']:.3g}, per-class {r['per_class']:.3f}")

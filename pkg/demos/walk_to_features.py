# %% [markdown]
# # From a synthetic walker to gait features
#
# One healthy-looking walker is synthesized, placed in the default two-antenna
# scene and simulated at 500 packets per second. The Doppler spectrogram of the
# channel magnitude yields a torso-speed curve and six gait features that we
# compare against the mesh (video) ground truth.

# %%
from pathlib import Path

import numpy as np

from wigait.dsp import render_png, spectrogram_pipeline
from wigait.features import FEATURE_NAMES, extract_rf_features, extract_video_features, torso_speed
from wigait.kinematics import place_in_scene, resample
from wigait.rfsim import ScatteringParams, simulate_walk
from wigait.scene import SceneConfig
from wigait.walker import SyntheticGaitParams, synthesize_walker

OUT = Path("demo_out")
OUT.mkdir(exist_ok=True)

# %%
scene = SceneConfig()
gait = SyntheticGaitParams(mean_speed=1.1, gait_cycle=1.1, step_length=0.6)
seq = synthesize_walker(gait, duration=scene.walk_length / gait.mean_speed, fps=50, seed=2)
seq = resample(place_in_scene(seq, scene), 250.0)
print(f"{len(seq.frames)} frames at {seq.fps:g} fps, psi = {scene.psi():.3f}")

# %% [markdown]
# The Born sum is evaluated for every packet; this is the slow step (a few
# seconds on one core).

# %%
rec = simulate_walk(seq, scene, ScatteringParams(), seed=0)
print(f"{rec.streams.shape[1]} packets at {rec.sample_rate:g} Hz")

# %%
sg = spectrogram_pipeline(rec)
render_png(sg, OUT / "walker_spectrogram.png")
ridge = sg.freqs[np.argmax(sg.magnitudes, axis=1)]
print(f"{sg.n_frames} frames, median ridge {np.median(ridge):.1f} Hz, "
      f"expected about {scene.psi() * gait.mean_speed / scene.wavelength:.1f} Hz")

# %%
curve = torso_speed(sg, scene)
print(f"torso speed: mean {curve.speeds.mean():.3f} m/s, "
      f"p10 {np.percentile(curve.speeds, 10):.3f}, p90 {np.percentile(curve.speeds, 90):.3f}")

# %%
rf = extract_rf_features(sg, scene)
video = extract_video_features(seq)
print(f"{'feature':<16}{'rf':>10}{'video':>10}")
for name, a, b in zip(FEATURE_NAMES, rf.values(), video.values()):
    print(f"{name:<16}{a:>10.3f}{b:>10.3f}")

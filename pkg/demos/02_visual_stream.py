"""The synthetic lip-feature stream and its alignment to the mel rate.

25 Hz frames carry a frozen 32-dim codebook embedding of the character
under the frame midpoint, cross-faded at boundaries, plus small jitter.
The stream never sees acoustic noise.

Run:  python3 demos/02_visual_stream.py
"""

import numpy as np

from avlora.audio import synth_utterance
from avlora.fusion import align_rates
from avlora.video import codebook, synth_video

text = "hat"
speech = synth_utterance(text)
video = synth_video(text, len(speech), seed=4)
print(f"{text!r}: {len(speech)} audio samples -> {video.n_frames} video frames"
      f" at 25 Hz, {video.frames.shape[1]}-dim")

cb = codebook()
chars = "abcdefghijklmnopqrstuvwxyz "
for f in range(video.n_frames):
    dists = np.linalg.norm(cb - video.frames[f], axis=1)
    nearest = int(dists.argmin())
    label = chars[nearest] if nearest < 27 else "<rest>"
    midpoint = (f + 0.5) / 25
    print(f"  frame {f} (t={midpoint:.2f}s): nearest codebook row -> {label!r}")

# The fusion module sees 100 Hz audio frames; visual features are
# repeated 4x (frame t copies video frame floor(t/4), clamped).
feats = np.arange(video.n_frames * 64, dtype=np.float32).reshape(-1, 64)
aligned = align_rates(feats, T=30).data
print(f"aligned: {feats.shape} @25 Hz -> {aligned.shape} @100 Hz; "
      f"rows 0-3 copy video frame 0: "
      f"{bool((aligned[:4] == feats[0]).all())}")

"""Synthetic referring-expression scenes and the hidden-speaker problem.

Run with: python demos/03_synthetic_scenes.py
"""

import math

import numpy as np

from multiview_grounding.scenes import (DatasetConfig, generate_sample,
                                        relation_oracle)

config = DatasetConfig(points_per_object=32)
rng = np.random.default_rng(4)

sample = generate_sample(rng, config, "demo")
scene, utt = sample.scene, sample.utterance
print(f"scene with {len(scene.objects)} objects")
for i, obj in enumerate(scene.objects):
    marker = " <- target" if i == utt.target_index else ""
    print(f"  [{i}] {config.categories[obj.category_id]:<8} "
          f"center ({obj.center[0]:+.2f}, {obj.center[1]:+.2f}){marker}")
print("utterance:", " ".join(utt.tokens))
print(f"relation {utt.relation}, view-dependent: {utt.view_dependent}, "
      f"distractors: {utt.distractor_count}, speaker angle {utt.speaker_angle:+.2f} rad")

# The speaker angle never appears in the tokens. For view-dependent
# relations the referent changes with the frame the relation is judged in:
# walk to the other side of the room and "left of" points elsewhere.
view_dep_config = DatasetConfig(points_per_object=32, view_dependent_fraction=1.0)
scene2 = None
while True:
    cand = generate_sample(rng, view_dep_config, "demo2")
    if cand.utterance.relation == "left-of":
        scene2, utt2 = cand.scene, cand.utterance
        break
front = relation_oracle(scene2, "left-of", utt2.anchor_index, 0.0)
back = relation_oracle(scene2, "left-of", utt2.anchor_index, math.pi)
right = relation_oracle(scene2, "right-of", utt2.anchor_index, 0.0)
print(f"\n'left of' judged from the front view -> object {front}")
print(f"'left of' judged from the back view  -> object {back}")
print(f"(the back-view 'left' is the front-view 'right': {back} == {right})")

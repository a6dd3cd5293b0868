"""Multi-view 3D visual grounding on synthetic referring-expression scenes.

The package is organized as a small numpy library:

- ``autodiff`` / ``optim``: dense float64 tensors, tape-based reverse-mode
  differentiation, Adam;
- ``geometry``: z-axis rotations and the equal-angle view set;
- ``scenes``: synthetic scene/utterance generation and dataset files;
- ``objects`` / ``language``: object and utterance encoders;
- ``model``: multi-modal fusion, multi-view aggregation, heads, losses;
- ``harness``: training, evaluation, invariance reports, ablations;
- ``cli``: the ``mvground`` command.
"""

from .autodiff import Tape, Tensor
from .geometry import rotation_matrix, rotate_center, rotate_points, view_angles
from .harness import (Metrics, TrainConfig, TrainResult, ablate, compute_metrics,
                      evaluate_model, invariance_check, load_model, lr_for_epoch,
                      save_model, train)
from .language import (LanguageFeatures, Vocabulary, encode_categories,
                       encode_language, text_classify, tokenize)
from .model import (GroundingOutput, ModelConfig, ModelParams, aggregate,
                    compute_losses, forward, forward_batch, fuse,
                    grounding_scores, init_model, make_batch, object_class_logits)
from .objects import (MultiViewObjectFeatures, box_size, encode_points,
                      encode_scene, positional_encoding)
from .optim import Adam, AdamState, adam_step
from .scenes import (DatasetConfig, ObjectInstance, Sample, Scene, Utterance,
                     build_dataset, generate_scene, generate_utterance,
                     load_dataset, relation_oracle, rotate_scene, save_dataset)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

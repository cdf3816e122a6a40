"""A single-stream visual-linguistic Transformer, trained end to end at toy scale.

Subpackages and modules:

* ``engine``: numpy tensors with reverse-mode autodiff, optimizers, gradient checks
* ``transformer``: the post-norm multi-head encoder
* ``world``: synthetic scenes, region proposals and the appearance stub
* ``embedding``: input layout and the four summed embeddings
* ``model``: encoder plus heads
* ``pretraining`` / ``probes``: pretraining losses and held-out probes
* ``downstream``: VCR, VQA and referring-expression formats and toy tasks
* ``harness``: config, checkpoints and the command-line runner
"""

from .corpus import WorldConfig, make_text_corpus, make_vl_corpus, toy_vocabulary
from .embedding import InputFormat, InputSequence, Kind, Segment, Vocabulary, assemble_input
from .model import ModelConfig, VLBert

__version__ = "0.1.0"

__all__ = ["InputFormat", "InputSequence", "Kind", "ModelConfig", "Segment", "VLBert", "Vocabulary", "WorldConfig",
           "assemble_input", "make_text_corpus", "make_vl_corpus", "toy_vocabulary"]

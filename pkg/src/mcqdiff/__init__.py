"""Difficulty prediction for multiple-choice questions.

The pipeline: generate reasoning/feedback text for every option, encode each
option into a latent feature, simulate how a fixed population of sampled
student knowledge levels would pick among the options, and regress question
difficulty from the population-averaged selection distribution.  Ground-truth
difficulties come from logistic IRT calibration of raw student responses.
"""

__version__ = "0.1.0"

from mcqdiff.corpus import Corpus, Mcq, ResponseRecord, load_corpus
from mcqdiff.irt import ItemParams, KnowledgeMatrix, sample_knowledge

__all__ = [
    "Corpus",
    "Mcq",
    "ResponseRecord",
    "load_corpus",
    "ItemParams",
    "KnowledgeMatrix",
    "sample_knowledge",
    "__version__",
]

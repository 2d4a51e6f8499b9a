"""Multimodal key-information extraction on document images.

Words and their boxes are encoded by a small transformer, painted into a
BERTgrid, fused with convolutional features, pooled per word and classified by
either parallel linear classifiers or a BiLSTM-CRF, with an auxiliary
segmentation head during training.
"""
from .crf import BiLSTMCRF, crf_log_partition, crf_nll, crf_score, viterbi_decode
from .document import (BoundingBox, Document, FieldAnnotation, LabelSet, MatchPolicy, PixelMasks,
                       ValidationError, Word, load_document, match_field_annotations, owner_map,
                       rasterize_masks, rescale_document, save_document)
from .encoding import Vocabulary, aggregate_word_embeddings, chunk, tokenize
from .evaluation import (FieldPrediction, extract_entities, field_f1, mcnemar, postprocess,
                         sroie_macro_f1)
from .grid import build_bertgrid
from .model import ModelConfig, ViBERTgrid
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .word_head import enet_weights, roi_align

__version__ = "0.1.0"

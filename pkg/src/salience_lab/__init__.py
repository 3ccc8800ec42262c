"""salience_lab: entity salience modeling with micro transformer heads,
teacher-ensemble distillation, and a calibration/evaluation suite."""

__version__ = "0.1.0"

from .corpus import (CandidateSpan, Corpus, Document, EntityAnnotation,
                     MentionSpan, SalienceLabel, Split, SyntheticConfig,
                     binarize, generate_candidates, load_corpus, save_corpus,
                     split_corpus, synth_generate)
from .encoder import EncoderConfig, OverlapError, encode, insert_candidate_tags
from .heads import (HeadKind, MlpHead, SalienceModel, TrainConfig, class_weights,
                    compute_loss, predict_records, train)
from .distill import (DistillConfig, SoftLabelSet, TeacherEnsemble,
                      build_transfer_set, distill_loss, distill_train,
                      ensemble_predict, temperature_score)
from .metrics import (CalibrationBins, MetricsReport, PredictionRecord,
                      TopKReport, aggregate_entity_score, average_precision,
                      build_report, ece, prf1, speedup_estimate, topk)
from .tensor_engine import (AdamWConfig, ParameterSet, Tensor, adamw_step,
                            grad_check, load_checkpoint, save_checkpoint)

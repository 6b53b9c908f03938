"""Self-supervised detection of abnormal AIS reception gaps.

The package decodes AIS position reports, enriches them into per-vessel
feature trajectories, builds balanced arrival-within-horizon datasets,
trains a transformer classifier on them, and streams live traffic through
a watermark-driven detector that flags vessels whose expected messages
never arrive. A deterministic traffic simulator provides ground truth.
"""

from .dataset import (Dataset, DatasetConfig, Sample, build_dataset,
                      dataset_stats, eligible, label_window, load_dataset,
                      save_dataset, split_by_date)
from .detector import (Classification, DetectorConfig, StreamDetector,
                       classify_event, on_clock, on_message, run_stream)
from .encoding import (EncodedSample, NormBounds, cyclic_norm, encode_dataset,
                       encode_history, encode_position, encode_sample,
                       encode_windows, linear_norm, symlog)
from .errors import AisGapError
from .features import (FeatureMessage, Trajectory, assemble, enrich,
                       read_trajectories, write_trajectories)
from .geo import (GeoPoint, PortIndex, delta_components, haversine_m,
                  load_ports_csv, nearest_port_distance_m, save_ports_csv)
from .model import (AblationContext, EvalReport, FeedForwardModel, ModelConfig,
                    ReceptionModel, TrainConfig, ablation_run, build_model,
                    evaluate, load_checkpoint, predict, save_checkpoint, train)
from .nmea import (DynamicReport, NmeaSentence, SentenceDecoder, decode_stream,
                   extract_dynamic, parse_sentence)
from .sim import (CoverageModel, GroundTruth, MovementMix, ScenarioConfig,
                  ScoreReport, ShutdownModel, generate, score_alerts)

__version__ = "0.1.0"

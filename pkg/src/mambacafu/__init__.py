"""Hybrid CNN-Transformer-Mamba segmentation network with co-attention fusion."""
from .attention import (AttentionGate, ChannelAttention, CoAttentionGate, ShapeError, SpatialAttention,
                        align_streams, co_attention_gate_star)
from .complexity import Complexity, count_parameters, count_params_flops
from .config import (TABLE6, TABLE7, AblationFlags, ConfigError, ModelConfig, StageSpec, check_config,
                     expected_shapes, validate_config)
from .data import DataError, DatasetManifest, SampleRecord, augment, load_dataset, read_manifest, synth_generate
from .encoder import CoAMambaBottleneck, CoASMambaStage, Encoder, StageError
from .losses import bce_loss, combined_loss, dice_loss
from .metrics import MetricsReport, accuracy, dsc, hd95, iou, segmentation_report
from .model import DoubleLCoA, MambaCAFU
from .ssm import SS2D, MambaConv, selective_scan, selective_scan_ref
from .train import NumericError, TrainConfig, ablate, evaluate, load_checkpoint, report, save_checkpoint, train

__version__ = "0.1.0"

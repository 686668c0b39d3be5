"""Infrared small-target detection, desk scale.

A U-shaped segmentation network whose encoder blocks pair dilated
difference convolutions with top-k channel attention, fused in the decoder
by selective spatial gating.  Runs on a self-contained numpy-backed tape
autodiff engine; verified against finite differences and brute-force
oracles.
"""

from .conv import (BatchNormState, Conv2dParams, batch_norm, bilinear_upsample2,
                   central_difference_conv2d, conv2d, max_pool2)
from .data import (Sample, SynthParams, load_checkpoint, read_dataset,
                   save_checkpoint, synth_dataset, synth_scene, write_dataset)
from .ddc import DdcBlock, ddc_ablate, ddc_forward, make_ddc_block
from .losses import soft_iou_loss
from .lsff import LsffBlock, channel_pool, lsff_forward, make_lsff_block
from .metrics import MetricReport, evaluate, roc_sweep
from .network import Model, NetConfig, NetOutputs, build, forward, predict
from .optim import AdamWState, adamw_step, poly_lr
from .serank import (PosTable, SelectedFeatures, SeRankBlock, build_pos_table,
                     compute_k, gather_positions, serank_forward, topk_select)
from .tensor import Tape, Tensor, backward, fd_gradient
from .train import TrainParams, train

__version__ = "0.1.0"

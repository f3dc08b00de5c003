"""Small numpy neural-network toolkit with explicit backward passes."""

from .checkpoint import load_checkpoint, save_checkpoint
from .functional import bce_with_logits, log_softmax, mse, sigmoid, softmax, softmax_cross_entropy
from .gradcheck import check_module, grad_check, numeric_grad
from .init import default_rng, he_init
from .layers import (BatchNorm1d, Conv1d, Embedding, LayerNorm, LeakyReLU, Linear, ResBlock, Sigmoid,
                     Upsample, conv_block)
from .module import DEFAULT_DTYPE, Module, Parameter, Sequential
from .optim import AdamW, TrainingError, clip_grad_norm, cosine_lr, inverse_sigmoid_schedule
from .recurrent import LSTM, BiLSTM, StackedLSTM

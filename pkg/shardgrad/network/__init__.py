"""Network architectures and the single-machine reference passes."""
from shardgrad.network.gradcheck import GradCheckReport, gradient_check
from shardgrad.network.params import Gradients, Parameters, init_params, param_shapes, validate_params
from shardgrad.network.passes import ForwardTrace, LossKind, backward, forward, loss, predict
from shardgrad.network.recurrent import sample_sequence, tbptt_step
from shardgrad.network.spec import (
    Conv2D, Dense, LayerSpec, LstmCell, MeanPool, NetworkSpec, RnnCell, SoftmaxOutput,
    cnn_spec, fc_spec, lstm_spec, rnn_spec,
)

__all__ = [
    "Conv2D", "Dense", "ForwardTrace", "GradCheckReport", "Gradients", "LayerSpec", "LossKind",
    "LstmCell", "MeanPool", "NetworkSpec", "Parameters", "RnnCell", "SoftmaxOutput",
    "backward", "cnn_spec", "fc_spec", "forward", "gradient_check", "init_params", "loss",
    "lstm_spec", "param_shapes", "predict", "rnn_spec", "sample_sequence", "tbptt_step",
    "validate_params",
]

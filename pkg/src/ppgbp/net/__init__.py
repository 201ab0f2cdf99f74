from .layers import (
    batchnorm_forward,
    conv1d_forward,
    dense_forward,
    dropout,
    hard_sigmoid,
    lstm_forward,
    maxpool_forward,
    relu,
)
from .model import (
    ForwardTrace,
    HyperParams,
    NetworkParams,
    init_params,
    network_backward,
    network_forward,
    update_running_stats,
    zero_params,
)

from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    edge_aggregate,
    embedding,
    grl,
    leaky_relu,
    matmul,
    mse_loss,
    mul,
    no_grad,
    relu,
    reshape,
    segment_mean,
    segment_softmax,
    segment_sum,
    slice_cols,
    softmax_cross_entropy,
    spmm,
    sub,
    take_rows,
    tmean,
    tsum,
)
from .module import Module, Parameter, glorot
from .optim import Adam, PlateauSchedule, adam_step, alpha_schedule, plateau_step
from .checkpoint import load_checkpoint, save_checkpoint

from .gradcheck import GradCheckResult, finite_difference_check
from .nn import (
    AttentionWeights,
    BlockWeights,
    multi_head_attention,
    transformer_block,
    transformer_encoder_forward,
    xavier_uniform,
)
from .optim import AdamState, adam_step
from .tensor import (
    DegenerateVectorError,
    NumericalError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cos,
    div,
    exp,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    no_record,
    norm,
    parameter,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    softmax_row,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    take_rows,
    tanh,
    transpose,
)

from .tensor import (
    Tensor, NdError, ShapeError, NotFiniteError, GraphError,
    no_grad, grad_enabled, make_node, backward, zero_grads,
)
from .ops import (
    add, mul, scalar_affine, matmul, conv2d, group_norm, silu, softmax,
    reshape, transpose, mean, sum, mse_loss, concat, slice_nd,
    embedding_lookup, sin, cos, exp, sqrt, power,
    avg_pool2x, upsample2x, linear, OPS, apply_op,
)
from .gradcheck import grad_check, GradCheckReport, ParamReport
from .optim import Adam

"""
Minimal differentiable layers for the patch and stacked networks.

Tensors are plain :code:`numpy` arrays in :code:`(n, c, h, w)` layout. Each
layer implements :code:`forward` and :code:`backward` explicitly, keeps the
activations it needs for the backward pass in a cache, and stores gradients
for its parameters only when it is trainable.

.. Note::

    Parameters are created with the module level :code:`DTYPE`, which is
    :code:`float32` by default. Call :func:`casslide.utils.set_precision`
    with :code:`"float64"` before building a network for gradient checks.
"""

import json
import logging

import numpy as np
from scipy.special import logsumexp

from .constants import BN_EPS, BN_MOMENTUM, NESTEROV_MOMENTUM
from .utils import ContractError, ShapeError, autodoc

xp = np

logger = logging.getLogger(__name__)

DTYPE = xp.dtype("float32")

WEIGHTS_FORMAT = "casslide-weights"

__all__ = [
    "BatchNorm2d",
    "Classifier",
    "Conv2d",
    "GlobalAvgPool",
    "Layer",
    "NesterovSGD",
    "OptimizerState",
    "ReLU",
    "ResidualBlock",
    "Sequential",
    "batchnorm_forward",
    "conv2d_forward",
    "global_avg_pool",
    "he_init",
    "load_weights",
    "nesterov_step",
    "numerical_gradient",
    "read_weights",
    "relu",
    "save_weights",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_grad",
    "weights_to_bytes",
]


def _conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _offset_slice(offset, stride, count):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv2d_forward(input, weights, stride=1, padding=0, bias=None):
    """
    Two dimensional cross-correlation (no kernel flip).

    The kernel is applied one offset at a time, each offset is a single
    matrix product over the input channels.

    Parameters
    ----------
    input: array_like
        The input with shape :code:`(n, c, h, w)`
    weights: array_like
        The kernel with shape :code:`(out_ch, c, kh, kw)`
    stride: int
        The step between output locations
    padding: int
        The number of zeros added to each spatial edge
    bias: array_like, optional
        Per output channel offsets

    Returns
    -------
    array_like
        The output with shape :code:`(n, out_ch, oh, ow)`
    """
    n, channels, height, width = input.shape
    out_ch, in_ch, kh, kw = weights.shape
    if channels != in_ch:
        raise ShapeError("Input channels do not match the kernel", input.shape, weights.shape)
    oh = _conv_output_size(height, kh, stride, padding)
    ow = _conv_output_size(width, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("Kernel does not fit the padded input", input.shape, weights.shape)
    if padding:
        pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        input = xp.pad(input, pad)
    out = xp.zeros((out_ch, n, oh, ow), dtype=xp.result_type(input, weights))
    for ii in range(kh):
        for jj in range(kw):
            patch = input[:, :, _offset_slice(ii, stride, oh), _offset_slice(jj, stride, ow)]
            out += xp.tensordot(weights[:, :, ii, jj], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return xp.ascontiguousarray(out)


def _conv2d_backward(dout, input, weights, stride, padding, need_input_grad=True):
    n, channels, height, width = input.shape
    _, _, kh, kw = weights.shape
    _, _, oh, ow = dout.shape
    if padding:
        pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        input = xp.pad(input, pad)
    dweights = xp.zeros_like(weights)
    dinput = xp.zeros_like(input) if need_input_grad else None
    for ii in range(kh):
        for jj in range(kw):
            rows = _offset_slice(ii, stride, oh)
            cols = _offset_slice(jj, stride, ow)
            patch = input[:, :, rows, cols]
            dweights[:, :, ii, jj] = xp.tensordot(dout, patch, axes=([0, 2, 3], [0, 2, 3]))
            if need_input_grad:
                grad = xp.tensordot(dout, weights[:, :, ii, jj], axes=([1], [0]))
                dinput[:, :, rows, cols] += grad.transpose(0, 3, 1, 2)
    if need_input_grad and padding:
        dinput = dinput[:, :, padding:-padding, padding:-padding]
    return dinput, dweights


def batchnorm_forward(
    input, gamma, beta, mode="train", eps=BN_EPS, running_mean=None, running_var=None
):
    """
    Per-channel batch normalization followed by an affine transform.

    Parameters
    ----------
    input: array_like
        The input with shape :code:`(n, c, h, w)`
    gamma, beta: array_like
        Per-channel scale and offset
    mode: str
        :code:`"train"` normalizes with the batch statistics, :code:`"infer"`
        with :code:`running_mean` and :code:`running_var`
    eps: float
        Added to the variance, default=1e-5

    Returns
    -------
    output: array_like
        The normalized input
    mean, var: array_like
        The statistics that were used
    """
    channels = input.shape[1]
    if len(gamma) != channels or len(beta) != channels:
        raise ShapeError("Batch norm parameters do not match channels", input.shape, gamma.shape)
    if input.size == 0:
        raise ContractError(f"Cannot normalize an empty channel population {input.shape}")
    if mode == "train":
        mean = input.mean(axis=(0, 2, 3))
        var = input.var(axis=(0, 2, 3))
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"Unknown batch norm mode {mode!r}")
    inv_std = 1 / xp.sqrt(var + eps)
    xhat = (input - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    output = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return output, mean, var


def relu(input):
    """
    Elementwise :code:`max(0, x)`.
    """
    return xp.maximum(input, 0)


def global_avg_pool(input):
    """
    Spatial mean of every channel, the output has shape :code:`(n, c, 1, 1)`.
    """
    if input.shape[2] < 1 or input.shape[3] < 1:
        raise ShapeError("Cannot pool an empty feature map", input.shape)
    return input.mean(axis=(2, 3), keepdims=True)


def softmax(logits):
    """
    Softmax over the class axis of :code:`(n, k, 1, 1)` logits.
    """
    return xp.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """
    Mean negative log-probability of the target classes.

    Parameters
    ----------
    logits: array_like
        Class scores with shape :code:`(n, num_classes, 1, 1)`
    target: array_like
        One class index per sample

    Returns
    -------
    loss: float
        The mean cross entropy
    probabilities: array_like
        The softmax probabilities, same shape as :code:`logits`
    """
    if logits.ndim != 4 or logits.shape[2:] != (1, 1):
        raise ShapeError("Logits must have shape (n, num_classes, 1, 1)", logits.shape)
    target = xp.asarray(target, dtype=int).reshape(-1)
    n, num_classes = logits.shape[:2]
    if len(target) != n:
        raise ShapeError("One target is needed per sample", logits.shape, target.shape)
    if xp.any(target < 0) or xp.any(target >= num_classes):
        raise ContractError(f"Target indices must lie in [0, {num_classes}), got {target}")
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = -float(xp.mean(log_probs[xp.arange(n), target, 0, 0]))
    return loss, xp.exp(log_probs)


def softmax_cross_entropy_grad(probabilities, target):
    """
    Gradient of :func:`softmax_cross_entropy` with respect to the logits.
    """
    target = xp.asarray(target, dtype=int).reshape(-1)
    grad = probabilities.copy()
    grad[xp.arange(len(target)), target, 0, 0] -= 1
    return grad / len(target)


@autodoc
def he_init(shape, rng):
    """
    Zero mean Gaussian weights with variance :code:`2 / fan_in`.

    Parameters
    ----------
    shape: tuple
        The kernel shape :code:`(out_ch, in_ch, kh, kw)`
    {rng}

    Returns
    -------
    array_like
    """
    fan_in = int(xp.prod(shape[1:]))
    if fan_in <= 0:
        raise ShapeError("He initialization needs a positive fan in", shape)
    return (rng.standard_normal(shape) * xp.sqrt(2 / fan_in)).astype(DTYPE)


class OptimizerState:
    """
    Velocities for Nesterov momentum, one per trainable parameter.

    Parameters
    ----------
    learning_rate: float
        The step size
    momentum: float
        The momentum coefficient in :code:`[0, 1)`
    """

    def __init__(self, learning_rate, momentum=NESTEROV_MOMENTUM):
        if not 0 <= momentum < 1:
            raise ValueError(f"Momentum must lie in [0, 1), got {momentum}")
        if learning_rate <= 0:
            raise ValueError(f"Learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = dict()

    def velocity_for(self, name, param):
        if name not in self.velocity:
            self.velocity[name] = xp.zeros_like(param)
        elif self.velocity[name].shape != param.shape:
            raise ShapeError(f"Velocity for {name} does not mirror its parameter",
                             self.velocity[name].shape, param.shape)
        return self.velocity[name]


def nesterov_step(params, grads, velocities, learning_rate, momentum=NESTEROV_MOMENTUM):
    r"""
    One Nesterov accelerated gradient update.

    .. math::

        v' = \mu v - \eta g(w + \mu v), \quad w' = w + v'

    Parameters
    ----------
    params: list[array_like]
        The current parameters :math:`w`
    grads: list[array_like]
        Gradients evaluated at the look-ahead point :math:`w + \mu v`
    velocities: list[array_like]
        The current velocities :math:`v`
    learning_rate: float
        The step size :math:`\eta`
    momentum: float
        The momentum coefficient :math:`\mu`

    Returns
    -------
    params, velocities: list[array_like]
        The updated parameters and velocities
    """
    new_params = list()
    new_velocities = list()
    for param, grad, velocity in zip(params, grads, velocities):
        if not (xp.shape(param) == xp.shape(grad) == xp.shape(velocity)):
            raise ShapeError("Parameter, gradient and velocity differ",
                             xp.shape(param), xp.shape(grad), xp.shape(velocity))
        velocity = momentum * velocity - learning_rate * grad
        new_params.append(param + velocity)
        new_velocities.append(velocity)
    return new_params, new_velocities


class NesterovSGD:
    r"""
    Nesterov momentum applied in place to the trainable parameters of a
    network.

    The network stores the look-ahead parameters
    :math:`\theta = w + \mu v`, so gradients from an ordinary backward pass
    are already evaluated at the look-ahead point and the update becomes

    .. math::

        v' = \mu v - \eta g(\theta), \quad \theta' = \theta + \mu v' - \eta g(\theta)

    which is algebraically the same sequence of :math:`w` as
    :func:`nesterov_step`.

    Parameters
    ----------
    learning_rate: float
        The initial step size
    momentum: float
        The momentum coefficient, default=0.9
    weight_decay: float
        Optional L2 penalty added to every gradient, default=0
    """

    def __init__(self, learning_rate, momentum=NESTEROV_MOMENTUM, weight_decay=0.0):
        self.state = OptimizerState(learning_rate, momentum)
        self.weight_decay = weight_decay

    @property
    def learning_rate(self):
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value):
        self.state.learning_rate = value

    def step(self, network):
        lr = self.state.learning_rate
        mu = self.state.momentum
        for name, layer, key in network.trainable_parameters():
            if key not in layer.grads:
                raise RuntimeError(f"No gradient for {name}, call backward first")
            param = layer.params[key]
            grad = layer.grads[key]
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            velocity = self.state.velocity_for(name, param)
            velocity *= mu
            velocity -= lr * grad
            param += mu * velocity - lr * grad


class Layer:
    """
    Base class for all layers.

    Subclasses fill :code:`params` (trainable tensors), :code:`buffers`
    (non-trainable state such as batch norm statistics) and implement
    :code:`forward`, :code:`backward` and :code:`output_shape`.
    """

    kind = None

    def __init__(self, trainable=True):
        self.params = dict()
        self.buffers = dict()
        self.grads = dict()
        self.trainable = trainable
        self._cache = None

    def forward(self, input, train=False, cache=True):
        raise NotImplementedError

    def backward(self, dout, need_input_grad=True):
        raise NotImplementedError

    def output_shape(self, shape):
        return tuple(shape)

    def children(self):
        return list()

    def set_trainable(self, trainable):
        self.trainable = trainable
        if not trainable:
            self.grads = dict()
        for child in self.children():
            child.set_trainable(trainable)

    def spec(self):
        return dict(kind=self.kind, trainable=self.trainable)

    def clear_cache(self):
        self._cache = None
        for child in self.children():
            child.clear_cache()

    def cached_bytes(self):
        total = 0
        if self._cache is not None:
            total += sum(
                value.nbytes for value in self._cache if isinstance(value, xp.ndarray)
            )
        return total + sum(child.cached_bytes() for child in self.children())

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(
                f"{type(self).__name__}.backward called before a caching forward pass"
            )
        return self._cache


class Conv2d(Layer):
    """
    Square 3x3 or 1x1 convolution without bias.

    Padding is 1 for 3x3 kernels and 0 for 1x1 kernels so that stride-1
    convolutions preserve the spatial size.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, rng=None,
                 trainable=True, bias=False):
        super().__init__(trainable=trainable)
        if kernel_size not in (1, 3):
            raise ValueError(f"Only 3x3 and 1x1 kernels are supported, got {kernel_size}")
        if stride < 1:
            raise ValueError(f"Stride must be positive, got {stride}")
        self.stride = stride
        self.padding = kernel_size // 2
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.params["weight"] = xp.zeros(shape, dtype=DTYPE)
        else:
            self.params["weight"] = he_init(shape, rng)
        if bias:
            self.params["bias"] = xp.zeros(out_channels, dtype=DTYPE)

    @property
    def kernel(self):
        return self.params["weight"].shape

    def forward(self, input, train=False, cache=True):
        output = conv2d_forward(
            input, self.params["weight"], self.stride, self.padding, self.params.get("bias")
        )
        self._cache = (input,) if cache else None
        return output

    def backward(self, dout, need_input_grad=True):
        (input,) = self._require_cache()
        if not (self.trainable or need_input_grad):
            return None
        dinput, dweight = _conv2d_backward(
            dout, input, self.params["weight"], self.stride, self.padding, need_input_grad
        )
        if self.trainable:
            self.grads["weight"] = dweight
            if "bias" in self.params:
                self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        return dinput

    def output_shape(self, shape):
        n, channels, height, width = shape
        out_ch, in_ch, kernel, _ = self.kernel
        if channels != in_ch:
            raise ShapeError("Input channels do not match the kernel", shape, self.kernel)
        oh = _conv_output_size(height, kernel, self.stride, self.padding)
        ow = _conv_output_size(width, kernel, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError("Convolution produces an empty feature map", shape, self.kernel)
        return (n, out_ch, oh, ow)

    def spec(self):
        return dict(
            kind=self.kind,
            kernel=list(self.kernel),
            stride=self.stride,
            padding=self.padding,
            trainable=self.trainable,
        )


class Classifier(Conv2d):
    """
    The 1x1 convolution with bias producing class logits after pooling,
    paired with a softmax by :func:`softmax_cross_entropy`.
    """

    kind = "softmax_classifier"

    def __init__(self, in_channels, num_classes, rng=None, trainable=True):
        super().__init__(in_channels, num_classes, kernel_size=1, rng=rng,
                         trainable=trainable, bias=True)


class BatchNorm2d(Layer):
    """
    Batch normalization with exponential moving average running statistics.
    """

    kind = "batchnorm"

    def __init__(self, channels, trainable=True, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__(trainable=trainable)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = xp.ones(channels, dtype=DTYPE)
        self.params["beta"] = xp.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = xp.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = xp.ones(channels, dtype=DTYPE)

    def forward(self, input, train=False, cache=True):
        train = train and self.trainable
        mode = "train" if train else "infer"
        output, mean, var = batchnorm_forward(
            input,
            self.params["gamma"],
            self.params["beta"],
            mode=mode,
            eps=self.eps,
            running_mean=self.buffers["running_mean"],
            running_var=self.buffers["running_var"],
        )
        if train:
            for key, value in (("running_mean", mean), ("running_var", var)):
                buffer = self.buffers[key]
                buffer *= self.momentum
                buffer += (1 - self.momentum) * value.astype(buffer.dtype)
        if cache:
            inv_std = 1 / xp.sqrt(var + self.eps)
            xhat = (input - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            self._cache = (xhat, inv_std, train)
        else:
            self._cache = None
        return output

    def backward(self, dout, need_input_grad=True):
        xhat, inv_std, train = self._require_cache()
        if self.trainable:
            self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
            self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        dxhat = dout * gamma
        inv_std = inv_std.reshape(1, -1, 1, 1)
        if not train:
            return dxhat * inv_std
        count = dout.shape[0] * dout.shape[2] * dout.shape[3]
        return (
            inv_std
            / count
            * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        )

    def output_shape(self, shape):
        if shape[1] != len(self.params["gamma"]):
            raise ShapeError("Batch norm channels do not match", shape, self.params["gamma"].shape)
        return tuple(shape)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, trainable=True):
        super().__init__(trainable=trainable)

    def forward(self, input, train=False, cache=True):
        self._cache = (input > 0,) if cache else None
        return relu(input)

    def backward(self, dout, need_input_grad=True):
        (positive,) = self._require_cache()
        return dout * positive if need_input_grad else None


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def __init__(self, trainable=True):
        super().__init__(trainable=trainable)

    def forward(self, input, train=False, cache=True):
        self._cache = (input.shape,) if cache else None
        return global_avg_pool(input)

    def backward(self, dout, need_input_grad=True):
        (shape,) = self._require_cache()
        if not need_input_grad:
            return None
        return xp.broadcast_to(dout / (shape[2] * shape[3]), shape).copy()

    def output_shape(self, shape):
        if shape[2] < 1 or shape[3] < 1:
            raise ShapeError("Cannot pool an empty feature map", shape)
        return (shape[0], shape[1], 1, 1)


class ResidualBlock(Layer):
    """
    Pre-activation residual block.

    The branch is BN, ReLU, 3x3 conv, BN, ReLU, 3x3 conv and is summed with
    the skip path. The first convolution carries the block stride. When the
    stride or width changes the skip path is a strided 1x1 projection of the
    block input, otherwise it is the identity.
    """

    kind = "residual_block"

    def __init__(self, in_channels, out_channels, stride=1, rng=None, trainable=True,
                 projection=None):
        super().__init__(trainable=trainable)
        self.bn1 = BatchNorm2d(in_channels, trainable=trainable)
        self.relu1 = ReLU(trainable=trainable)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, rng=rng, trainable=trainable)
        self.bn2 = BatchNorm2d(out_channels, trainable=trainable)
        self.relu2 = ReLU(trainable=trainable)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, rng=rng, trainable=trainable)
        if projection is None:
            projection = stride != 1 or in_channels != out_channels
        self.projection = (
            Conv2d(in_channels, out_channels, 1, stride, rng=rng, trainable=trainable)
            if projection
            else None
        )

    @property
    def branch(self):
        return [self.bn1, self.relu1, self.conv1, self.bn2, self.relu2, self.conv2]

    def children(self):
        layers = self.branch
        if self.projection is not None:
            layers = layers + [self.projection]
        return layers

    def named_children(self):
        names = ["bn1", "relu1", "conv1", "bn2", "relu2", "conv2"]
        pairs = list(zip(names, self.branch))
        if self.projection is not None:
            pairs.append(("projection", self.projection))
        return pairs

    def forward(self, input, train=False, cache=True):
        output = input
        for layer in self.branch:
            output = layer.forward(output, train=train, cache=cache)
        if self.projection is None:
            skip = input
        else:
            skip = self.projection.forward(input, train=train, cache=cache)
        self._cache = (True,) if cache else None
        return output + skip

    def backward(self, dout, need_input_grad=True):
        self._require_cache()
        grad = dout
        branch = self.branch
        for index in range(len(branch) - 1, -1, -1):
            grad = branch[index].backward(grad, need_input_grad=need_input_grad or index > 0)
        if self.projection is None:
            skip = dout
        else:
            skip = self.projection.backward(dout, need_input_grad=need_input_grad)
        if not need_input_grad:
            return None
        return grad + skip

    def output_shape(self, shape):
        branch = shape
        for layer in self.branch:
            branch = layer.output_shape(branch)
        skip = shape if self.projection is None else self.projection.output_shape(shape)
        if tuple(branch) != tuple(skip):
            raise ShapeError("Residual branch and skip path disagree", branch, skip)
        return branch

    def spec(self):
        children = [child.spec() for child in self.children()]
        children.append(dict(kind="elementwise_sum"))
        return dict(kind=self.kind, trainable=self.trainable, children=children)


class Sequential:
    """
    An ordered network graph.

    Parameters
    ----------
    layers: list[Layer]
        The layers in evaluation order
    input_shape: tuple, optional
        If given, shapes are propagated through every layer at construction
        and an empty feature map raises a :code:`ShapeError`
    name: str
        A label used in log messages
    """

    def __init__(self, layers, input_shape=None, name="network"):
        self.layers = list(layers)
        self.name = name
        if input_shape is not None:
            self.check_shapes(input_shape)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Sequential(self.layers[index], name=self.name)
        return self.layers[index]

    def check_shapes(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, input, train=False, cache=True):
        output = xp.asarray(input, dtype=DTYPE)
        for layer in self.layers:
            output = layer.forward(output, train=train, cache=cache)
        return output

    def backward(self, dout, need_input_grad=False):
        """
        Back-propagate :code:`dout` and store gradients on every trainable
        layer.

        Propagation stops at the earliest trainable layer unless the input
        gradient is requested, so frozen prefixes are never visited.
        """
        first_trainable = next(
            (ii for ii, layer in enumerate(self.layers) if _any_trainable(layer)), None
        )
        if first_trainable is None and not need_input_grad:
            raise RuntimeError(f"{self.name} has no trainable parameters")
        stop = 0 if need_input_grad else first_trainable
        grad = dout
        for index in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[index]
            grad = layer.backward(grad, need_input_grad=need_input_grad or index > stop)
        return grad

    def set_trainable(self, trainable):
        for layer in self.layers:
            layer.set_trainable(trainable)
        return self

    def freeze(self):
        return self.set_trainable(False)

    @property
    def frozen(self):
        return not any(_any_trainable(layer) for layer in self.layers)

    def named_layers(self):
        for index, layer in enumerate(self.layers):
            yield from _named_leaves(f"{index}", layer)

    def named_parameters(self):
        for prefix, layer in self.named_layers():
            for key in layer.params:
                yield f"{prefix}.{key}", layer, key

    def named_buffers(self):
        for prefix, layer in self.named_layers():
            for key in layer.buffers:
                yield f"{prefix}.{key}", layer, key

    def trainable_parameters(self):
        for name, layer, key in self.named_parameters():
            if layer.trainable:
                yield name, layer, key

    def gradients(self):
        return {
            name: layer.grads[key]
            for name, layer, key in self.trainable_parameters()
            if key in layer.grads
        }

    def n_parameters(self):
        return int(sum(layer.params[key].size for _, layer, key in self.named_parameters()))

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()

    def cached_bytes(self):
        return int(sum(layer.cached_bytes() for layer in self.layers))

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def tensors(self):
        """
        All parameters followed by all buffers in graph order.
        """
        for name, layer, key in self.named_parameters():
            yield name, layer.params[key]
        for name, layer, key in self.named_buffers():
            yield name, layer.buffers[key]


def _any_trainable(layer):
    return layer.trainable or any(_any_trainable(child) for child in layer.children())


def _named_leaves(prefix, layer):
    if isinstance(layer, ResidualBlock):
        for name, child in layer.named_children():
            yield f"{prefix}.{name}", child
    else:
        yield prefix, layer


@autodoc
def weights_to_bytes(network, meta=None):
    """
    Serialize the parameters and buffers of a network.

    The output is a single line of JSON describing the layer specs and the
    tensor names and shapes in graph order, a newline, then every tensor as
    little-endian 32-bit floats in header order.

    Parameters
    ----------
    {network}
    meta: dict, optional
        Extra JSON-serializable metadata, e.g., the builder configuration

    Returns
    -------
    bytes
    """
    tensors = list(network.tensors())
    header = dict(
        format=WEIGHTS_FORMAT,
        meta=meta or dict(),
        layers=network.spec(),
        tensors=[dict(name=name, shape=list(value.shape)) for name, value in tensors],
    )
    payload = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    payload.extend(xp.asarray(value, dtype="<f4").tobytes() for _, value in tensors)
    return b"".join(payload)


def save_weights(network, path, meta=None):
    """
    Write :func:`weights_to_bytes` output to :code:`path`.
    """
    with open(path, "wb") as ff:
        ff.write(weights_to_bytes(network, meta=meta))
    logger.info("Wrote %d tensors to %s", len(list(network.tensors())), path)


def read_weights(path):
    """
    Read a weight file.

    Returns
    -------
    header: dict
        The decoded JSON header
    tensors: dict
        Map from tensor name to a :code:`float32` array
    """
    with open(path, "rb") as ff:
        data = ff.read()
    return _parse_weights(data)


def _parse_weights(data):
    newline = data.index(b"\n")
    header = json.loads(data[:newline].decode("utf-8"))
    if header.get("format") != WEIGHTS_FORMAT:
        raise ContractError(f"Not a weight file, format={header.get('format')!r}")
    offset = newline + 1
    tensors = dict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(xp.prod(shape))
        value = xp.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = value.reshape(shape).astype(xp.float32)
        offset += 4 * count
    if offset != len(data):
        raise ContractError(f"Weight payload has {len(data) - offset} trailing bytes")
    return header, tensors


def load_weights(network, source):
    """
    Copy tensors from a weight file (path or bytes) into a built network.

    Returns
    -------
    header: dict
        The decoded JSON header
    """
    if isinstance(source, bytes):
        header, tensors = _parse_weights(source)
    else:
        header, tensors = read_weights(source)
    expected = list(network.tensors())
    if [name for name, _ in expected] != list(tensors):
        raise ContractError("Weight file tensors do not match the network graph")
    for (name, target), value in zip(expected, tensors.values()):
        if target.shape != value.shape:
            raise ShapeError(f"Tensor {name} has the wrong shape", target.shape, value.shape)
        target[...] = value
    return header


def numerical_gradient(func, array, eps=1e-5):
    """
    Central finite difference gradient of a scalar function.

    :code:`array` is perturbed in place and restored after each evaluation.

    Parameters
    ----------
    func: callable
        A function of no arguments returning a scalar
    array: array_like
        The array to differentiate with respect to
    eps: float
        The finite difference step

    Returns
    -------
    array_like
        The gradient, same shape as :code:`array`
    """
    grad = xp.zeros(array.shape, dtype=xp.float64)
    flat = array.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + eps
        upper = func()
        flat[index] = original - eps
        lower = func()
        flat[index] = original
        grad.reshape(-1)[index] = (upper - lower) / (2 * eps)
    return grad

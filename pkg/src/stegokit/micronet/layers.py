"""Layer classes wrapping the functional ops: parameters, gradients, and the
forward caches needed for backprop live on the layer."""

from __future__ import annotations

import numpy as np

from . import ops


class Layer:
    """Base: parameter-free, shape-preserved unless overridden."""

    #: parameter attribute names subject to L2 weight decay
    decayed = ()

    def param_names(self):
        return ()

    def state_names(self):
        """Non-trainable arrays that still belong in a checkpoint."""
        return ()

    def params(self):
        return {name: getattr(self, name) for name in self.param_names()}

    def grads(self):
        return {name: getattr(self, "g" + name) for name in self.param_names()}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Conv2d(Layer):
    decayed = ("w",)

    def __init__(
        self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None, dtype=np.float32,
        input_grad=True,
    ):
        self.stride = stride
        self.pad = pad
        # Layers fed directly by the fixed front end skip the (large) input
        # gradient; nothing upstream is trainable.
        self.input_grad = input_grad
        scale = np.sqrt(2.0 / (in_ch * kernel * kernel))
        rng = rng or np.random.default_rng(0)
        self.w = rng.normal(0.0, scale, (out_ch, in_ch, kernel, kernel)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cols = None
        self._x_shape = None

    def param_names(self):
        return ("w", "b")

    def out_shape(self, in_shape):
        n, _, h, w = in_shape
        k = self.w.shape[2]
        return (
            n,
            self.w.shape[0],
            ops.conv_out_size(h, k, self.stride, self.pad),
            ops.conv_out_size(w, k, self.stride, self.pad),
        )

    def forward(self, x, training=False):
        cols, oh, ow = ops.im2col(x, self.w.shape[2], self.stride, self.pad)
        self._cols = cols if training else None
        self._x_shape = x.shape
        return ops._conv_from_cols(cols, x.shape[0], oh, ow, self.w, self.b)

    def backward(self, grad_out):
        n, oc, oh, ow = grad_out.shape
        gom = grad_out.transpose(0, 2, 3, 1).reshape(-1, oc)
        self.gw = (gom.T @ self._cols).reshape(self.w.shape)
        self.gb = gom.sum(axis=0)
        self._cols = None
        if not self.input_grad:
            return None
        grad_cols = gom @ self.w.reshape(oc, -1)
        k = self.w.shape[2]
        return ops.col2im(grad_cols, self._x_shape, k, self.stride, self.pad, oh, ow)


class BatchNorm2d(Layer):
    def __init__(self, channels, dtype=np.float32, momentum=ops.BN_MOMENTUM, eps=ops.BN_EPS):
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def param_names(self):
        return ("gamma", "beta")

    def state_names(self):
        return ("running_mean", "running_var")

    def forward(self, x, training=False):
        out, cache = ops.batchnorm_forward(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training,
            self.momentum,
            self.eps,
        )
        self._cache = cache
        return out

    def backward(self, grad_out):
        grad_x, self.ggamma, self.gbeta = ops.batchnorm_backward(self._cache, grad_out)
        self._cache = None
        return grad_x


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad_out):
        return grad_out * self._mask


class AvgPool2d(Layer):
    def __init__(self, window, stride=None, pad=0):
        self.window = window
        self.stride = window if stride is None else stride
        self.pad = pad

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        return (
            n,
            c,
            ops.conv_out_size(h, self.window, self.stride, self.pad),
            ops.conv_out_size(w, self.window, self.stride, self.pad),
        )

    def forward(self, x, training=False):
        self._x_shape = x.shape
        return ops.avgpool(x, self.window, self.stride, self.pad)

    def backward(self, grad_out):
        return ops.avgpool_backward(grad_out, self._x_shape, self.window, self.stride, self.pad)


class Flatten(Layer):
    def out_shape(self, in_shape):
        n = in_shape[0]
        size = 1
        for d in in_shape[1:]:
            size *= d
        return (n, size)

    def forward(self, x, training=False):
        self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._x_shape)


class Dense(Layer):
    decayed = ("w",)

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        scale = np.sqrt(2.0 / in_features)
        rng = rng or np.random.default_rng(0)
        self.w = rng.normal(0.0, scale, (in_features, out_features)).astype(dtype)
        self.b = np.zeros(out_features, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def param_names(self):
        return ("w", "b")

    def out_shape(self, in_shape):
        return (in_shape[0], self.w.shape[1])

    def forward(self, x, training=False):
        self._x = x
        return ops.fc(x, self.w, self.b)

    def backward(self, grad_out):
        grad_x, self.gw, self.gb = ops.fc_backward(self._x, self.w, grad_out)
        self._x = None
        return grad_x


class Sequential:
    """Ordered (name, layer) pipeline with symmetric forward/backward."""

    def __init__(self, named_layers):
        self.named_layers = list(named_layers)

    def forward(self, x, training=False):
        for _, layer in self.named_layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad_out):
        for _, layer in reversed(self.named_layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def out_shape(self, in_shape):
        for _, layer in self.named_layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape

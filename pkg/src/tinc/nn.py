"""Small float64 neural-net framework for the encoder/projector/time head.

Layers are functional: forward returns (output, cache) and backward consumes
the cache, so one set of weights can run several passes per step (two SSL
views) without state collisions. Gradients accumulate on Parameter.grad.
Convolutions dispatch to the compiled kernels when available.
"""

import numpy as np

from tinc import kernels
from tinc.errors import ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Layer:
    """Base layer; subclasses define forward(x, training) -> (y, cache)."""

    def parameters(self):
        return []

    def buffers(self):
        return []

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, gy, cache):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name, c_in, c_out, rng, kernel=3, stride=2, pad=1):
        fan_in = c_in * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(f"{name}.weight",
                                rng.normal(0.0, scale, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        y = kernels.conv2d_forward(x, self.weight.value, self.stride, self.pad)
        y += self.bias.value[None, :, None, None]
        return y, (x.shape, x)

    def backward(self, gy, cache):
        x_shape, x = cache
        self.bias.grad += gy.sum(axis=(0, 2, 3))
        self.weight.grad += kernels.conv2d_backward_weight(
            x, gy, self.stride, self.pad,
            self.weight.value.shape[2], self.weight.value.shape[3])
        return kernels.conv2d_backward_input(
            gy, self.weight.value, self.stride, self.pad, x_shape[2], x_shape[3])


class ReLU(Layer):
    def forward(self, x, training):
        mask = x > 0
        return x * mask, mask

    def backward(self, gy, cache):
        return gy * cache


class GlobalAvgPool(Layer):
    def forward(self, x, training):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, gy, cache):
        n, c, h, w = cache
        return np.broadcast_to(gy[:, :, None, None], (n, c, h, w)) / (h * w)


class Flatten(Layer):
    def forward(self, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, cache):
        return gy.reshape(cache)


class Linear(Layer):
    def __init__(self, name, d_in, d_out, rng):
        scale = np.sqrt(2.0 / d_in)
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, scale, (d_out, d_in)))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, gy, cache):
        self.weight.grad += gy.T @ cache
        self.bias.grad += gy.sum(axis=0)
        return gy @ self.weight.value


class BatchNorm1d(Layer):
    """Per-feature standardization: batch statistics while training, running
    averages (momentum 0.9) at eval."""

    def __init__(self, name, dim, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def set_buffers(self, running_mean, running_var):
        self.running_mean = np.asarray(running_mean, dtype=np.float64).copy()
        self.running_var = np.asarray(running_var, dtype=np.float64).copy()

    def forward(self, x, training):
        if training:
            if x.shape[0] < 2:
                raise ValidationError(
                    "batch statistics undefined for batch size 1 in train mode")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1 - self.momentum) * mean)
            self.running_var = (self.momentum * self.running_var
                                + (1 - self.momentum) * var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        y = self.gamma.value * xhat + self.beta.value
        return y, (xhat, inv_std, training, x.shape[0])

    def backward(self, gy, cache):
        xhat, inv_std, training, n = cache
        self.gamma.grad += np.sum(gy * xhat, axis=0)
        self.beta.grad += np.sum(gy, axis=0)
        gxhat = gy * self.gamma.value
        if not training:
            return gxhat * inv_std
        return (inv_std / n) * (n * gxhat - np.sum(gxhat, axis=0)
                                - xhat * np.sum(gxhat * xhat, axis=0))


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x, training):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training)
            caches.append(cache)
        return x, caches

    def backward(self, gy, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            gy = layer.backward(gy, cache)
        return gy


def zero_grads(layer):
    for p in layer.parameters():
        p.grad[...] = 0.0


def build_encoder(kind, rng, input_size, representation_dim):
    """Encoder producing (n, r) representations from (n, 1, H, W) images."""
    h, w = input_size
    if kind == "small_cnn":
        channels = (16, 32, 64, representation_dim)
        layers = []
        c_in = 1
        for i, c_out in enumerate(channels):
            layers.append(Conv2d(f"encoder.conv{i}", c_in, c_out, rng))
            layers.append(ReLU())
            c_in = c_out
        layers.append(GlobalAvgPool())
        return Sequential(layers)
    if kind == "mlp":
        hidden = max(16, representation_dim)
        return Sequential([
            Flatten(),
            Linear("encoder.fc0", h * w, hidden, rng),
            ReLU(),
            Linear("encoder.fc1", hidden, representation_dim, rng),
        ])
    raise ValidationError(f"unknown encoder kind {kind!r}")


def build_projector(representation_dim, projector_dims, rng):
    """Expander MLP: two standardized hidden layers, linear output."""
    h1, h2, out = projector_dims
    return Sequential([
        Linear("projector.fc0", representation_dim, h1, rng),
        BatchNorm1d("projector.bn0", h1),
        ReLU(),
        Linear("projector.fc1", h1, h2, rng),
        BatchNorm1d("projector.bn1", h2),
        ReLU(),
        Linear("projector.fc2", h2, out, rng),
    ])


def build_time_head(embedding_dim, hidden, rng):
    """MLP regressing the signed scaled gap from concatenated embeddings."""
    return Sequential([
        Linear("time_head.fc0", 2 * embedding_dim, hidden, rng),
        ReLU(),
        Linear("time_head.fc1", hidden, 1, rng),
    ])

"""Parameter containers: a small Module base and the full-precision layers."""

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


class Module:
    """Base class tracking parameters, buffers and submodules by attribute.

    Parameters are ``Parameter`` attributes; buffers are
    the numpy arrays named in ``_buffers``.  Iteration follows attribute
    insertion order, so names are stable across runs.
    """

    _buffers = ()
    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        state = {f"param:{k}": v.data.copy() for k, v in self.named_parameters()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param:{k}" for k in params} | {f"buffer:{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state dict is missing entries: {sorted(missing)[:5]}")
        for k, p in params.items():
            p.data[...] = state[f"param:{k}"]
        for k, b in buffers.items():
            b[...] = state[f"buffer:{k}"]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(shape, fan_in, rng, dtype=None):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or ad.get_default_dtype())


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        dtype = ad.get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self):
        return self.gamma.shape[0]

    def forward(self, x):
        return ad.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Conv2d(Module):
    """Full-precision convolution (used only for the stem)."""

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform((c_out, c_in, kernel_size, kernel_size), fan_in, rng))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ad.conv2d(x, self.weight, None, self.stride, self.padding)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None):
        rng = rng or np.random.default_rng(0)
        dtype = ad.get_default_dtype()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)

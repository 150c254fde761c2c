"""Parameter containers shared by the network components."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters, non-trainable buffers and child modules.

    Names are hierarchical (``stage0.block1.conv1.weight``) and iteration
    order is registration order, which keeps checkpoints byte-stable.
    """

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}

    def add_param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, value):
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self):
        state = {name: t.data for name, t in self.named_parameters()}
        state.update({name: arr for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        unexpected = [k for k in state if k not in expected]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
        for name, arr in self.named_buffers():
            arr[...] = state[name]


def kaiming(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, floor_mode=False):
        super().__init__()
        self.floor_mode = floor_mode
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride, self.padding = stride, padding
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, (kh, kw)
        self.weight = self.add_param("weight", kaiming(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.floor_mode)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, rng, in_features, out_features):
        super().__init__()
        self.weight = self.add_param("weight", kaiming(rng, (out_features, in_features), in_features, gain=1.0))
        self.bias = self.add_param("bias", np.zeros(out_features))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

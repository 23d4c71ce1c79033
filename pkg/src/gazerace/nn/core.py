"""Parameters, modules and the global precision switch."""

from contextlib import contextmanager

import numpy as np

_DTYPE = [np.float32]


def get_dtype():
    return _DTYPE[0]


def set_dtype(dtype):
    """Set the dtype used for new parameters and layer computations (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE[0] = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the engine dtype, e.g. ``with precision(np.float64):`` for gradient checks."""
    old = _DTYPE[0]
    set_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE[0] = old


class Param:
    """A trainable array with a same-shaped gradient accumulator."""

    def __init__(self, data):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)


class Module:
    """Base class: subclasses register ``Param`` attributes, buffers and child modules.

    ``forward`` caches what ``backward`` needs; ``backward`` takes the gradient
    of the loss w.r.t. the output, accumulates parameter gradients and returns
    the gradient w.r.t. the input.
    """

    training = True

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def children(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Module)]

    def named_params(self, prefix=""):
        out = []
        for k, v in vars(self).items():
            if isinstance(v, Param):
                out.append((prefix + k, v))
        for k, child in self.children():
            out.extend(child.named_params(f"{prefix}{k}."))
        return out

    def named_buffers(self, prefix=""):
        out = [(prefix + k, getattr(self, k)) for k in getattr(self, "_buffers", ())]
        for k, child in self.children():
            out.extend(child.named_buffers(f"{prefix}{k}."))
        return out

    def set_buffer(self, dotted, value):
        head, _, rest = dotted.partition(".")
        if rest:
            getattr(self, head).set_buffer(rest, value)
        else:
            setattr(self, head, value)

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for _, c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (used to enter 64-bit verification mode)."""
        for p in self.params():
            p.astype(dtype)
        for name, b in self.named_buffers():
            self.set_buffer(name, np.asarray(b).astype(dtype))
        return self

    def num_params(self):
        return int(sum(p.data.size for p in self.params()))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            setattr(self, f"l{i}", layer)

    def children(self):
        return [(f"l{i}", layer) for i, layer in enumerate(self.layers)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def __len__(self):
        return len(self.layers)

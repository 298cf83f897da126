from logging import getLogger

import numpy as np

from . import ContractError, DimensionError, Tensor


log = getLogger("SSL")


class ParameterStore:
    """Named trainable parameters plus non-trainable buffers.

    Paths are dot-separated (`encoder.layers.0.weight`). Every parameter is a
    leaf `Tensor` with `requires_grad` set, so its `grad` accumulator always
    has the parameter's shape.
    """

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def add(self, path, data):
        if path in self.params or path in self.buffers:
            raise ContractError(f"duplicate parameter path {path}")
        tensor = Tensor(data, requires_grad=True, name=path)
        self.params[path] = tensor
        return tensor

    def add_buffer(self, path, data):
        if path in self.params or path in self.buffers:
            raise ContractError(f"duplicate buffer path {path}")
        buf = np.array(data, dtype=Tensor(0).data.dtype)
        self.buffers[path] = buf
        return buf

    def __getitem__(self, path):
        return self.params[path]

    def __contains__(self, path):
        return path in self.params

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def state(self):
        """Flat name -> ndarray mapping of parameters and buffers."""
        out = {f"param.{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, state):
        for path, tensor in self.params.items():
            value = state[f"param.{path}"]
            if value.shape != tensor.shape:
                raise DimensionError(f"parameter {path}: stored {value.shape} vs model {tensor.shape}")
            tensor.data[...] = value
        for path, buf in self.buffers.items():
            value = state[f"buffer.{path}"]
            if value.shape != buf.shape:
                raise DimensionError(f"buffer {path}: stored {value.shape} vs model {buf.shape}")
            buf[...] = value


def backpropagate(loss, record, store=None):
    """Replay `record` in reverse, accumulating into leaf gradients.

    Leaf gradients are added to what is already there, so two passes over the
    same graph give twice the single-pass gradient. `store` is only used to
    check that every parameter reached belongs to it.
    """
    if loss.size != 1:
        raise ContractError(f"backpropagate needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        log.debug("backpropagate: loss does not depend on any parameter")
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for tensor, tg in zip(node.inputs, input_grads):
            if tg is None or not tensor.requires_grad:
                continue
            if tg.shape != tensor.shape:
                raise DimensionError(f"{node.op}: gradient shape {tg.shape} != input shape {tensor.shape}")
            if tensor.is_leaf:
                if store is not None and tensor.name is not None and tensor.name not in store:
                    raise ContractError(f"parameter {tensor.name} is not in the store")
                tensor.grad += tg
            else:
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = np.array(tg, copy=True)

"""Minimal deterministic tensor engine: tensors, an op tape, and backprop.

Design notes
------------
Every differentiable operation is a pure pair of functions

    forward(params, *input_arrays)  -> (output_array, saved)
    backward(grad_out, saved, params, *input_arrays) -> tuple of input grads

registered under a string identifier. The Tape stores one OpRecord per
forward call; walking the record list in reverse and accumulating grads
is the whole of backprop, and re-running the forwards in recorded order
reproduces the original pass bit for bit (kernels use fixed reduction
orders and no hidden state).

Gradients accumulate with plain += in record order, so a fixed graph and
fixed inputs give bit-identical gradients run to run.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

# op name -> (forward, backward); populated by ops.register_op at import time
OP_REGISTRY: dict[str, tuple] = {}


def register_op(name, forward, backward):
    """Register a forward/backward kernel pair under a stable identifier."""
    if name in OP_REGISTRY:
        raise ValueError(f"op {name!r} already registered")
    OP_REGISTRY[name] = (forward, backward)


class Tensor:
    """A dense array plus an optional gradient buffer.

    Data is float32 in production graphs and float64 in gradient-check
    tests. The engine never changes dtype behind the caller's back.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"


class OpRecord:
    """One executed op: identifier, operands, output, parameters, saved state."""

    __slots__ = ("op", "inputs", "output", "params", "saved")

    def __init__(self, op, inputs, output, params, saved):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.params = params
        self.saved = saved

    def __repr__(self):
        shapes = ", ".join(str(t.shape) for t in self.inputs)
        return f"OpRecord({self.op}, in=[{shapes}], out={self.output.shape})"


class Tape:
    """Ordered list of OpRecords for one forward pass."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, params, saved):
        self.records.append(OpRecord(op, inputs, output, params, saved))

    def backward(self, seeds):
        """Backpropagate from seeded outputs to every requires_grad tensor.

        Args:
            seeds: list of (tensor, gradient array) pairs. Multiple seeds are
                allowed (for example an edge loss plus auxiliary flow losses);
                their contributions simply add.
        """
        for t, g in seeds:
            g = np.asarray(g, dtype=t.data.dtype)
            if g.shape != t.data.shape:
                raise ValueError(
                    f"seed gradient shape {g.shape} != tensor shape {t.data.shape}"
                )
            t.accumulate_grad(g)
        for rec in reversed(self.records):
            g_out = rec.output.grad
            if g_out is None:
                continue
            _, backward = OP_REGISTRY[rec.op]
            need = [t.requires_grad for t in rec.inputs]
            if not any(need):
                continue
            grads = backward(
                g_out, rec.saved, rec.params, *[t.data for t in rec.inputs]
            )
            for t, g, wanted in zip(rec.inputs, grads, need):
                if wanted and g is not None:
                    t.accumulate_grad(g)
        # Full isfinite sweeps over every activation grad are too slow on one
        # core, so the guarantee is enforced where grads are consumed: named
        # tensors (parameters) here, and again inside the optimizer step.
        for rec in self.records:
            for t in rec.inputs:
                if t.name is not None and t.grad is not None:
                    if not np.all(np.isfinite(t.grad)):
                        raise NumericError(
                            f"non-finite gradient for {t.name} (op {rec.op})"
                        )

    def replay(self):
        """Re-run every recorded forward in order from the stored operands.

        Returns the recomputed output arrays. Used to verify that replaying
        the tape reproduces the original pass bit-identically.
        """
        outs = []
        for rec in self.records:
            forward, _ = OP_REGISTRY[rec.op]
            out, _ = forward(rec.params, *[t.data for t in rec.inputs])
            outs.append(out)
        return outs

def apply_op(tape, name, inputs, **params):
    """Run a registered op, wrap its output, and record it on the tape.

    A tape of None runs the op in inference mode: nothing is recorded and
    saved state is discarded.
    """
    forward, _ = OP_REGISTRY[name]
    arrays = [t.data for t in inputs]
    out, saved = forward(params, *arrays)
    out_t = Tensor(out, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None:
        tape.record(name, tuple(inputs), out_t, params, saved)
    return out_t

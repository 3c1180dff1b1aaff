"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records primitive operations in execution order.  Each node
stores its value, the indices of its inputs and a vector-Jacobian product
closure.  :meth:`Tape.backward` sweeps the nodes once in reverse order.

Values are batched arrays: a batch of scalars is a 1-D array, a batch of
feature vectors a 2-D ``(batch, features)`` array.  There is no general
broadcasting; binary operations require equal shapes, and only
:meth:`Tape.scale` / :meth:`Tape.shift` accept a constant that numpy can
broadcast against the node.

Example::

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = tape.square(x)
    grads = tape.backward(y)
    grads[x]  # array([6.])
"""

import numpy as np
from scipy.special import expit

from .errors import TapeError


class Node:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape, index, value, requires_grad):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape}, requires_grad={self.requires_grad})"


class Gradients:
    """Result of a backward sweep, indexed by node."""

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, node):
        g = self._grads[node.index]
        if g is None:
            return np.zeros_like(node.value)
        return g

    def get(self, node):
        return self._grads[node.index]


class Tape:
    def __init__(self):
        self.nodes = []
        self._parents = []
        self._vjps = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents=(), vjp=None, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, requires_grad)
        self.nodes.append(node)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return node

    def _check(self, *nodes):
        for n in nodes:
            if n.tape is not self:
                raise TapeError("node belongs to a different tape")

    # leaves

    def leaf(self, value, requires_grad=True):
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, requires_grad=requires_grad)

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    # primitives

    def add(self, a, b):
        self._check(a, b)
        _same_shape(a, b)
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a, b):
        self._check(a, b)
        _same_shape(a, b)
        return self._push(a.value - b.value, (a, b), lambda g: (g, -g))

    def mul(self, a, b):
        self._check(a, b)
        _same_shape(a, b)
        av, bv = a.value, b.value
        return self._push(av * bv, (a, b), lambda g: (g * bv, g * av))

    def scale(self, a, c):
        """Multiply by a constant (scalar or array broadcastable to ``a``)."""
        self._check(a)
        c = np.asarray(c, dtype=np.float64)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def shift(self, a, c):
        """Add a constant (scalar or array broadcastable to ``a``)."""
        self._check(a)
        return self._push(a.value + np.asarray(c, dtype=np.float64), (a,), lambda g: (g,))

    def square(self, a):
        self._check(a)
        av = a.value
        return self._push(av * av, (a,), lambda g: (2.0 * av * g,))

    def silu(self, a):
        self._check(a)
        av = a.value
        s = expit(av)
        out = av * s

        def vjp(g):
            return (g * (s + out * (1.0 - s)),)

        return self._push(out, (a,), vjp)

    def sigmoid(self, a):
        self._check(a)
        s = expit(a.value)
        return self._push(s, (a,), lambda g: (g * s * (1.0 - s),))

    def elementwise(self, a, value, deriv):
        """Record ``value = f(a)`` with precomputed local derivative ``f'(a)``."""
        self._check(a)
        value = np.asarray(value, dtype=np.float64)
        deriv = np.asarray(deriv, dtype=np.float64)
        return self._push(value, (a,), lambda g: (g * deriv,))

    def affine(self, x, w, b):
        """``x @ w + b`` for ``x`` of shape (batch, in), ``w`` (in, out), ``b`` (out,)."""
        self._check(x, w, b)
        xv, wv = x.value, w.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or b.value.shape != (wv.shape[1],):
            raise ValueError(f"affine shape mismatch: x{xv.shape} w{wv.shape} b{b.value.shape}")
        out = xv @ wv + b.value
        need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

        def vjp(g):
            return (
                g @ wv.T if need_x else None,
                xv.T @ g if need_w else None,
                g.sum(axis=0) if need_b else None,
            )

        return self._push(out, (x, w, b), vjp)

    def concat(self, columns):
        """Stack 1-D nodes of equal length into a (batch, len(columns)) node."""
        self._check(*columns)
        for c in columns[1:]:
            _same_shape(columns[0], c)
        out = np.stack([c.value for c in columns], axis=1)
        return self._push(out, tuple(columns), lambda g: tuple(g[:, i] for i in range(g.shape[1])))

    def column(self, a):
        """(batch,) -> (batch, 1)."""
        self._check(a)
        return self._push(a.value[:, None], (a,), lambda g: (g[:, 0],))

    def flatten(self, a):
        """(batch, 1) -> (batch,)."""
        self._check(a)
        if a.value.ndim != 2 or a.value.shape[1] != 1:
            raise ValueError(f"flatten expects (batch, 1), got {a.value.shape}")
        return self._push(a.value[:, 0], (a,), lambda g: (g[:, None],))

    def sum(self, a):
        self._check(a)
        shape = a.value.shape
        return self._push(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, g, dtype=np.float64),))

    def mean(self, a):
        self._check(a)
        shape, n = a.value.shape, a.value.size
        return self._push(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=np.float64),))

    # reverse sweep

    def backward(self, output, seed=None):
        """Propagate ``seed`` (default ones) from ``output`` back to every node.

        Returns a :class:`Gradients` map; nodes that do not influence the
        output, or do not require gradients, map to zeros.
        """
        if not self.nodes:
            raise TapeError("backward called on an empty tape")
        self._check(output)
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output shape {output.value.shape}")
        grads = [None] * len(self.nodes)
        grads[output.index] = seed
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None or not self.nodes[i].requires_grad:
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            for p, pg in zip(self._parents[i], vjp(g)):
                if pg is None or not self.nodes[p].requires_grad:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
        return Gradients(grads)


def _same_shape(a, b):
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")

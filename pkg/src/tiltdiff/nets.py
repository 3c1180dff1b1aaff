"""Small fully connected networks and their on-disk container.

Score networks take ``(x, t)`` and predict the injected noise (``head="eps"``);
the one-step generator takes ``z`` and outputs a sample directly
(``head="direct"``).  The network itself is agnostic to how time is encoded;
score wrappers pass ``VpSchedule.net_time(t)``.

Checkpoint format (``.npz``, format version 1):

* ``header`` -- JSON string with ``format_version``, ``input_arity``,
  ``hidden_width``, ``depth``, ``activation`` and ``head``;
* ``w0, b0, w1, b1, ...`` -- float64 layer weights ``(in, out)`` and biases
  ``(out,)``, input layer first.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

FORMAT_VERSION = 1
HEADS = ("eps", "direct")
ACTIVATIONS = ("silu",)


@dataclass
class MlpNet:
    weights: list
    biases: list
    input_arity: int = 2
    head: str = "eps"
    activation: str = "silu"
    trainable: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        if self.weights[0].shape[0] != self.input_arity:
            raise ValueError(f"first layer expects {self.weights[0].shape[0]} inputs, arity is {self.input_arity}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("networks have a scalar output")

    @classmethod
    def init(cls, input_arity, hidden_width=128, depth=3, head="eps", rng=None):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for every layer."""
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [input_arity] + [hidden_width] * depth + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, input_arity=input_arity, head=head)

    @property
    def depth(self):
        """Number of hidden layers."""
        return len(self.weights) - 1

    @property
    def hidden_width(self):
        return self.weights[0].shape[1] if self.depth else 0

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return MlpNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            input_arity=self.input_arity,
            head=self.head,
            activation=self.activation,
            trainable=self.trainable,
        )

    def _check_inputs(self, inputs):
        if len(inputs) != self.input_arity:
            raise ValueError(f"network takes {self.input_arity} inputs, got {len(inputs)}")

    def forward(self, tape, *inputs, track_params=None):
        """Evaluate on a tape.

        ``inputs`` are 1-D nodes of equal batch length.  Returns
        ``(output_node, param_nodes)`` where ``param_nodes`` follows
        :meth:`params` order.  Parameters are recorded as gradient-carrying
        leaves only when ``track_params`` (default: ``self.trainable``).
        """
        self._check_inputs(inputs)
        track = self.trainable if track_params is None else track_params
        h = tape.concat(list(inputs)) if len(inputs) > 1 else tape.column(inputs[0])
        param_nodes = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wn = tape.leaf(w, requires_grad=track)
            bn = tape.leaf(b, requires_grad=track)
            param_nodes.extend((wn, bn))
            h = tape.affine(h, wn, bn)
            if i < last:
                h = tape.silu(h)
        return tape.flatten(h), param_nodes

    def __call__(self, *inputs):
        """Plain numpy evaluation, no tape."""
        self._check_inputs(inputs)
        h = np.stack([np.asarray(x, dtype=np.float64) for x in inputs], axis=1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h * expit(h)
        return h[:, 0]

    def digest(self):
        """SHA-256 over the raw parameter bytes (frozen-model checks)."""
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def header(self):
        return {
            "format_version": FORMAT_VERSION,
            "input_arity": self.input_arity,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "activation": self.activation,
            "head": self.head,
        }

    def save(self, path):
        arrays = {"header": np.array(json.dumps(self.header(), sort_keys=True))}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
            n = header["depth"] + 1
            weights = [data[f"w{i}"].astype(np.float64) for i in range(n)]
            biases = [data[f"b{i}"].astype(np.float64) for i in range(n)]
        net = cls(weights, biases, input_arity=header["input_arity"], head=header["head"], activation=header["activation"])
        if net.hidden_width != header["hidden_width"]:
            raise ValueError("checkpoint header does not match stored weights")
        return net

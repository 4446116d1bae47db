#!/usr/bin/env python

"""Fully-connected autoencoders with square activations, trained with masked
backpropagation, MSE loss and Adam. This is the training and retraining engine
for every pipeline stage.

Usage: autoencoder.py --arch=<arch> --out=<ckpt> [--mnist_dir=<mnist_dir>] [--seed=<seed>] [--epochs=<epochs>] [--train_limit=<n>]
Options:
--arch=<arch>               One of autoenc1, autoenc2, autoenc3
--out=<ckpt>                Path of the checkpoint (.npz) to write
--mnist_dir=<mnist_dir>     Directory with the MNIST IDX files, optional
--seed=<seed>               PRNG seed [default: 0]
--epochs=<epochs>           Training epochs, defaults to the architecture's value
--train_limit=<n>           Only use the first n training images, optional
"""

import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from docopt import docopt

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.utils.utils import make_rng

# layer widths, input to output
ARCHITECTURES = {
    "autoenc1": [784, 32, 784],
    "autoenc2": [784, 64, 784],
    "autoenc3": [784, 64, 32, 64, 784],
}
# {training epochs, re-training epochs}
DEFAULT_EPOCHS = {
    "autoenc1": (20, 10),
    "autoenc2": (30, 20),
    "autoenc3": (30, 20),
}
DEFAULT_BATCH_SIZE = 10
DEFAULT_LEARNING_RATE = 0.001
CHECKPOINT_FORMAT = "hepex-ckpt/1"

INIT_STREAM = 0
SHUFFLE_STREAM = 1


class StaleCacheError(ValueError):
    """Raised when backward is given a cache from before the last parameter update."""


@dataclass
class FCLayer:
    """One dense layer ``z = W a + b``; ``mask`` marks the weights still in play."""

    weights: np.ndarray
    bias: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.weights.shape, dtype=bool)
        self.mask = np.array(self.mask, dtype=bool)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"Expected weights (out, in) and bias (out,), got {self.weights.shape} and {self.bias.shape}"
            )
        if self.mask.shape != self.weights.shape:
            raise ValueError(f"Mask shape {self.mask.shape} does not match weights {self.weights.shape}")
        self.apply_mask()

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def in_dim(self):
        return self.weights.shape[1]

    def apply_mask(self):
        self.weights[~self.mask] = 0.0

    def copy(self):
        return FCLayer(self.weights.copy(), self.bias.copy(), self.mask.copy())


@dataclass
class Network:
    """Sequence of FC layers, each followed by the square activation.

    ``square_output=False`` leaves the last layer linear (experimentation only;
    the default follows "every FC layer is followed by an activation layer").
    ``version`` increases on every parameter update so stale caches are caught.
    """

    layers: list
    arch: str = "custom"
    square_output: bool = True
    version: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("A network needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise ValueError(
                    f"Layer {k} outputs {self.layers[k].out_dim} but layer {k + 1} expects {self.layers[k + 1].in_dim}"
                )

    @property
    def dims(self):
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def masks(self):
        return [layer.mask for layer in self.layers]

    def squares(self, k):
        """Whether layer ``k`` is followed by the square activation."""
        return self.square_output or k < len(self.layers) - 1

    def apply_masks(self):
        for layer in self.layers:
            layer.apply_mask()
        self.version += 1

    def copy(self):
        return Network([layer.copy() for layer in self.layers], self.arch, self.square_output, self.version)


@dataclass
class ForwardCache:
    inputs: list
    pre_activations: list
    output: np.ndarray
    version: int


@dataclass
class Gradients:
    weights: list
    biases: list


@dataclass
class AdamState:
    """Adam moments for every weight and bias of one network."""

    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m_weights: list = field(default_factory=list)
    v_weights: list = field(default_factory=list)
    m_biases: list = field(default_factory=list)
    v_biases: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net, lr=DEFAULT_LEARNING_RATE):
        return cls(
            lr=lr,
            m_weights=[np.zeros_like(layer.weights) for layer in net.layers],
            v_weights=[np.zeros_like(layer.weights) for layer in net.layers],
            m_biases=[np.zeros_like(layer.bias) for layer in net.layers],
            v_biases=[np.zeros_like(layer.bias) for layer in net.layers],
        )

    def _update(self, param, grad, m, v):
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** self.step)
        v_hat = v / (1.0 - self.beta2 ** self.step)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def apply(self, net, grads):
        """One optimizer step, then re-apply every mask."""
        if len(self.m_weights) != len(net.layers) or any(
            m.shape != layer.weights.shape for m, layer in zip(self.m_weights, net.layers)
        ):
            raise ValueError("Adam state does not match the network's parameter shapes")
        self.step += 1
        for k, layer in enumerate(net.layers):
            self._update(layer.weights, grads.weights[k], self.m_weights[k], self.v_weights[k])
            self._update(layer.bias, grads.biases[k], self.m_biases[k], self.v_biases[k])
        net.apply_masks()


def build_autoencoder(arch, seed=0, square_output=True):
    """Builds one of the three autoencoders with fresh weights and all-ones masks.

    Parameters
    ----------
    arch : str
        "autoenc1" (784-32-784), "autoenc2" (784-64-784) or "autoenc3" (784-64-32-64-784)
    seed : int, optional
        PRNG seed, by default 0
    square_output : bool, optional
        Square activation after the last layer too, by default True

    Returns
    -------
    Network
        Weights and biases uniform in +-sqrt(1/in_dim)
    """
    key = str(arch).lower()
    if key not in ARCHITECTURES:
        raise ValueError(f"Unknown architecture {arch!r}, expected one of {sorted(ARCHITECTURES)}")
    dims = ARCHITECTURES[key]
    return build_network(dims, seed=seed, square_output=square_output, arch=key)


def build_network(dims, seed=0, square_output=True, arch="custom"):
    """Builds a network with arbitrary layer widths (used by tests and the verify command)."""
    rng = make_rng(seed, INIT_STREAM)
    layers = []
    for in_dim, out_dim in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(1.0 / in_dim)
        weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        bias = rng.uniform(-bound, bound, size=out_dim)
        layers.append(FCLayer(weights, bias))
    return Network(layers, arch=arch, square_output=square_output)


def forward(net, batch):
    """Runs a batch (samples in rows) through the network.

    Returns the output and the per-layer inputs and pre-activations that
    ``backward`` needs.
    """
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise ValueError(f"Expected a batch of shape (B, {net.in_dim}), got {a.shape}")
    inputs, pre_activations = [], []
    for k, layer in enumerate(net.layers):
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        pre_activations.append(z)
        a = z * z if net.squares(k) else z
    return a, ForwardCache(inputs, pre_activations, a, net.version)


def mse_loss(output, target):
    """Mean over every element of the squared difference."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise ValueError(f"Output shape {output.shape} does not match target {target.shape}")
    return float(np.mean((output - target) ** 2))


def backward(net, cache, target):
    """Gradients of the MSE loss for every weight and bias.

    Gradients of pruned weights are zeroed so the optimizer moments of pruned
    weights never move.
    """
    if cache.version != net.version:
        raise StaleCacheError(
            f"Cache is from parameter version {cache.version}, network is at {net.version}"
        )
    target = np.asarray(target, dtype=np.float64)
    if target.shape != cache.output.shape:
        raise ValueError(f"Target shape {target.shape} does not match output {cache.output.shape}")

    delta = 2.0 * (cache.output - target) / cache.output.size
    grad_w = [None] * len(net.layers)
    grad_b = [None] * len(net.layers)
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        z = cache.pre_activations[k]
        dz = delta * 2.0 * z if net.squares(k) else delta
        gw = dz.T @ cache.inputs[k]
        gw[~layer.mask] = 0.0
        grad_w[k] = gw
        grad_b[k] = dz.sum(axis=0)
        if k > 0:
            delta = dz @ layer.weights
    return Gradients(grad_w, grad_b)


def gradient_check(net, batch, n_checks=20, eps=1e-5, seed=0):
    """Largest relative error between ``backward`` and central finite differences.

    Checks ``n_checks`` randomly chosen active weights and biases. The error is
    |analytic - numeric| / max(|analytic| + |numeric|, 1e-4), so gradients
    near zero are compared in absolute terms.
    """
    batch = np.asarray(batch, dtype=np.float64)
    _, cache = forward(net, batch)
    grads = backward(net, cache, batch)
    rng = make_rng(seed)

    def loss():
        return mse_loss(forward(net, batch)[0], batch)

    worst = 0.0
    for _ in range(n_checks):
        k = int(rng.integers(len(net.layers)))
        layer = net.layers[k]
        active = np.flatnonzero(layer.mask)
        if rng.random() < 0.5 and active.size:
            params, flat, analytic = layer.weights, int(rng.choice(active)), grads.weights[k]
        else:
            params, flat, analytic = layer.bias, int(rng.integers(layer.bias.size)), grads.biases[k]
        index = np.unravel_index(flat, params.shape)
        saved = params[index]
        params[index] = saved + eps
        plus = loss()
        params[index] = saved - eps
        minus = loss()
        params[index] = saved
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[index])
        worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4))
    return worst


def train(net, dataset, epochs, batch_size=DEFAULT_BATCH_SIZE, adam=None, seed=0, verbose=False):
    """Trains the autoencoder to reconstruct its input.

    Parameters
    ----------
    net : Network
        Trained in place; masks stay fixed
    dataset : Dataset
        Training samples
    epochs : int
        Passes over the data; 0 leaves the network unchanged
    batch_size : int, optional
        Samples per Adam step, by default 10
    adam : AdamState, optional
        Optimizer state, a fresh one with lr 0.001 by default
    seed : int, optional
        Seeds the per-epoch shuffling, by default 0
    verbose : bool, optional
        Print one line per epoch

    Returns
    -------
    list of float
        Mean training loss of each epoch
    """
    if batch_size < 1:
        raise ValueError(f"Expected batch_size >= 1, got {batch_size}")
    if dataset.count == 0:
        raise ValueError("Cannot train on an empty dataset")
    if adam is None:
        adam = AdamState.for_network(net)

    samples = dataset.samples
    history = []
    for epoch in range(epochs):
        order = make_rng(seed, SHUFFLE_STREAM, epoch).permutation(dataset.count)
        total = 0.0
        for start in range(0, dataset.count, batch_size):
            x = samples[order[start:start + batch_size]]
            output, cache = forward(net, x)
            total += mse_loss(output, x) * x.shape[0]
            adam.apply(net, backward(net, cache, x))
        history.append(total / dataset.count)
        if verbose:
            print(f"Epoch {epoch + 1}/{epochs}: training loss {history[-1]:.6e}")
    return history


def evaluate(net, dataset, batch_size=1000):
    """Mean test MSE over the dataset, in fixed sample order, without updates."""
    if dataset.count == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    total = 0.0
    for start in range(0, dataset.count, batch_size):
        x = dataset.samples[start:start + batch_size]
        output, _ = forward(net, x)
        total += float(np.sum((output - x) ** 2))
    return total / (dataset.count * dataset.dim)


def save_checkpoint(path, net, config=None, permutations=None):
    """Writes the network, its masks, the config and boundary permutations to ``.npz``.

    Arrays are stored little-endian (``<f8`` weights, ``|b1`` masks, ``<i8``
    permutation vectors); text fields are unicode arrays; the format tag is
    ``hepex-ckpt/1``.
    """
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "arch": np.array(net.arch),
        "square_output": np.array(bool(net.square_output)),
        "dims": np.array(net.dims, dtype="<i8"),
        "config_json": np.array(json.dumps(config or {}, sort_keys=True)),
        "n_permutations": np.array(0 if permutations is None else len(permutations), dtype="<i8"),
    }
    for k, layer in enumerate(net.layers):
        arrays[f"weights_{k}"] = layer.weights.astype("<f8")
        arrays[f"bias_{k}"] = layer.bias.astype("<f8")
        arrays[f"mask_{k}"] = layer.mask
    for b, perm in enumerate(permutations or []):
        arrays[f"perm_{b}"] = np.asarray(perm, dtype="<i8")
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Reads a checkpoint written by ``save_checkpoint``.

    Returns
    -------
    tuple
        (Network, config dict, list of permutation vectors or None)
    """
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data.files or str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
        dims = [int(d) for d in data["dims"]]
        layers = [
            FCLayer(data[f"weights_{k}"], data[f"bias_{k}"], data[f"mask_{k}"])
            for k in range(len(dims) - 1)
        ]
        net = Network(layers, arch=str(data["arch"]), square_output=bool(data["square_output"]))
        config = json.loads(str(data["config_json"]))
        n_perms = int(data["n_permutations"])
        permutations = [data[f"perm_{b}"].astype(np.int64) for b in range(n_perms)] or None
    return net, config, permutations


def main():

    opt = docopt(__doc__)
    from src.data.load_mnist_data import load_mnist

    arch = opt["--arch"].lower()
    seed = int(opt["--seed"])
    epochs = int(opt["--epochs"]) if opt["--epochs"] else DEFAULT_EPOCHS[arch][0]

    print("Loading MNIST...")
    train_set, test_set = load_mnist(opt["--mnist_dir"])
    if opt["--train_limit"]:
        train_set = train_set.take(int(opt["--train_limit"]))
    print(f"Training {arch} for {epochs} epochs with seed {seed}...")
    net = build_autoencoder(arch, seed)
    train(net, train_set, epochs, seed=seed, verbose=True)
    print(f"Test loss: {evaluate(net, test_set):.6e}")
    save_checkpoint(opt["--out"], net, config={"arch": arch, "seed": seed, "epochs": epochs})
    print(f"Checkpoint saved to: {opt['--out']}")


if __name__ == "__main__":
    main()

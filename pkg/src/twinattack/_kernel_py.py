"""Reference numpy implementation of the hot numerical kernels.

Semantics here are the contract; the compiled backend (_kernel_c) must match
them to float tolerance. Layers are tanh-activated except the last, which is
linear. Weight matrices are (fan_in, fan_out), inputs are batches (B, d_in).
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def forward_full(weights, biases, X):
    """Feed-forward pass keeping hidden activations for backprop.

    Returns (Y, acts) where acts[i] is the post-tanh activation of hidden
    layer i, shape (B, h_i).
    """
    A = X
    acts = []
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        Z = A @ W + b
        if i < last:
            A = np.tanh(Z)
            acts.append(A)
        else:
            A = Z
    return A, acts


def forward(weights, biases, X):
    return forward_full(weights, biases, X)[0]


def backward(weights, biases, X, acts, dY):
    """Backpropagate dY = dL/d(output) through the network.

    Returns (dWs, dbs, dX): gradients w.r.t. every weight matrix, bias
    vector, and the input batch. Gradients are sums over the batch; callers
    scale dY for means.
    """
    layer_inputs = [X] + acts          # input to layer i is layer_inputs[i]
    G = dY
    dWs = [None] * len(weights)
    dbs = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        A_in = layer_inputs[i]
        dWs[i] = A_in.T @ G
        dbs[i] = G.sum(axis=0)
        G = G @ weights[i].T
        if i > 0:
            G = G * (1.0 - acts[i - 1] ** 2)   # d tanh(z) / dz = 1 - tanh(z)^2
    return dWs, dbs, G


def mahalanobis_sq(R, mu, sigma_inv):
    """Squared Mahalanobis distances of each row of R from mu."""
    D = R - mu
    return np.einsum("bi,ij,bj->b", D, sigma_inv, D)

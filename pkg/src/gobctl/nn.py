"""Dense network numerics: forward pass, reverse-mode gradients, AdamW.

The architecture is fixed and small (dense -> batch norm -> ReLU -> dropout
-> dense -> ReLU -> dense), so differentiation is written out by hand rather
than pulling in an autodiff engine. That keeps the numerical core a plain
numpy affair and makes gradients with respect to the *inputs* (which the
inversion engine consumes) as cheap and exact as parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch


@dataclass
class NetworkSpec:
    input_dim: int = 7
    hidden: tuple[int, ...] = (128, 64)
    batch_norm_after_first_hidden: bool = True
    dropout_rate: float = 0.1
    output_dim: int = 2

    def validate(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1 or not self.hidden:
            raise ValueError("network dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "batch_norm_after_first_hidden": self.batch_norm_after_first_hidden,
            "dropout_rate": self.dropout_rate,
            "output_dim": self.output_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        spec = NetworkSpec(
            input_dim=int(d["input_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            batch_norm_after_first_hidden=bool(d["batch_norm_after_first_hidden"]),
            dropout_rate=float(d["dropout_rate"]),
            output_dim=int(d["output_dim"]),
        )
        spec.validate()
        return spec


class MLP:
    """Fully connected rectifier network with one optional batch-norm step.

    Layer chain: dense -> [batch norm] -> ReLU -> [dropout] -> dense -> ReLU
    -> ... -> dense. Batch norm and dropout act only on the first hidden
    block, matching the regression architecture this package trains.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3E7]))
        dims = [spec.input_dim, *spec.hidden, spec.output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.use_bn = spec.batch_norm_after_first_hidden
        h1 = spec.hidden[0]
        self.gamma = np.ones(h1) if self.use_bn else None
        self.beta = np.zeros(h1) if self.use_bn else None
        self.running_mean = np.zeros(h1) if self.use_bn else None
        self.running_var = np.ones(h1) if self.use_bn else None

    # -- bookkeeping ---------------------------------------------------

    def parameter_count(self) -> int:
        count = sum(w.size for w in self.weights) + sum(b.size for b in self.biases)
        if self.use_bn:
            count += self.gamma.size + self.beta.size
        return count

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = w
            params[f"b{i}"] = b
        if self.use_bn:
            params["gamma"] = self.gamma
            params["beta"] = self.beta
        return params

    def copy_state(self) -> dict:
        state = {k: v.copy() for k, v in self.parameters().items()}
        if self.use_bn:
            state["running_mean"] = self.running_mean.copy()
            state["running_var"] = self.running_var.copy()
        return state

    def load_state(self, state: dict) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = state[f"W{i}"].copy()
            self.biases[i] = state[f"b{i}"].copy()
        if self.use_bn:
            self.gamma = state["gamma"].copy()
            self.beta = state["beta"].copy()
            self.running_mean = state["running_mean"].copy()
            self.running_var = state["running_var"].copy()

    # -- forward / backward ---------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict]:
        """Returns (output, cache). ``cache`` feeds :meth:`backward`.

        Training mode uses batch statistics for the normalization step
        (updating the running estimates) and applies inverted dropout;
        inference mode is deterministic.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"expected {self.spec.input_dim} input features, got {x.shape[1]}"
            )
        cache: dict = {"x": x, "training": training}
        z1 = x @ self.weights[0] + self.biases[0]
        cache["z1"] = z1
        if self.use_bn:
            if training:
                mu = z1.mean(axis=0)
                var = z1.var(axis=0)
                self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu
                self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
            else:
                mu, var = self.running_mean, self.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z1 - mu) * inv_std
            a1 = self.gamma * xhat + self.beta
            cache.update(xhat=xhat, inv_std=inv_std)
        else:
            a1 = z1
        r1 = np.maximum(a1, 0.0)
        cache["a1"] = a1
        if training and self.spec.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode forward with dropout needs an rng")
            keep = 1.0 - self.spec.dropout_rate
            mask = (rng.random(r1.shape) < keep) / keep
            r1 = r1 * mask
            cache["dropout_mask"] = mask
        h = r1
        cache["h_pre"] = []  # pre-activations of subsequent hidden layers
        cache["h_post"] = [r1]
        for i in range(1, len(self.weights) - 1):
            z = h @ self.weights[i] + self.biases[i]
            h = np.maximum(z, 0.0)
            cache["h_pre"].append(z)
            cache["h_post"].append(h)
        y = h @ self.weights[-1] + self.biases[-1]
        return y, cache

    def backward(self, cache: dict, grad_y: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Reverse-mode pass: (parameter gradients, gradient w.r.t. inputs)."""
        grads: dict[str, np.ndarray] = {}
        n_layers = len(self.weights)
        h_post = cache["h_post"]
        h_pre = cache["h_pre"]

        g = np.asarray(grad_y, dtype=float)
        grads[f"W{n_layers - 1}"] = h_post[-1].T @ g
        grads[f"b{n_layers - 1}"] = g.sum(axis=0)
        g = g @ self.weights[-1].T

        for i in range(n_layers - 2, 0, -1):
            g = g * (h_pre[i - 1] > 0)
            grads[f"W{i}"] = h_post[i - 1].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T

        if cache["training"] and "dropout_mask" in cache:
            g = g * cache["dropout_mask"]
        g = g * (cache["a1"] > 0)

        if self.use_bn:
            xhat, inv_std = cache["xhat"], cache["inv_std"]
            grads["gamma"] = (g * xhat).sum(axis=0)
            grads["beta"] = g.sum(axis=0)
            dxhat = g * self.gamma
            if cache["training"]:
                n = xhat.shape[0]
                # batch-statistics backward: mean and variance depend on z1
                g = (
                    dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
                ) * inv_std
                del n
            else:
                g = dxhat * inv_std
        grads["W0"] = cache["x"].T @ g
        grads["b0"] = g.sum(axis=0)
        grad_x = g @ self.weights[0].T
        return grads, grad_x

    def predict(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward(x, training=False)
        return y

    def input_gradient_squared_error(
        self,
        x: np.ndarray,
        targets: np.ndarray,
        target_scales: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-row gradient of sum_t ((y_t - target_t) / scale_t)^2 w.r.t. x.

        Inference mode (frozen normalization statistics, no dropout), so the
        gradient is exact for the deployed prediction path. Returns
        (predictions, gradient) with gradient shaped like x.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        scales = (
            np.ones(self.spec.output_dim)
            if target_scales is None
            else np.asarray(target_scales, dtype=float)
        )
        y, cache = self.forward(x, training=False)
        grad_y = 2.0 * (y - targets) / scales**2
        _, grad_x = self.backward(cache, grad_y)
        return y, grad_x


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay multiplies the weight matrices directly (biases and normalization
    parameters are exempt) instead of being folded into the gradient.
    """

    def __init__(
        self,
        model: MLP,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        if lr <= 0 or weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        self.model = model
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        params = model.parameters()
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        params = self.model.parameters()
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, param in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay > 0 and name.startswith("W"):
                update = update + self.lr * self.weight_decay * param
            param -= update

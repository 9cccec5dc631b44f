from typing import Dict, Optional, Tuple

import numpy as np

from src.exceptions import NumericError, ShapeError, StateError
from src.neuralnet import layers
from src.schemas.network import FCActivation, NetworkParams, NetworkSpec


class ForwardCache:
    """Activations kept by a training-mode forward pass for the backward pass"""

    def __init__(self, batch_size: int):
        self.batch_size = batch_size
        self.blocks = []
        self.head = {}
        self.logits: Optional[np.ndarray] = None


class ConvNet:
    """Stateless network: parameters are passed in, so a single instance can serve many threads"""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    def init_params(self, weight_init_scale: float, rng: np.random.Generator) -> NetworkParams:
        """Weights uniform in [-s, s] with s = weight_init_scale / sqrt(fan_in); biases 0; BN scale 1, shift 0"""
        values: Dict[str, np.ndarray] = {}
        for name, shape in self.spec.parameter_shapes():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                bound = weight_init_scale / np.sqrt(fan_in)
                values[name] = rng.uniform(-bound, bound, size=shape)
            elif name in ("bn.gamma", "bn.running_var"):
                values[name] = np.ones(shape)
            else:
                values[name] = np.zeros(shape)
        return NetworkParams(values=values)

    def forward(
        self,
        params: NetworkParams,
        x: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        eps: float = 1e-5
    ) -> Tuple[np.ndarray, ForwardCache]:
        """Destruction probabilities for a (N, C, H, W) batch plus the activation cache"""
        spec = self.spec
        expected = (spec.input_channels, spec.patch_size, spec.patch_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"Input batch has shape {x.shape}, expected (N,) + {expected}")
        if training and spec.dropout_prob > 0 and rng is None:
            raise StateError("Training-mode forward with dropout needs a random generator")

        cache = ForwardCache(len(x))
        h = x
        for block in range(spec.num_conv_blocks):
            h, conv_cache = layers.conv2d_forward(h, params[f"conv{block}.weight"], params[f"conv{block}.bias"])
            h, relu_cache = layers.relu_forward(h)
            h, pool_cache = layers.maxpool_forward(h, spec.pool_stride)
            h, drop_mask = layers.dropout_forward(h, spec.dropout_prob, training, rng)
            cache.blocks.append((conv_cache, relu_cache, pool_cache, drop_mask))

        flat = h.reshape(len(x), -1)
        z1, cache.head["fc1"] = layers.dense_forward(flat, params["fc1.weight"], params["fc1.bias"])
        b1, cache.head["bn"] = layers.batchnorm_forward(
            z1, params["bn.gamma"], params["bn.beta"],
            params["bn.running_mean"], params["bn.running_var"], training, eps
        )
        a1, cache.head["act1"] = self._activate(b1)
        z2, cache.head["fc2"] = layers.dense_forward(a1, params["fc2.weight"], params["fc2.bias"])
        a2, cache.head["act2"] = self._activate(z2)
        logits = a2 @ params["out.weight"] + params["out.bias"][0]
        cache.head["out"] = a2
        cache.head["feature_shape"] = h.shape
        cache.logits = logits

        if not np.all(np.isfinite(logits)):
            raise NumericError("Non-finite network output")
        return layers.sigmoid(logits), cache

    def backward(
        self,
        params: NetworkParams,
        cache: Optional[ForwardCache],
        labels: np.ndarray
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean binary cross-entropy and its gradient with respect to every trainable parameter"""
        if cache is None or cache.logits is None:
            raise StateError("backward called without a cached forward pass")
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape != (cache.batch_size,):
            raise ShapeError(f"Labels have shape {labels.shape}, expected ({cache.batch_size},)")

        grads: Dict[str, np.ndarray] = {}
        loss, dlogits = layers.bce_with_logits(cache.logits, labels)

        a2 = cache.head["out"]
        grads["out.weight"] = a2.T @ dlogits
        grads["out.bias"] = np.array([dlogits.sum()])
        da2 = np.outer(dlogits, params["out.weight"])

        dz2 = self._activate_backward(da2, cache.head["act2"])
        da1, grads["fc2.weight"], grads["fc2.bias"] = layers.dense_backward(dz2, cache.head["fc2"])
        db1 = self._activate_backward(da1, cache.head["act1"])
        dz1, grads["bn.gamma"], grads["bn.beta"] = layers.batchnorm_backward(db1, cache.head["bn"])
        dflat, grads["fc1.weight"], grads["fc1.bias"] = layers.dense_backward(dz1, cache.head["fc1"])

        dh = dflat.reshape(cache.head["feature_shape"])
        for block in reversed(range(self.spec.num_conv_blocks)):
            conv_cache, relu_cache, pool_cache, drop_mask = cache.blocks[block]
            dh = layers.dropout_backward(dh, drop_mask)
            dh = layers.maxpool_backward(dh, pool_cache)
            dh = layers.relu_backward(dh, relu_cache)
            dh, grads[f"conv{block}.weight"], grads[f"conv{block}.bias"] = layers.conv2d_backward(dh, conv_cache)

        return loss, grads

    def loss(
        self,
        params: NetworkParams,
        x: np.ndarray,
        labels: np.ndarray,
        training: bool = True,
        rng: Optional[np.random.Generator] = None
    ) -> float:
        _, cache = self.forward(params, x, training, rng)
        value, _ = layers.bce_with_logits(cache.logits, np.asarray(labels, dtype=np.float64))
        return value

    def update_running_stats(self, params: NetworkParams, cache: ForwardCache, momentum: float) -> None:
        """Fold the batch statistics of a training-mode pass into the running statistics"""
        _, _, _, _, mean, var = cache.head["bn"]
        n = cache.batch_size
        unbiased = var * n / (n - 1) if n > 1 else var
        params.values["bn.running_mean"] = momentum * params["bn.running_mean"] + (1 - momentum) * mean
        params.values["bn.running_var"] = momentum * params["bn.running_var"] + (1 - momentum) * unbiased
        # a constant unit would drive the variance to 0
        params.values["bn.running_var"] = np.maximum(params["bn.running_var"], 1e-12)

    def _activate(self, x: np.ndarray):
        if self.spec.fc_activation == FCActivation.RELU:
            return layers.relu_forward(x)
        return layers.sigmoid_forward(x)

    def _activate_backward(self, dout: np.ndarray, cached: np.ndarray) -> np.ndarray:
        if self.spec.fc_activation == FCActivation.RELU:
            return layers.relu_backward(dout, cached)
        return layers.sigmoid_backward(dout, cached)

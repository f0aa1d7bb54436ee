"""
Nucleo numerico per tensori densi (N, C, H, W)
Kernel forward/backward di convoluzione, batch normalization, ReLU/ReLU6,
layer lineare e pooling medio globale.

L'ordine di accumulazione dei kernel forward è fisso (canale di ingresso,
poi riga del kernel, poi colonna): a parità di input il risultato è identico
bit a bit, ed è su questa proprietà che si basa la classificazione "Masked".
"""

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Forme dei tensori non compatibili con il layer"""


class ModeError(ValueError):
    """Operazione non permessa nella modalità corrente della rete"""


class ActivationKind(enum.Enum):
    STANDARD_RELU = "relu"
    RELU6 = "relu6"


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


RELU6_CEILING = 6.0


def as_tensor(values, dtype=np.float32):
    """Converte in array 4-D (N, C, H, W) controllando il numero di assi"""
    tensor = np.asarray(values, dtype=dtype)
    if tensor.ndim != 4:
        raise ShapeError(f"Tensore atteso a 4 assi (N, C, H, W), ricevuto shape {tensor.shape}")
    return tensor


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def pad_spatial(tensor, padding):
    if padding == 0:
        return tensor
    return np.pad(tensor, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


# ===== LAYER =====

class ConvLayer:
    """Convoluzione 2D con zero-padding, senza dilatazione né gruppi"""

    def __init__(self, weights, bias=None, stride=1, padding=0, name="conv"):
        """
        Inizializza il layer convolutivo

        Args:
            weights: Array (out_channels, in_channels, kH, kW)
            bias: Array (out_channels,) oppure None
            stride: Passo (>= 1)
            padding: Zero-padding simmetrico (>= 0)
            name: Nome usato per parametri e gradienti
        """
        weights = np.asarray(weights)
        if weights.ndim != 4:
            raise ShapeError(f"Pesi convoluzione attesi a 4 assi, ricevuto shape {weights.shape}")
        if weights.shape[2] < 1 or weights.shape[3] < 1:
            raise ShapeError(f"Kernel non valido: {weights.shape[2]}x{weights.shape[3]}")
        if stride < 1:
            raise ShapeError(f"Stride non valido: {stride}")
        if padding < 0:
            raise ShapeError(f"Padding non valido: {padding}")
        if bias is not None:
            bias = np.asarray(bias, dtype=weights.dtype)
            if bias.shape != (weights.shape[0],):
                raise ShapeError(f"Bias atteso con shape ({weights.shape[0]},), ricevuto {bias.shape}")

        self.weights = weights
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)
        self.name = name
        self.site_index = None
        self.grads = {}
        self._cache = None

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel_size(self):
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def mac_count(self):
        """Numero di passi di accumulazione per ogni elemento di output"""
        kh, kw = self.kernel_size
        return self.in_channels * kh * kw

    def output_shape(self, input_shape):
        c, h, w = input_shape
        kh, kw = self.kernel_size
        return (self.out_channels,
                conv_output_size(h, kh, self.stride, self.padding),
                conv_output_size(w, kw, self.stride, self.padding))

    def parameters(self):
        params = {f"{self.name}.weight": self.weights}
        if self.bias is not None:
            params[f"{self.name}.bias"] = self.bias
        return params

    def forward(self, x, mode=Mode.EVAL):
        out = conv2d_forward(x, self)
        self._cache = x if mode is Mode.TRAIN else None
        return out

    def backward(self, dout):
        if self._cache is None:
            raise ModeError(f"{self.name}: backward senza forward in modalità Train")
        dx, dw, db = conv2d_backward(dout, self._cache, self)
        self.grads = {f"{self.name}.weight": dw}
        if db is not None:
            self.grads[f"{self.name}.bias"] = db
        return dx


class BatchNormLayer:
    """Batch normalization per canale con statistiche di running"""

    def __init__(self, channels, epsilon=1e-5, momentum=0.1, dtype=np.float32, name="bn"):
        if epsilon < 0:
            raise ValueError(f"epsilon deve essere non negativo, ricevuto {epsilon}")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum deve essere in (0, 1], ricevuto {momentum}")
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.name = name
        self.grads = {}
        self._cache = None

    @property
    def channels(self):
        return self.gamma.shape[0]

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, mode=Mode.EVAL):
        if mode is Mode.TRAIN:
            out, self._cache = _batchnorm_train(x, self)
            return out
        self._cache = None
        return batchnorm_forward(x, self, Mode.EVAL)

    def backward(self, dout):
        if self._cache is None:
            raise ModeError(f"{self.name}: backward senza forward in modalità Train")
        xhat, inv_std = self._cache
        dx, dgamma, dbeta = batchnorm_backward(dout, xhat, inv_std, self.gamma)
        self.grads = {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}
        return dx


class ActivationLayer:
    def __init__(self, kind, name="act"):
        self.kind = ActivationKind(kind)
        self.name = name
        self._cache = None

    def parameters(self):
        return {}

    def forward(self, x, mode=Mode.EVAL):
        self._cache = x if mode is Mode.TRAIN else None
        return activation_forward(x, self.kind)

    def backward(self, dout):
        if self._cache is None:
            raise ModeError(f"{self.name}: backward senza forward in modalità Train")
        return activation_backward(dout, self._cache, self.kind)


class LinearLayer:
    """Layer completamente connesso (testa del classificatore)"""

    def __init__(self, weights, bias, name="fc"):
        weights = np.asarray(weights)
        bias = np.asarray(bias, dtype=weights.dtype)
        if weights.ndim != 2:
            raise ShapeError(f"Pesi lineari attesi a 2 assi, ricevuto shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"Bias atteso con shape ({weights.shape[0]},), ricevuto {bias.shape}")
        self.weights = weights
        self.bias = bias
        self.name = name
        self.site_index = None
        self.grads = {}
        self._cache = None

    @property
    def out_features(self):
        return self.weights.shape[0]

    @property
    def in_features(self):
        return self.weights.shape[1]

    def parameters(self):
        return {f"{self.name}.weight": self.weights, f"{self.name}.bias": self.bias}

    def forward(self, x, mode=Mode.EVAL):
        self._cache = x if mode is Mode.TRAIN else None
        return linear_forward(x, self)

    def backward(self, dout):
        if self._cache is None:
            raise ModeError(f"{self.name}: backward senza forward in modalità Train")
        x = self._cache
        flat = x.reshape(x.shape[0], -1)
        grad = dout.reshape(dout.shape[0], -1)
        self.grads = {
            f"{self.name}.weight": grad.T @ flat,
            f"{self.name}.bias": grad.sum(axis=0),
        }
        return (grad @ self.weights).reshape(x.shape)


# ===== KERNEL FORWARD =====

def conv2d_forward(input, layer):
    """
    Convoluzione diretta con ordine di accumulazione fisso

    Ogni elemento di output parte da zero e somma i prodotti peso*input nell'ordine
    canale di ingresso -> riga kernel -> colonna kernel; il bias viene aggiunto alla fine.

    Args:
        input: Tensore (N, C, H, W)
        layer: ConvLayer

    Returns:
        np.ndarray: Tensore (N, out_channels, H', W')
    """
    x = as_tensor(input, dtype=np.asarray(input).dtype)
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ShapeError(
            f"{layer.name}: canali di ingresso {c} diversi da quelli del kernel {layer.in_channels} "
            f"(input {x.shape}, pesi {layer.weights.shape})"
        )
    _, oh, ow = layer.output_shape((c, h, w))
    if oh < 1 or ow < 1:
        raise ShapeError(f"{layer.name}: output spaziale vuoto ({oh}x{ow}) per input {h}x{w}")

    kh, kw = layer.kernel_size
    s = layer.stride
    padded = pad_spatial(x, layer.padding)
    weights = layer.weights.astype(x.dtype, copy=False)
    out = np.zeros((n, layer.out_channels, oh, ow), dtype=x.dtype)

    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = padded[:, ci, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
                out += weights[:, ci, i, j][None, :, None, None] * patch[:, None, :, :]

    if layer.bias is not None:
        out += layer.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def batchnorm_forward(input, layer, mode):
    """
    Normalizzazione per canale: (x - E[x]) / sqrt(Var[x] + eps) * gamma + beta

    In Train usa media e varianza (di popolazione) del batch e aggiorna le
    statistiche di running; in Eval usa solo le statistiche di running.
    """
    x = as_tensor(input, dtype=np.asarray(input).dtype)
    if x.shape[1] != layer.channels:
        raise ShapeError(f"{layer.name}: {x.shape[1]} canali in ingresso, layer con {layer.channels}")
    if mode is Mode.TRAIN:
        out, _ = _batchnorm_train(x, layer)
        return out

    scale = (layer.gamma / np.sqrt(layer.running_var + layer.epsilon)).astype(x.dtype)
    shift = (layer.beta - layer.running_mean * scale).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _batchnorm_train(x, layer):
    if x.shape[1] != layer.channels:
        raise ShapeError(f"{layer.name}: {x.shape[1]} canali in ingresso, layer con {layer.channels}")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + layer.epsilon)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * layer.gamma.astype(x.dtype)[None, :, None, None] + layer.beta.astype(x.dtype)[None, :, None, None]

    m = layer.momentum
    layer.running_mean[...] = (1.0 - m) * layer.running_mean + m * mean
    layer.running_var[...] = (1.0 - m) * layer.running_var + m * var
    return out, (xhat, inv_std)


def activation_forward(input, kind):
    """
    ReLU standard (max(0, x)) o ReLU6 (min(max(0, x), 6))

    I NaN diventano 0 con entrambe le varianti.
    """
    x = np.asarray(input)
    out = np.maximum(x, 0)
    if ActivationKind(kind) is ActivationKind.RELU6:
        out = np.minimum(out, RELU6_CEILING)
    return np.where(np.isnan(x), x.dtype.type(0), out).astype(x.dtype, copy=False)


def linear_forward(input, layer):
    """Prodotto W·x + b per campione, input appiattito a (N, F); output (N, out, 1, 1)"""
    x = np.asarray(input)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != layer.in_features:
        raise ShapeError(
            f"{layer.name}: {flat.shape[1]} feature in ingresso, layer con {layer.in_features}"
        )
    weights = layer.weights.astype(flat.dtype, copy=False)
    acc = np.zeros((flat.shape[0], layer.out_features), dtype=flat.dtype)
    for f in range(layer.in_features):
        acc += flat[:, f, None] * weights[None, :, f]
    acc += layer.bias.astype(flat.dtype, copy=False)[None, :]
    return acc.reshape(flat.shape[0], layer.out_features, 1, 1)


def global_avg_pool(input):
    """Media per canale su H·W, sommata riga per riga"""
    x = as_tensor(input, dtype=np.asarray(input).dtype)
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"Pooling su mappa vuota: {x.shape}")
    acc = np.zeros((n, c), dtype=x.dtype)
    for y in range(h):
        for xx in range(w):
            acc += x[:, :, y, xx]
    return (acc / x.dtype.type(h * w)).reshape(n, c, 1, 1)


# ===== KERNEL BACKWARD =====

def conv2d_backward(dout, x, layer):
    """
    Gradienti della convoluzione

    Returns:
        tuple: (dx, dweights, dbias o None)
    """
    n, c, h, w = x.shape
    kh, kw = layer.kernel_size
    s = layer.stride
    p = layer.padding
    _, oh, ow = layer.output_shape((c, h, w))
    padded = pad_spatial(x, p)

    # (N, C, oh, ow, kh, kw)
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)
    db = dout.sum(axis=(0, 2, 3)).astype(x.dtype) if layer.bias is not None else None

    weights = layer.weights.astype(x.dtype, copy=False)
    cols = np.tensordot(dout, weights, axes=([1], [0]))  # (N, oh, ow, C, kh, kw)
    dpadded = np.zeros_like(padded)
    for i in range(kh):
        for j in range(kw):
            dpadded[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dpadded = dpadded[:, :, p:p + h, p:p + w]
    return dpadded, dw, db


def batchnorm_backward(dout, xhat, inv_std, gamma):
    """Backward esatto del grafo Train (il gradiente passa per media e varianza del batch)"""
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.astype(dout.dtype)[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx.astype(dout.dtype), dgamma.astype(dout.dtype), dbeta.astype(dout.dtype)


def activation_backward(dout, x, kind):
    passing = x > 0
    if ActivationKind(kind) is ActivationKind.RELU6:
        passing &= x < RELU6_CEILING
    return np.where(passing, dout, dout.dtype.type(0))


def global_avg_pool_backward(dout, input_shape):
    n, c, h, w = input_shape
    grad = dout.reshape(n, c, 1, 1) / dout.dtype.type(h * w)
    return np.broadcast_to(grad, input_shape).copy()


def backprop(network, input, labels, loss_scale=1.0, hook=None):
    """
    Calcola la loss e il gradiente rispetto a ogni parametro della rete

    Args:
        network: Rete costruita da model_zoo (in modalità Train)
        input: Batch (N, C, H, W)
        labels: Indici di classe (N,)
        loss_scale: Fattore moltiplicativo della loss
        hook: FaultHook opzionale applicato durante il forward

    Returns:
        tuple: (loss, dict nome_parametro -> gradiente)
    """
    from train_engine import bce_loss

    if network.mode is not Mode.TRAIN:
        raise ModeError("backprop richiede la rete in modalità Train")

    logits = network.forward(input, hook=hook)
    loss, dlogits = bce_loss(logits.reshape(logits.shape[0], -1), labels)
    dlogits = dlogits * dlogits.dtype.type(loss_scale)
    network.backward(dlogits.reshape(logits.shape))
    return loss * loss_scale, network.gradients()

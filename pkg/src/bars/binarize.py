"""Binary convolution: the sign/scale training path and the packed XNOR path.

Training uses ``conv(sign(X), sign(W)) * beta`` with ``beta = mean(|W|)``
(a single scalar per layer) and straight-through gradients.  Inference packs
signs along the channel axis into 64-bit words (bit=1 for +1) and evaluates
the convolution with XOR and popcount.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .layers import BatchNorm2d, Module, kaiming_uniform

WORD_BITS = 64


def compute_beta(w):
    """Mean absolute value of the latent weights, as a scalar Tensor.

    Differentiable w.r.t. ``w`` (subgradient 0 at exactly zero).
    """
    w = ad.as_tensor(w)
    if w.size == 0:
        raise ValueError("compute_beta: empty weight tensor")
    return ad.scale(ad.sum_(ad.abs_(w)), 1.0 / w.size)


class BinaryConv2d(Module):
    """Latent full-precision weights binarized on every forward pass."""

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform((c_out, c_in, kernel_size, kernel_size), fan_in, rng))
        self.stride = stride
        self.padding = padding

    @property
    def geometry(self):
        o, c, k, _ = self.weight.shape
        return {"c_out": o, "c_in": c, "kernel": k, "stride": self.stride, "padding": self.padding}

    def beta(self):
        return compute_beta(self.weight)

    def forward(self, x, in_mask=None):
        return binary_conv_train(x, self, in_mask)


def binary_conv_train(x, layer, in_mask=None):
    """``conv(sign(x) [* in_mask], sign(W)) * beta`` on the autodiff graph.

    ``in_mask`` (optional, shape [C_in]) multiplies the binarized activations
    channel-wise; it is how relaxed width choices reach binary convolutions.
    """
    x = ad.as_tensor(x)
    c_in = layer.weight.shape[1]
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ValueError(f"binary_conv: expected input with {c_in} channels, got shape {x.shape}")
    sx = ad.sign_ste(x)
    if in_mask is not None:
        sx = ad.mul(sx, ad.reshape(in_mask, (1, c_in, 1, 1)))
    sw = ad.sign_ste(layer.weight)
    y = ad.conv2d(sx, sw, None, layer.stride, layer.padding)
    return ad.mul(y, layer.beta())


def shared_binary_conv_bn(x, layers, in_mask=None):
    """Apply several ``BinaryConvBN`` layers (same geometry) to one input.

    Equivalent to ``[layer(x, in_mask) for layer in layers]`` but the input
    is binarized and unfolded once: the sign kernels are stacked along the
    output axis and the result is sliced back per layer.
    """
    if len(layers) == 1 or any(l.packed is not None for l in layers):
        return [l(x, in_mask) for l in layers]
    x = ad.as_tensor(x)
    first = layers[0].conv
    c_in = first.weight.shape[1]
    for l in layers:
        c = l.conv
        if c.weight.shape[1:] != first.weight.shape[1:] or (c.stride, c.padding) != (first.stride, first.padding):
            raise ValueError("shared_binary_conv_bn: layers must share input channels and geometry")
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ValueError(f"binary_conv: expected input with {c_in} channels, got shape {x.shape}")
    sx = ad.sign_ste(x)
    if in_mask is not None:
        sx = ad.mul(sx, ad.reshape(in_mask, (1, c_in, 1, 1)))
    sw = ad.concat([ad.sign_ste(l.conv.weight) for l in layers], axis=0)
    y = ad.conv2d(sx, sw, None, first.stride, first.padding)
    outs, lo = [], 0
    for l in layers:
        hi = lo + l.c_out
        part = ad.index(y, (slice(None), slice(lo, hi)))
        outs.append(l.bn(ad.mul(part, l.conv.beta())))
        lo = hi
    return outs


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackedTensor:
    """Sign tensor packed along one axis into little-endian 64-bit words.

    ``words`` has the logical shape with ``axis`` moved last and replaced by
    the number of words.  Bit ``i`` of word ``q`` holds element ``64*q + i``;
    tail bits past the logical length are zero.
    """

    shape: tuple
    axis: int
    words: np.ndarray

    @property
    def length(self):
        return self.shape[self.axis]


def _default_axis(ndim):
    return 1 if ndim >= 2 else 0


def pack_bits(s, axis=None):
    s = np.asarray(s)
    if s.size and not np.all((s == 1) | (s == -1)):
        raise ValueError("pack_bits: every element must be exactly +1 or -1")
    axis = _default_axis(s.ndim) if axis is None else axis % s.ndim
    bits = np.moveaxis(s > 0, axis, -1)
    c = bits.shape[-1]
    nw = max(1, -(-c // WORD_BITS))
    padded = np.zeros(bits.shape[:-1] + (nw * WORD_BITS,), dtype=np.uint8)
    padded[..., :c] = bits
    as_bytes = np.ascontiguousarray(np.packbits(padded, axis=-1, bitorder="little"))
    words = as_bytes.view("<u8").astype(np.uint64)
    return PackedTensor(tuple(s.shape), axis, words)


def unpack_bits(p):
    c = p.length
    as_bytes = np.ascontiguousarray(p.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., :c]
    s = np.where(bits.astype(bool), 1, -1).astype(np.int8)
    return np.moveaxis(s, -1, p.axis)


def sign_np(x):
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def xnor_popcount_conv(xp, wp, stride=1, padding=0):
    """Integer convolution of two packed sign tensors.

    ``xp`` packs an [N, C, H, W] activation and ``wp`` an [O, C, K, K]
    kernel, both along C.  Each in-bounds tap contributes
    ``C - 2 * popcount(x XOR w)``; taps that fall on zero padding contribute
    nothing, which is what a dense convolution over zero-padded signs gives.
    Returns an int64 array [N, O, Ho, Wo].
    """
    if len(xp.shape) != 4 or len(wp.shape) != 4 or xp.axis != 1 or wp.axis != 1:
        raise ValueError("xnor_popcount_conv: expected channel-packed 4-D tensors")
    n, c, h, w = xp.shape
    o, c2, k, k2 = wp.shape
    if c != c2 or k != k2:
        raise ValueError(f"xnor_popcount_conv: geometry mismatch input {xp.shape} vs kernel {wp.shape}")
    ho = ad.conv_output_size(h, k, stride, padding)
    wo = ad.conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"xnor_popcount_conv: empty output for input {xp.shape} kernel {wp.shape}")
    nw = xp.words.shape[-1]
    xw = np.zeros((n, h + 2 * padding, w + 2 * padding, nw), dtype=np.uint64)
    xw[:, padding : padding + h, padding : padding + w] = xp.words
    valid = np.zeros((h + 2 * padding, w + 2 * padding), dtype=np.int64)
    valid[padding : padding + h, padding : padding + w] = 1
    acc = np.zeros((n, ho, wo, o), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            taps = xw[:, rows, cols]
            kern = wp.words[:, i, j]
            pc = np.bitwise_count(taps[:, :, :, None, :] ^ kern[None, None, None]).sum(axis=-1, dtype=np.int64)
            acc += valid[rows, cols][None, :, :, None] * (c - 2 * pc)
    return acc.transpose(0, 3, 1, 2)


def valid_tap_counts(h, w, k, stride, padding):
    """Number of in-bounds kernel taps for every output position."""
    ones = np.ones((1, 1, h, w))
    with ad.no_grad(), ad.default_dtype(np.float64):
        cnt = ad.conv2d(Tensor(ones), Tensor(np.ones((1, 1, k, k))), None, stride, padding)
    return cnt.data[0, 0].astype(np.int64)


# ---------------------------------------------------------------------------
# exported (frozen) layers
# ---------------------------------------------------------------------------


@dataclass
class PackedLayer:
    """A binary conv + batchnorm frozen for inference."""

    weights: PackedTensor
    stride: int
    padding: int
    beta: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_eps: float

    @property
    def c_in(self):
        return self.weights.shape[1]

    @property
    def c_out(self):
        return self.weights.shape[0]

    @property
    def kernel(self):
        return self.weights.shape[2]


def binary_conv_infer(xp, layer):
    """Frozen binary conv + batchnorm evaluated on packed activations."""
    if not isinstance(layer, PackedLayer):
        raise TypeError("binary_conv_infer: layer has not been exported (expected PackedLayer)")
    acc = xnor_popcount_conv(xp, layer.weights, layer.stride, layer.padding)
    dtype = layer.bn_gamma.dtype
    y = acc.astype(dtype) * dtype.type(layer.beta)
    return ad.batchnorm_eval_np(y, layer.bn_gamma, layer.bn_beta, layer.bn_mean, layer.bn_var, layer.bn_eps)


class BinaryConvBN(Module):
    """Binary convolution followed by batchnorm.

    After ``export()`` the module switches to the packed XNOR path; until then
    it runs on the autodiff graph.
    """

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, rng=None):
        self.conv = BinaryConv2d(c_in, c_out, kernel_size, stride, padding, rng)
        self.bn = BatchNorm2d(c_out)
        self.packed = None

    @property
    def c_in(self):
        return self.conv.weight.shape[1]

    @property
    def c_out(self):
        return self.conv.weight.shape[0]

    def forward(self, x, in_mask=None):
        if self.packed is not None:
            if in_mask is not None:
                raise ValueError("packed binary conv does not accept channel masks")
            xp = pack_bits(sign_np(ad.as_tensor(x).data))
            return Tensor(binary_conv_infer(xp, self.packed))
        return self.bn(self.conv(x, in_mask))

    def export(self):
        with ad.no_grad():
            beta = self.conv.beta().data
        self.packed = PackedLayer(
            weights=pack_bits(sign_np(self.conv.weight.data)),
            stride=self.conv.stride,
            padding=self.conv.padding,
            beta=beta.copy(),
            bn_gamma=self.bn.gamma.data.copy(),
            bn_beta=self.bn.beta.data.copy(),
            bn_mean=self.bn.running_mean.copy(),
            bn_var=self.bn.running_var.copy(),
            bn_eps=self.bn.eps,
        )
        return self.packed

"""U-Net for per-pixel water probability, written directly in numpy.

The network follows the classical encoder / decoder layout:

* ``depth`` encoder levels, each two 3x3 convolutions with ReLU followed by
  a 2x2 max-pool; level ``l`` has ``base_filters * 2**l`` channels;
* a bottleneck of two 3x3 convolutions with ``base_filters * 2**depth``
  channels;
* ``depth`` decoder levels, each a 2x nearest-neighbour upsample, a 2x2
  convolution with ReLU, concatenation with the encoder output of the same
  level, and two 3x3 convolutions with ReLU;
* a 1x1 convolution and a sigmoid.

All convolutions use same-padding, so every level preserves its spatial
size.  Arrays are ``(batch, channels, height, width)``.  Inputs are
quantized backscatter divided by 255.

Forward passes do not modify the model, so one instance may serve several
threads.  Training mutates parameters through :func:`adam_step` only.
"""

import dataclasses
import struct
import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import parameters
from .raster import WaterMask

__all__ = ["UNetConfig",
           "UNetModel",
           "AdamState",
           "forward",
           "loss",
           "loss_grad",
           "backward",
           "value_and_grad",
           "adam_step",
           "threshold",
           "predict_proba",
           "save_weights",
           "load_weights",
           "WeightsFormatError",
           "WeightsChecksumError",
           "WeightsShapeError",
           "ConfigMismatchError",
]


@dataclasses.dataclass(frozen=True)
class UNetConfig:
    """Shape of a U-Net.

    Parameters
    ----------
    depth : int
        number of pooling levels
    base_filters : int
        channels of the first level; level l has base_filters * 2**l
    input_size : int
        side of the square training input; divisible by 2**depth
    in_channels, out_channels : int
        input bands (VH, VV) and output channels (water probability)
    seed : int
        seed of the weight initialization
    """
    depth: int = parameters.unet['desk']['depth']
    base_filters: int = parameters.unet['desk']['base_filters']
    input_size: int = parameters.unet['desk']['input_size']
    in_channels: int = parameters.unet['in_channels']
    out_channels: int = parameters.unet['out_channels']
    seed: int = parameters.unet['seed']

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f'depth must be >= 1, got {self.depth}')
        if self.base_filters < 1:
            raise ValueError('base_filters must be >= 1, got '
                             f'{self.base_filters}')
        if self.input_size < 1 or self.input_size % 2 ** self.depth != 0:
            raise ValueError(f'input_size {self.input_size} must be a '
                             f'positive multiple of 2**depth = '
                             f'{2 ** self.depth}')
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError('channel counts must be >= 1')

    @classmethod
    def preset(cls, name, **kw):
        """Config from a named preset ('full' or 'desk')."""
        return cls(**{**parameters.unet[name], **kw})

    def channels(self, level):
        return self.base_filters * 2 ** level

    def parameter_shapes(self):
        """Parameter names and shapes in topological order.

        Returns
        -------
        dict[str, tuple]
            ordered mapping of parameter name to shape
        """
        shapes = {}

        def conv(name, cout, cin, k):
            shapes[name + '_w'] = (cout, cin, k, k)
            shapes[name + '_b'] = (cout,)

        cin = self.in_channels
        for level in range(self.depth):
            conv(f'enc{level}_conv1', self.channels(level), cin, 3)
            conv(f'enc{level}_conv2', self.channels(level),
                 self.channels(level), 3)
            cin = self.channels(level)
        conv('bott_conv1', self.channels(self.depth), cin, 3)
        conv('bott_conv2', self.channels(self.depth),
             self.channels(self.depth), 3)
        for level in reversed(range(self.depth)):
            ch = self.channels(level)
            conv(f'dec{level}_up', ch, self.channels(level + 1), 2)
            conv(f'dec{level}_conv1', ch, 2 * ch, 3)
            conv(f'dec{level}_conv2', ch, ch, 3)
        conv('head', self.out_channels, self.channels(0), 1)
        return shapes

    def same_shape(self, other):
        """True if other describes the same network (seed aside)."""
        return (self.depth, self.base_filters, self.input_size,
                self.in_channels, self.out_channels) == (
                    other.depth, other.base_filters, other.input_size,
                    other.in_channels, other.out_channels)


def conv_forward(x, w, b):
    """Same-padded stride-1 cross-correlation."""
    k = w.shape[-1]
    before = (k - 1) // 2
    after = k - 1 - before
    xp = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv_backward(dout, x, w, need_dx=True):
    """Gradients of conv_forward with respect to x, w and b."""
    k = w.shape[-1]
    before = (k - 1) // 2
    after = k - 1 - before
    xp = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    dp = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    dwin = sliding_window_view(dp, (k, k), axis=(2, 3))
    dxp = np.tensordot(dwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    dxp = dxp.transpose(0, 3, 1, 2)
    h, wd = x.shape[2:]
    return dxp[:, :, before:before + h, before:before + wd], dw, db


def maxpool_forward(x):
    """2x2 max-pool; returns output and argmax indices within each block."""
    nb, nc, ny, nx = x.shape
    blocks = x.reshape(nb, nc, ny // 2, 2, nx // 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(nb, nc, ny // 2, nx // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx):
    nb, nc, ny, nx = dout.shape
    d = np.zeros((nb, nc, ny, nx, 4), dtype=dout.dtype)
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(nb, nc, ny, nx, 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(nb, nc, 2 * ny, 2 * nx)


def upsample_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(dout):
    nb, nc, ny, nx = dout.shape
    return dout.reshape(nb, nc, ny // 2, 2, nx // 2, 2).sum(axis=(3, 5))


class UNetModel:
    """U-Net parameters and the forward / backward passes.

    Parameters
    ----------
    config : UNetConfig
        network shape
    params : dict[str, np.ndarray] or None
        parameter arrays keyed by name; None draws He-uniform kernels and
        zero biases from ``np.random.default_rng(config.seed)``
    dtype : str
        float type of freshly initialized parameters
    """

    def __init__(self, config, params=None, dtype='f4'):
        self.config = config
        shapes = config.parameter_shapes()
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {}
            for name, shape in shapes.items():
                if name.endswith('_b'):
                    params[name] = np.zeros(shape, dtype=dtype)
                else:
                    fan_in = shape[1] * shape[2] * shape[3]
                    limit = np.sqrt(6.0 / fan_in)
                    params[name] = rng.uniform(
                        -limit, limit, size=shape).astype(dtype)
        if list(params) != list(shapes):
            raise ValueError('parameter names do not match the config')
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f'parameter {name} has shape '
                                 f'{params[name].shape}, expected {shape}')
        self.params = dict(params)

    @property
    def dtype(self):
        return self.params['head_w'].dtype

    def astype(self, dtype):
        """Copy of this model with parameters cast to dtype."""
        return UNetModel(self.config, {k: v.astype(dtype)
                                       for k, v in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def _check_input(self, x, strict):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f'input must be (batch, {self.config.in_channels}'
                             f', height, width), got {x.shape}')
        ny, nx = x.shape[2:]
        if strict:
            if ny != self.config.input_size or nx != self.config.input_size:
                raise ValueError(f'input is {ny}x{nx}, model expects '
                                 f'{self.config.input_size}x'
                                 f'{self.config.input_size}')
        else:
            step = 2 ** self.config.depth
            if ny % step or nx % step:
                raise ValueError(f'input sides {ny}x{nx} must be multiples '
                                 f'of {step}')

    def _conv(self, h, name, cache, relu=True):
        out = conv_forward(h, self.params[name + '_w'], self.params[name + '_b'])
        if relu:
            out = np.maximum(out, 0)
        cache[name] = (h, out > 0 if relu else None)
        return out

    def forward(self, x, strict=True, return_cache=False):
        """Water probability of a batch.

        Parameters
        ----------
        x : np.ndarray[batch, in_channels, height, width]
            normalized inputs
        strict : bool
            require height = width = input_size; otherwise any size that is
            a multiple of 2**depth is accepted
        return_cache : bool
            also return the intermediate values backward needs

        Returns
        -------
        prob : np.ndarray[batch, out_channels, height, width]
            probabilities in (0, 1)
        cache : dict
            only if return_cache
        """
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x, strict)
        cache = {}
        skips = []
        h = x
        for level in range(self.config.depth):
            h = self._conv(h, f'enc{level}_conv1', cache)
            h = self._conv(h, f'enc{level}_conv2', cache)
            skips.append(h)
            h, cache[f'pool{level}'] = maxpool_forward(h)
        h = self._conv(h, 'bott_conv1', cache)
        h = self._conv(h, 'bott_conv2', cache)
        for level in reversed(range(self.config.depth)):
            up = self._conv(upsample_forward(h), f'dec{level}_up', cache)
            h = np.concatenate([skips[level], up], axis=1)
            h = self._conv(h, f'dec{level}_conv1', cache)
            h = self._conv(h, f'dec{level}_conv2', cache)
        z = self._conv(h, 'head', cache, relu=False)
        prob = expit(z)
        if return_cache:
            cache['prob'] = prob
            return prob, cache
        return prob

    def _conv_back(self, dout, name, cache, grads, need_dx=True):
        h, active = cache[name]
        if active is not None:
            dout = dout * active
        dx, dw, db = conv_backward(dout, h, self.params[name + '_w'],
                                   need_dx=need_dx)
        grads[name + '_w'] = dw
        grads[name + '_b'] = db
        return dx

    def backward(self, cache, dprob):
        """Parameter gradients given the gradient with respect to the output.

        Parameters
        ----------
        cache : dict
            cache returned by forward(..., return_cache=True)
        dprob : np.ndarray
            gradient of a scalar with respect to the output probabilities

        Returns
        -------
        dict[str, np.ndarray]
            gradient per parameter, in topological order
        """
        grads = {}
        prob = cache['prob']
        dz = dprob * prob * (1 - prob)
        dh = self._conv_back(dz, 'head', cache, grads)
        dskips = {}
        for level in range(self.config.depth):
            dh = self._conv_back(dh, f'dec{level}_conv2', cache, grads)
            dh = self._conv_back(dh, f'dec{level}_conv1', cache, grads)
            nskip = self.config.channels(level)
            dskips[level] = dh[:, :nskip]
            dup = self._conv_back(dh[:, nskip:], f'dec{level}_up', cache,
                                  grads)
            dh = upsample_backward(dup)
        dh = self._conv_back(dh, 'bott_conv2', cache, grads)
        dh = self._conv_back(dh, 'bott_conv1', cache, grads)
        for level in reversed(range(self.config.depth)):
            dh = maxpool_backward(dh, cache[f'pool{level}']) + dskips[level]
            dh = self._conv_back(dh, f'enc{level}_conv2', cache, grads)
            dh = self._conv_back(dh, f'enc{level}_conv1', cache, grads,
                                 need_dx=level > 0)
        return {name: grads[name] for name in self.params}


def forward(model, batch, strict=True):
    """Probabilities of a normalized batch; see UNetModel.forward."""
    return model.forward(batch, strict=strict)


def _check_pair(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f'prediction shape {pred.shape} does not match '
                         f'target shape {target.shape}')
    return pred, target


def loss(pred, target, dice_weight=1.0):
    """Binary cross-entropy plus Dice loss.

    ``mean(BCE) + dice_weight * (1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s))``
    with smoothing s = 1.  Predictions are clipped to [1e-7, 1 - 1e-7]
    inside the cross-entropy only.

    Parameters
    ----------
    pred : np.ndarray
        probabilities
    target : np.ndarray
        binary targets, same shape
    dice_weight : float
        weight of the Dice term; 0 gives pure cross-entropy

    Returns
    -------
    float
        loss value
    """
    pred, target = _check_pair(pred, target)
    pred = pred.astype('f8')
    target = target.astype('f8')
    eps = parameters.loss['bce_clip']
    smooth = parameters.loss['dice_smooth']
    pc = np.clip(pred, eps, 1 - eps)
    bce = -np.mean(target * np.log(pc) + (1 - target) * np.log(1 - pc))
    inter = np.sum(pred * target)
    dice = 1 - (2 * inter + smooth) / (np.sum(pred) + np.sum(target) + smooth)
    return float(bce + dice_weight * dice)


def loss_grad(pred, target, dice_weight=1.0):
    """Gradient of loss with respect to pred."""
    pred, target = _check_pair(pred, target)
    dtype = pred.dtype
    pred = pred.astype('f8')
    target = target.astype('f8')
    eps = parameters.loss['bce_clip']
    smooth = parameters.loss['dice_smooth']
    inside = (pred >= eps) & (pred <= 1 - eps)
    pc = np.clip(pred, eps, 1 - eps)
    dbce = np.where(inside, -(target / pc - (1 - target) / (1 - pc)),
                    0.0) / pred.size
    num = 2 * np.sum(pred * target) + smooth
    den = np.sum(pred) + np.sum(target) + smooth
    ddice = -(2 * target * den - num) / den ** 2
    return (dbce + dice_weight * ddice).astype(dtype)


def value_and_grad(model, batch, target, dice_weight=1.0):
    """Loss of a batch and its gradient with respect to every parameter.

    Returns
    -------
    value : float
        loss
    grads : dict[str, np.ndarray]
        gradient per parameter
    """
    prob, cache = model.forward(batch, return_cache=True)
    target = np.asarray(target).reshape(prob.shape)
    value = loss(prob, target, dice_weight)
    grads = model.backward(cache, loss_grad(prob, target, dice_weight))
    return value, grads


def backward(model, batch, target, dice_weight=1.0):
    """Gradient of the loss with respect to every parameter."""
    return value_and_grad(model, batch, target, dice_weight)[1]


@dataclasses.dataclass
class AdamState:
    """Adam moments and step counter for one model."""
    learning_rate: float = parameters.adam['learning_rate']
    beta1: float = parameters.adam['beta1']
    beta2: float = parameters.adam['beta2']
    epsilon: float = parameters.adam['epsilon']
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model, **kw):
        state = cls(**kw)
        for name, p in model.params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(model, grads, state):
    """One bias-corrected Adam update.

    Parameter arrays are replaced, not written in place, so copies taken
    before the step are unaffected.

    Parameters
    ----------
    model : UNetModel
        model to update
    grads : dict[str, np.ndarray]
        gradient per parameter
    state : AdamState
        optimizer state; updated

    Returns
    -------
    model, state
    """
    if set(grads) != set(model.params):
        raise ValueError('gradients do not match model parameters')
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f'gradient {name} has shape {g.shape}, '
                             f'expected {p.shape}')
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        model.params[name] = (
            p - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
        ).astype(p.dtype)
    return model, state


def threshold(prob, t=parameters.probability_threshold):
    """Water mask from a probability raster: water iff prob >= t.

    Parameters
    ----------
    prob : ProbabilityRaster
        water probability
    t : float
        threshold

    Returns
    -------
    WaterMask
        1 water, 0 non-water, 255 where prob is nodata
    """
    p = prob.data[0]
    nodata = np.isnan(p)
    with np.errstate(invalid='ignore'):
        out = (p >= t).astype('u1')
    out[nodata] = parameters.mask_nodata
    return WaterMask(out, prob.grid, timestamp=prob.timestamp)


def normalize(quantized):
    """Model input from quantized backscatter: values / 255."""
    return np.asarray(quantized, dtype='f4') / 255.0


def predict_proba(model, images, batch_size=parameters.prediction[
        'batch_size']):
    """Probabilities for a stack of quantized images.

    Parameters
    ----------
    model : UNetModel
        trained model
    images : np.ndarray[n, 2, height, width] (uint8)
        quantized backscatter tiles; sides multiples of 2**depth
    batch_size : int
        tiles per forward pass

    Returns
    -------
    np.ndarray[n, height, width] (float32)
    """
    out = []
    for i in range(0, len(images), batch_size):
        x = normalize(images[i:i + batch_size])
        out.append(model.forward(x, strict=False)[:, 0].astype('f4'))
    return np.concatenate(out, axis=0)


class WeightsFormatError(ValueError):
    """Malformed weight file."""


class WeightsChecksumError(WeightsFormatError):
    pass


class WeightsShapeError(WeightsFormatError):
    pass


class ConfigMismatchError(WeightsFormatError):
    pass


_WHEADER = struct.Struct('<4sHBHHBB')
_U16 = struct.Struct('<H')
_U32 = struct.Struct('<I')


def weights_to_bytes(model):
    """Serialize model parameters; see save_weights."""
    cfg = model.config
    header = _WHEADER.pack(parameters.weights_magic,
                           parameters.weights_version, cfg.depth,
                           cfg.base_filters, cfg.input_size,
                           cfg.in_channels, cfg.out_channels)
    records = []
    for name, p in model.params.items():
        bname = name.encode('utf-8')
        records.append(_U16.pack(len(bname)) + bname
                       + struct.pack('<B', p.ndim)
                       + struct.pack(f'<{p.ndim}I', *p.shape)
                       + np.ascontiguousarray(p, dtype='<f4').tobytes())
    body = b''.join(records)
    return header + body + _U32.pack(zlib.crc32(body))


def weights_from_bytes(buf, expected=None):
    """Parse a weight file; see load_weights."""
    if len(buf) < 4 or buf[:4] != parameters.weights_magic:
        raise WeightsFormatError('bad magic')
    if len(buf) < _WHEADER.size + _U32.size:
        raise WeightsFormatError('truncated weight file')
    (_, version, depth, base, size, cin, cout) = _WHEADER.unpack_from(buf)
    if version != parameters.weights_version:
        raise WeightsFormatError(f'unsupported version {version}')
    body = buf[_WHEADER.size:-_U32.size]
    (crc,) = _U32.unpack_from(buf, len(buf) - _U32.size)
    if crc != zlib.crc32(body):
        raise WeightsChecksumError('checksum mismatch')
    try:
        config = UNetConfig(depth=depth, base_filters=base, input_size=size,
                            in_channels=cin, out_channels=cout)
    except ValueError as err:
        raise ConfigMismatchError(f'invalid config in header: {err}')
    if expected is not None and not config.same_shape(expected):
        raise ConfigMismatchError(
            f'file holds depth={depth} base_filters={base} input_size={size}'
            f', expected depth={expected.depth} base_filters='
            f'{expected.base_filters} input_size={expected.input_size}')
    shapes = config.parameter_shapes()
    params = {}
    pos = 0
    while pos < len(body):
        try:
            (nlen,) = _U16.unpack_from(body, pos)
            pos += _U16.size
            name = body[pos:pos + nlen].decode('utf-8')
            pos += nlen
            rank = body[pos]
            pos += 1
            dims = struct.unpack_from(f'<{rank}I', body, pos)
            pos += 4 * rank
        except (struct.error, IndexError, UnicodeDecodeError):
            raise WeightsFormatError('truncated parameter record')
        count = int(np.prod(dims))
        if pos + 4 * count > len(body):
            raise WeightsFormatError(f'truncated payload for {name}')
        params[name] = np.frombuffer(body, dtype='<f4', count=count,
                                     offset=pos).reshape(dims).astype('f4')
        pos += 4 * count
    if list(params) != list(shapes):
        raise ConfigMismatchError('parameter records do not match the '
                                  'header config')
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise WeightsShapeError(f'parameter {name} has shape '
                                    f'{params[name].shape}, expected {shape}')
    if expected is not None:
        config = dataclasses.replace(config, seed=expected.seed)
    return UNetModel(config, params)


def save_weights(model, path):
    """Write model parameters to path.

    The file is the magic ``AQMW``, a version, a config block (depth,
    base_filters, input_size, in/out channels), one record per parameter in
    topological order (name, rank, dims, float32 values) and the CRC-32 of
    the records.
    """
    with open(path, 'wb') as fp:
        fp.write(weights_to_bytes(model))


def load_weights(path, expected=None):
    """Read a weight file.

    Parameters
    ----------
    path : str or pathlib.Path
        file to read
    expected : UNetConfig or None
        if given, the file's config must describe the same network

    Returns
    -------
    UNetModel
    """
    with open(path, 'rb') as fp:
        return weights_from_bytes(fp.read(), expected=expected)

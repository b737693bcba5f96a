"""Training data preparation, the training loop and evaluation.

Training pairs are co-registered backscatter scenes and reference water
masks.  Each scene is center-cropped and cut into model-sized tiles; tiles
of one scene all go to the same split.  Batches are assembled and augmented
by a producer thread while the optimizer consumes them, with a bounded
queue in between.
"""

import dataclasses
import os
import queue
import threading
import time

import numpy as np
from astropy import table

from . import log, parameters
from . import unet
from .analytics import confusion_arrays, prf
from .raster import BackscatterRaster, WaterMask, retile, read_raster
from .util import log_record

__all__ = ["SamplePair",
           "TrainConfig",
           "prepare_pairs",
           "load_pairs",
           "flip",
           "augment",
           "train",
           "evaluate",
           "write_history",
]

SPLITS = ('training', 'validation')


@dataclasses.dataclass(frozen=True)
class SamplePair:
    """One training tile: backscatter, binary target, origin and split."""
    image: BackscatterRaster
    mask: WaterMask
    source_id: str = ''
    split: str = 'training'

    def __post_init__(self):
        if self.image.grid != self.mask.grid:
            raise ValueError('image and mask grids differ')
        if self.split not in SPLITS:
            raise ValueError(f'split must be one of {SPLITS}, got '
                             f'{self.split!r}')
        if np.any(self.mask.data > 1):
            raise ValueError('training masks must be binary')


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training loop settings.

    The defaults are the full-scale values; desk-scale runs use tens of
    epochs and smaller batches.
    """
    epochs: int = parameters.training['epochs']
    batch_size: int = parameters.training['batch_size']
    learning_rate: float = parameters.adam['learning_rate']
    seed: int = 0
    flip_probability: float = parameters.training['flip_probability']
    queue_size: int = parameters.training['queue_size']
    dice_weight: float = 1.0
    checkpoint_metric: str = 'val_accuracy'

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f'epochs must be >= 1, got {self.epochs}')
        if self.batch_size < 1:
            raise ValueError(f'batch_size must be >= 1, got '
                             f'{self.batch_size}')
        if not self.learning_rate > 0:
            raise ValueError('learning_rate must be positive')
        if self.checkpoint_metric != 'val_accuracy':
            raise ValueError('only val_accuracy checkpointing is supported')


def prepare_pairs(image, mask, crop=parameters.training['crop'],
                  tile=parameters.training['tile'], source_id='',
                  split='training'):
    """Center-crop a co-registered scene and cut it into training tiles.

    Tiles with nodata in the image or the mask are skipped.

    Parameters
    ----------
    image : BackscatterRaster
        quantized scene
    mask : WaterMask
        reference water on the same grid
    crop : int
        side of the center crop; a multiple of tile
    tile : int
        side of the training tiles
    source_id : str
        scene identifier carried by every tile
    split : {'training', 'validation'}
        split of every tile

    Returns
    -------
    list[SamplePair]
        (crop / tile)**2 pairs in row-major order, fewer if tiles held
        nodata
    """
    if image.grid != mask.grid:
        raise ValueError('image and mask are misregistered')
    if crop % tile != 0:
        raise ValueError(f'crop {crop} is not a multiple of tile {tile}')
    width, height = image.grid.width, image.grid.height
    if width < crop or height < crop:
        raise ValueError(f'scene {width}x{height} is smaller than the crop '
                         f'{crop}')
    x0 = (width - crop) // 2
    y0 = (height - crop) // 2
    image = image.crop(x0, y0, crop, crop)
    mask = mask.crop(x0, y0, crop, crop)
    pairs = []
    skipped = 0
    for (img, _), (msk, _) in zip(retile(image, tile, 0),
                                  retile(mask, tile, 0)):
        if not (np.all(img.valid) and np.all(msk.valid)):
            skipped += 1
            continue
        pairs.append(SamplePair(img, msk, source_id, split))
    if skipped:
        log.warning(f'{source_id}: skipped {skipped} tiles with nodata')
    return pairs


def load_pairs(pairs_csv, crop, tile):
    """Read the training scenes listed in a pairs index.

    Parameters
    ----------
    pairs_csv : str or pathlib.Path
        CSV with columns image, mask, split, source_id; relative paths
        resolve against the CSV's directory
    crop, tile : int
        passed to prepare_pairs

    Returns
    -------
    list[SamplePair]
    """
    index = table.Table.read(pairs_csv, format='ascii.csv')
    base = os.path.dirname(os.path.abspath(pairs_csv))
    pairs = []
    for row in index:
        image = read_raster(os.path.join(base, str(row['image'])),
                            kind=BackscatterRaster)
        mask = read_raster(os.path.join(base, str(row['mask'])),
                           kind=WaterMask)
        pairs += prepare_pairs(image, mask, crop, tile,
                               source_id=str(row['source_id']),
                               split=str(row['split']))
    return pairs


def flip(pair, vertical, horizontal):
    """Pair with image and mask flipped identically."""
    img = pair.image.data
    msk = pair.mask.data
    if vertical:
        img, msk = img[:, ::-1, :], msk[:, ::-1, :]
    if horizontal:
        img, msk = img[:, :, ::-1], msk[:, :, ::-1]
    return dataclasses.replace(pair, image=pair.image.replace(data=img),
                               mask=pair.mask.replace(data=msk))


def augment(pair, rng, probability=parameters.training['flip_probability']):
    """Random vertical and horizontal flips, each with the given probability.

    Parameters
    ----------
    pair : SamplePair
        tile to augment
    rng : np.random.Generator
        random source; two draws per call
    probability : float
        probability of each flip

    Returns
    -------
    SamplePair
    """
    vertical = rng.random() < probability
    horizontal = rng.random() < probability
    return flip(pair, vertical, horizontal)


def stack_pairs(pairs):
    """Model inputs and targets of a list of pairs."""
    x = unet.normalize(np.stack([p.image.data for p in pairs]))
    y = np.stack([p.mask.data for p in pairs]).astype('f4')
    return x, y


class BatchProducer:
    """Assemble augmented batches on a background thread.

    Iterating yields (inputs, targets) in the order given; the queue holds
    at most queue_size batches.
    """

    def __init__(self, pairs, order, batch_size, rng, probability,
                 queue_size=parameters.training['queue_size']):
        self.pairs = pairs
        self.order = order
        self.batch_size = batch_size
        self.rng = rng
        self.probability = probability
        self.queue = queue.Queue(maxsize=max(queue_size, 1))
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        try:
            for i in range(0, len(self.order), self.batch_size):
                if self.stop.is_set():
                    return
                batch = [augment(self.pairs[j], self.rng, self.probability)
                         for j in self.order[i:i + self.batch_size]]
                self.queue.put(stack_pairs(batch))
            self.queue.put(None)
        except Exception as err:
            self.queue.put(err)

    def __iter__(self):
        self.thread.start()
        try:
            while True:
                item = self.queue.get()
                if item is None:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.stop.set()
            # unblock a producer waiting on a full queue
            while self.thread.is_alive():
                try:
                    self.queue.get_nowait()
                except queue.Empty:
                    self.thread.join(timeout=0.01)


def evaluate(model, pairs, batch_size=parameters.prediction['batch_size'],
             dice_weight=1.0):
    """Confusion counts and metrics of a model over a set of pairs.

    Parameters
    ----------
    model : UNetModel
        model to evaluate
    pairs : list[SamplePair]
        tiles to predict
    batch_size : int
        tiles per forward pass

    Returns
    -------
    dict
        counts (ConfusionCounts), precision, recall, f1, accuracy and loss,
        accumulated over all pixels of all pairs; undefined precision or
        recall are 0
    """
    if not pairs:
        raise ValueError('no pairs to evaluate')
    images = np.stack([p.image.data for p in pairs])
    target = np.stack([p.mask.data[0] for p in pairs]).astype('f4')
    prob = unet.predict_proba(model, images, batch_size=batch_size)
    counts = confusion_arrays(prob >= parameters.probability_threshold,
                              target > 0)
    precision, recall, f1 = prf(counts, zero_division=0.0)
    return dict(counts=counts, precision=precision, recall=recall, f1=f1,
                accuracy=counts.accuracy,
                loss=unet.loss(prob, target, dice_weight))


def _check_splits(pairs):
    train_pairs = [p for p in pairs if p.split == 'training']
    val_pairs = [p for p in pairs if p.split == 'validation']
    if not train_pairs:
        raise ValueError('empty training split')
    if not val_pairs:
        raise ValueError('empty validation split')
    shared = ({p.source_id for p in train_pairs}
              & {p.source_id for p in val_pairs})
    if shared:
        raise ValueError(f'scenes {sorted(shared)} appear in both splits')
    sizes = {p.image.grid.shape for p in pairs}
    if len(sizes) != 1:
        raise ValueError(f'pairs have several tile sizes: {sorted(sizes)}')
    return train_pairs, val_pairs


def train(pairs, config, model_config=None):
    """Train a U-Net and keep the checkpoint with the best validation
    pixel accuracy.

    Parameters
    ----------
    pairs : list[SamplePair]
        training and validation tiles
    config : TrainConfig
        loop settings
    model_config : UNetConfig or None
        network shape; None uses the desk preset at the tile size, seeded
        with config.seed

    Returns
    -------
    model : UNetModel
        best checkpoint; on ties the earlier epoch
    history : astropy.table.Table
        one row per epoch: epoch, train_loss, val_loss, val_accuracy,
        val_f1; meta['best_epoch'] holds the chosen epoch
    """
    train_pairs, val_pairs = _check_splits(pairs)
    size = train_pairs[0].image.grid.width
    if model_config is None:
        model_config = unet.UNetConfig.preset('desk', input_size=size,
                                              seed=config.seed)
    if model_config.input_size != size:
        raise ValueError(f'tiles are {size} pixels, model expects '
                         f'{model_config.input_size}')
    model = unet.UNetModel(model_config)
    state = unet.AdamState.for_model(model,
                                     learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = table.Table(names=('epoch', 'train_loss', 'val_loss',
                                 'val_accuracy', 'val_f1'),
                          dtype=('i4', 'f8', 'f8', 'f8', 'f8'))
    best = None
    best_acc = -np.inf
    best_epoch = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(train_pairs))
        producer = BatchProducer(train_pairs, order, config.batch_size,
                                 np.random.default_rng([config.seed, epoch]),
                                 config.flip_probability, config.queue_size)
        total = 0.0
        for x, y in producer:
            value, grads = unet.value_and_grad(model, x, y,
                                               config.dice_weight)
            unet.adam_step(model, grads, state)
            total += value * len(x)
        report = evaluate(model, val_pairs, dice_weight=config.dice_weight)
        history.add_row((epoch, total / len(train_pairs), report['loss'],
                         report['accuracy'], report['f1']))
        if report['accuracy'] > best_acc:
            best_acc = report['accuracy']
            best = model.copy()
            best_epoch = epoch
        log_record('train', epoch=epoch, train_loss=total / len(train_pairs),
                   val_loss=report['loss'], val_accuracy=report['accuracy'],
                   val_f1=report['f1'], seconds=time.time() - t0)
    history.meta['best_epoch'] = best_epoch
    return best, history


def write_history(history, path):
    """Write a training history table as CSV."""
    history.write(path, format='ascii.csv', overwrite=True)

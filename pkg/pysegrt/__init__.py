from pathlib import Path
import numpy as np
from . import tensor, layers, model, dataset

THRESHOLD = .5

def predict(net, images):
    """Per-class probabilities for a (H, W, 3) image or a (B, H, W, 3) batch of them.

    Images bigger than the network's input are subsampled down to it first.
    """
    images = np.asarray(images, dtype=tensor.DTYPE)
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch.shape[1:3] != (net.height, net.width):
        batch = np.stack([dataset.subsample_image(i, net.height, net.width) for i in batch])
    if net.mode != 'infer':
        net = model.with_mode(model.copy(net), 'infer')
    probs = layers.sigmoid(model.forward(net, batch))
    return probs[0] if single else probs

def classify(probs, threshold=THRESHOLD):
    """Turns independent per-class probabilities into class indices.

    Every class at or above ``threshold`` is a candidate and the most probable candidate wins. Pixels with no
    candidates are background.
    """
    hits = probs >= threshold
    best = np.argmax(np.where(hits, probs, -1.), -1)
    return np.where(hits.any(-1), best + 1, 0).astype(np.uint8)

def segment(net, image):
    """The class-index mask of a single (H, W, 3) image, at the network's input resolution."""
    return classify(predict(net, image))

def run(out='output', count=40, epochs=50, height=32, width=48, seed=0):
    """Generates toy scenes, trains a network on them and evaluates it on the held-out ones.

    The defaults are small enough to run in a few minutes on a laptop. Pass bigger ones if you want.
    """
    from . import config, train, evaluation, plotting
    out = Path(out)

    print(f'Generating {count} {width}x{height} toy scenes in "{out}"...')
    manifest = dataset.write_toy_dataset(out / 'toy', count, seed=seed, height=height, width=width)

    print(f'Training for up to {epochs} epochs...')
    settings = config.resolve({
        'train': {'max_epochs': epochs, 'initial_lr': .01, 'seed': seed, 'input_height': height, 'input_width': width},
        'augment': {'seed': seed}})
    net = model.build_model(height, width, seed=seed)
    net, history = train.fit(net, manifest, settings.train, settings.augment)
    model.save_weights(net, out / 'model.sgrt')
    train.save_history(history, out / 'history.csv')

    print('Evaluating...')
    report = evaluation.evaluate_model(net, manifest, 'test')
    evaluation.export_report(report, out / 'eval')
    print(evaluation.summary_table({'toy': report}).to_string(float_format='%.4f'))

    print('Rendering...')
    plotting.plot_curves(report).figure.savefig(out / 'curves.png')
    return net, report

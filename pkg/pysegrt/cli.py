"""The ``segrt`` command line: one subcommand per pipeline stage.

Exits 0 on success, 1 on a runtime or IO error and 2 on a usage error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
import numpy as np
import aljpy
from . import config as C, dataset as D, augment as A, model as M, train as T, evaluation as E, bench as B
from . import predict, classify

log = logging.getLogger(__name__)

def _size(s):
    try:
        w, h = s.lower().split('x')
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f'Expected a WIDTHxHEIGHT size, got "{s}"')

def _sizes(s):
    return [_size(p) for p in s.split(',') if p]

def _fractions(s):
    try:
        return tuple(float(f) for f in s.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f'Expected comma-separated fractions, got "{s}"')

def gen_toy(args):
    width, height = args.size
    manifest = D.write_toy_dataset(args.out, args.count, seed=args.seed, height=height, width=width, fractions=args.fractions)
    splits = ', '.join(f'{k} {len(v)}' for k, v in manifest.splits.items())
    print(f'Wrote {args.count} toy scenes to {args.out} ({splits})')

def replace_bg(args):
    manifest = D.replace_backgrounds(D.load_manifest(args.manifest), args.backgrounds, args.out, seed=args.seed)
    print(f'Wrote {len(manifest.entries)} samples with replaced backgrounds to {args.out}')

def augment_preview(args):
    augment = C.load_config(args.config).augment
    if args.seed is not None:
        augment = C.merge(augment, {'seed': args.seed})
    if args.preset is not None:
        augment = C.validate_augment(C.merge(augment, A.PRESETS[args.preset]))
    image = D.load_image(args.sample)
    mask = D.load_mask(args.mask) if args.mask else np.zeros(image.shape[:2], np.uint8)
    sample = A.apply_pipeline(aljpy.dotdict(image=image, mask=mask), augment, args.index)
    D.save_image(sample.image, args.out)
    if args.mask_out:
        D.save_mask(sample.mask, args.mask_out)
    print(f'Wrote the augmented sample to {args.out}')

def training_config(args):
    """The config file's settings, with any flags layered on top."""
    settings = C.load_config(args.config)
    flags = {
        'max_epochs': args.epochs, 'batch_size': args.batch_size, 'initial_lr': args.lr, 'seed': args.seed,
        'input_width': args.size[0] if args.size else None, 'input_height': args.size[1] if args.size else None,
        'workers': args.workers}
    train = C.validate_train(C.merge(settings.train, {k: v for k, v in flags.items() if v is not None}, 'train.'))
    augment = settings.augment
    if args.preset is not None:
        augment = C.validate_augment(C.merge(augment, A.PRESETS[args.preset], 'augment.'))
    return train, augment

def train(args):
    settings, augment = training_config(args)
    manifest = D.load_manifest(args.manifest)
    backgrounds = [D.load_image(p) for p in D.background_paths(args.backgrounds)] if args.backgrounds else None

    model = M.build_model(settings.input_height, settings.input_width, seed=settings.seed, alpha=settings.alpha)
    best, history = T.fit(model, manifest, settings, augment, backgrounds=backgrounds, checkpoint=args.out)
    M.save_weights(best, args.out)
    history_path = args.history or Path(args.out).with_suffix('.csv')
    T.save_history(history, history_path)
    if history:
        print(f'Trained for {len(history)} epochs; best val loss {min(r.val_loss for r in history):.4f}. Weights in {args.out}')
    else:
        print(f'Trained for 0 epochs. Weights in {args.out}')

def infer(args):
    model = M.prepare_inference(M.load_model(args.weights))
    probs = predict(model, D.load_image(args.input))
    D.save_mask(classify(probs), args.output)
    if args.prob_dir:
        for c, name in enumerate(model.names):
            D.save_image(np.repeat(probs[..., c:c+1], 3, -1), Path(args.prob_dir) / f'{name.replace(" ", "_")}.png')
    print(f'Wrote the mask to {args.output}')

def evaluate(args):
    model = M.load_model(args.weights)
    report = E.evaluate_model(model, D.load_manifest(args.manifest), args.split, args.batch_size)
    E.export_report(report, args.out)
    if args.plot:
        import matplotlib
        matplotlib.use('Agg')
        from . import plotting
        plotting.plot_curves(report).figure.savefig(Path(args.out) / 'curves.png')

    table = E.summary_table({'model': report})
    if args.json:
        print(json.dumps({row: (None if np.isnan(ap) else ap) for row, ap in table['model'].items()}))
    else:
        print(table.to_string(float_format='%.4f'))

def bench(args):
    report = B.scaling_report(args.sizes, iterations=args.iters, warmup=args.warmup)
    B.save_results(report, args.out)
    print(report.table.to_string(index=False, float_format='%.2f'))
    print(f'{report.ms_per_kilopixel:.3f}ms per kilopixel, R² {report.r2:.4f}')

def params(args):
    total, breakdown = M.count_parameters(M.from_weights(M.load_weights(args.weights)))
    if args.json:
        print(json.dumps({'total': total, 'layers': [dict(r) for r in breakdown]}))
    else:
        import pandas as pd
        print(pd.DataFrame(breakdown).to_string(index=False))
        print(f'{total} trainable parameters')

def parser():
    p = argparse.ArgumentParser(prog='segrt', description='Train, run, evaluate and time the segmentation network')
    p.add_argument('--verbose', '-v', action='store_true', help='log progress at INFO level')
    sub = p.add_subparsers(dest='command', required=True)

    s = sub.add_parser('gen-toy', help='generate procedural toy scenes and a manifest')
    s.add_argument('--count', type=int, required=True)
    s.add_argument('--out', type=Path, required=True)
    s.add_argument('--seed', type=int, default=0)
    s.add_argument('--size', type=_size, default=(320, 240), help='WIDTHxHEIGHT of the scenes')
    s.add_argument('--fractions', type=_fractions, default=(.7, .1, .2), help='train,val,test or train,test')
    s.set_defaults(func=gen_toy)

    s = sub.add_parser('replace-bg', help='paste background images behind every sample of a manifest')
    s.add_argument('--manifest', type=Path, required=True)
    s.add_argument('--backgrounds', type=Path, required=True)
    s.add_argument('--out', type=Path, required=True)
    s.add_argument('--seed', type=int, default=0)
    s.set_defaults(func=replace_bg)

    s = sub.add_parser('augment-preview', help='apply the augmentation pipeline to one image')
    s.add_argument('--sample', type=Path, required=True, help='the image')
    s.add_argument('--mask', type=Path, help='its mask; without one, everything is background')
    s.add_argument('--config', type=Path)
    s.add_argument('--preset', choices=sorted(A.PRESETS))
    s.add_argument('--index', type=int, default=0, help='the sample index the pipeline is seeded with')
    s.add_argument('--seed', type=int)
    s.add_argument('--out', type=Path, required=True)
    s.add_argument('--mask-out', type=Path)
    s.set_defaults(func=augment_preview)

    s = sub.add_parser('train', help='train a network on a manifest')
    s.add_argument('--manifest', type=Path, required=True)
    s.add_argument('--config', type=Path)
    s.add_argument('--out', type=Path, required=True, help='where to write the best weights')
    s.add_argument('--history', type=Path, help='where to write the per-epoch CSV; defaults to next to the weights')
    s.add_argument('--preset', choices=sorted(A.PRESETS))
    s.add_argument('--backgrounds', type=Path, help='a directory of background images to paste behind the samples')
    s.add_argument('--epochs', type=int)
    s.add_argument('--batch-size', type=int)
    s.add_argument('--lr', type=float)
    s.add_argument('--seed', type=int)
    s.add_argument('--size', type=_size, help='WIDTHxHEIGHT of the network input')
    s.add_argument('--workers', type=int)
    s.set_defaults(func=train)

    s = sub.add_parser('infer', help='segment one image')
    s.add_argument('--weights', type=Path, required=True)
    s.add_argument('--input', type=Path, required=True)
    s.add_argument('--output', type=Path, required=True)
    s.add_argument('--prob-dir', type=Path, help='also write each class\'s probability map here')
    s.set_defaults(func=infer)

    s = sub.add_parser('eval', help='compute precision-recall curves and mAP over a split')
    s.add_argument('--weights', type=Path, required=True)
    s.add_argument('--manifest', type=Path, required=True)
    s.add_argument('--split', default='test')
    s.add_argument('--out', type=Path, required=True)
    s.add_argument('--batch-size', type=int, default=8)
    s.add_argument('--plot', action='store_true', help='also render the curves to curves.png')
    s.add_argument('--json', action='store_true')
    s.set_defaults(func=evaluate)

    s = sub.add_parser('bench', help='time inference across resolutions')
    s.add_argument('--sizes', type=_sizes, default=list(B.LADDER), help='comma-separated WIDTHxHEIGHT sizes')
    s.add_argument('--iters', type=int, default=200)
    s.add_argument('--warmup', type=int, default=20)
    s.add_argument('--out', type=Path, required=True)
    s.set_defaults(func=bench)

    s = sub.add_parser('params', help='count the parameters in a weights file')
    s.add_argument('--weights', type=Path, required=True)
    s.add_argument('--json', action='store_true')
    s.set_defaults(func=params)

    return p

def run(argv=None):
    try:
        args = parser().parse_args(argv)
    except SystemExit as e:
        return e.code

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f'segrt: error: {e}', file=sys.stderr)
        log.debug('Traceback', exc_info=True)
        return 1
    return 0

def main():
    return run(sys.argv[1:])

def test_usage_errors(capsys):
    assert run(['--frobnicate']) == 2
    assert 'usage' in capsys.readouterr().err
    assert run(['params']) == 2
    assert run([]) == 2

def test_missing_weights(tmp_path, capsys):
    missing = tmp_path / 'missing.sgrt'
    assert run(['infer', '--weights', str(missing), '--input', 'x.png', '--output', str(tmp_path / 'o.png')]) == 1
    assert 'missing.sgrt' in capsys.readouterr().err

def test_params(tmp_path, capsys):
    M.save_weights(M.build_model(8, 8), tmp_path / 'w.sgrt')
    assert run(['params', '--weights', str(tmp_path / 'w.sgrt')]) == 0
    assert '9282 trainable parameters' in capsys.readouterr().out

    assert run(['params', '--weights', str(tmp_path / 'w.sgrt'), '--json']) == 0
    assert json.loads(capsys.readouterr().out)['total'] == 9282

    content = bytearray((tmp_path / 'w.sgrt').read_bytes())
    content[30 + len(','.join(M.NAMES)) + 11] ^= 0xFF
    (tmp_path / 'w.sgrt').write_bytes(bytes(content))
    assert run(['params', '--weights', str(tmp_path / 'w.sgrt')]) == 1
    assert 'checksum mismatch' in capsys.readouterr().err

def test_bad_config(tmp_path, capsys):
    D.write_toy_dataset(tmp_path / 'toy', 2, height=32, width=32, fractions=(.5, .5))
    (tmp_path / 'c.json').write_text('{"train": {"batchsize": 4}}')
    code = run(['train', '--manifest', str(tmp_path / 'toy' / 'manifest.json'), '--config', str(tmp_path / 'c.json'), '--out', str(tmp_path / 'w.sgrt')])
    assert code == 1
    assert 'batchsize' in capsys.readouterr().err

    (tmp_path / 'c.json').write_text('{"train": 3}')
    code = run(['train', '--manifest', str(tmp_path / 'toy' / 'manifest.json'), '--config', str(tmp_path / 'c.json'), '--out', str(tmp_path / 'w.sgrt')])
    assert code == 1
    assert 'should be an object' in capsys.readouterr().err

def test_pipeline(tmp_path, capsys):
    toy, weights = tmp_path / 'toy', tmp_path / 'w.sgrt'
    assert run(['gen-toy', '--count', '6', '--out', str(toy), '--size', '32x32', '--fractions', '.5,.17,.33']) == 0
    manifest = str(toy / 'manifest.json')

    (tmp_path / 'c.json').write_text('{"train": {"batch_size": 2}}')
    args = ['train', '--manifest', manifest, '--config', str(tmp_path / 'c.json'), '--out', str(weights),
            '--epochs', '2', '--lr', '.01', '--size', '32x32', '--preset', 'conventional']
    assert run(args) == 0
    assert weights.exists() and weights.with_suffix('.csv').exists()

    image = str(toy / 'images' / '00000.png')
    assert run(['infer', '--weights', str(weights), '--input', image, '--output', str(tmp_path / 'm.png'), '--prob-dir', str(tmp_path / 'p')]) == 0
    assert D.load_mask(tmp_path / 'm.png').shape == (32, 32)
    assert len(list((tmp_path / 'p').iterdir())) == 5

    capsys.readouterr()
    assert run(['eval', '--weights', str(weights), '--manifest', manifest, '--out', str(tmp_path / 'eval'), '--json', '--plot']) == 0
    assert set(json.loads(capsys.readouterr().out)) == {'Ball', 'Field', 'Line', 'Goal', 'Robot', 'All'}
    assert (tmp_path / 'eval' / 'curves.png').exists()

    assert run(['augment-preview', '--sample', image, '--mask', str(toy / 'masks' / '00000.png'), '--out', str(tmp_path / 'a.png'), '--mask-out', str(tmp_path / 'am.png')]) == 0
    assert D.load_mask(tmp_path / 'am.png').shape == (32, 32)

    assert run(['bench', '--sizes', '8x8,16x8,16x16', '--iters', '2', '--warmup', '0', '--out', str(tmp_path / 'b.csv')]) == 0
    assert (tmp_path / 'b.csv').read_text().startswith('# host:')

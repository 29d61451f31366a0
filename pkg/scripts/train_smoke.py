"""Train both variants on a small problem and print per-epoch metrics.

Without --cifar the synthetic two-class set is used at a reduced model
size, which finishes in seconds.  With --cifar DIR the cifar10 preset is
trained on a 200-per-class subset at reduced width.

    python scripts/train_smoke.py
    python scripts/train_smoke.py --cifar ~/data/cifar-10-batches-bin --epochs 5
"""
import argparse
import json

from visreformer.core import RngStream
from visreformer.data import load_cifar10, synth_twoclass
from visreformer.model import build, preset_config
from visreformer.train import TrainConfig, fit


def run(variant, args):
    if args.cifar:
        train, val = load_cifar10(args.cifar, subset_per_class=200)
        val = val.subset(slice(0, 1000))
        mcfg = preset_config("cifar10", variant, embed_dim=64, heads=2, depth=2, stem_channels=8)
        tcfg = TrainConfig(variant=variant, seed=args.seed, epochs=args.epochs, micro_batch=8, accum_steps=4)
    else:
        data = synth_twoclass(256, 8, 4.0, RngStream(args.seed))
        train, val = data.subset(slice(0, 128)), data.subset(slice(128, 256))
        mcfg = preset_config("cifar10", variant, embed_dim=16, heads=2, depth=2, stem_channels=4, patch_size=2,
                             image_size=8, bucket_size=4, n_classes=2)
        tcfg = TrainConfig(variant=variant, seed=args.seed, epochs=args.epochs, micro_batch=8, accum_steps=1,
                           augment=False)
    return fit(build(mcfg, args.seed), train, tcfg, val_set=val,
               on_epoch=lambda line: print(variant, json.dumps(line, sort_keys=True)))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cifar", help="directory with the CIFAR-10 binary batches")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    for variant in ("dense", "lsh"):
        history = run(variant, args)
        print(f"{variant}: final train accuracy {history[-1]['train_accuracy']:.3f}")

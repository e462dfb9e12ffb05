"""Pre-train a desk-scale backbone on synthetic stroke characters.

Only for offline environments: the frozen extractor needs *some* generic
features before routing by confidence means anything, and no natural-image
corpus or released checkpoint may be reachable. The output is a plain
state_dict plus a manifest, ingested like any downloaded checkpoint.

    python scripts/pretrain_proxy_backbone.py --out weights/rn18-c16_strokes.pth
"""

from __future__ import annotations

import argparse
import logging
import time

import torch
import torch.nn.functional as F

from pam.harness.data import Preprocess, make_strokes
from pam.model import write_manifest
from pam.resnet import ResNet, get_variant

log = logging.getLogger("pretrain")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="rn18-c16")
    ap.add_argument("--classes", type=int, default=100)
    ap.add_argument("--per-class", type=int, default=60)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="weights/rn18-c16_strokes.pth")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    torch.manual_seed(args.seed)
    t0 = time.time()
    data = make_strokes(args.classes, args.per_class, 10, seed=args.seed)
    log.info("rendered %d images in %.0fs", len(data.train_y), time.time() - t0)
    prep = Preprocess(32)
    xtr, xte = prep(data.train_x), prep(data.test_x)
    var = get_variant(args.variant)
    net = ResNet(var)
    net.fc = torch.nn.Linear(var.feature_dim, args.classes)
    opt = torch.optim.Adam(net.parameters(), lr=args.lr)
    steps = args.epochs * ((len(xtr) + args.batch_size - 1) // args.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, args.lr, total_steps=steps)
    gen = torch.Generator().manual_seed(args.seed)
    for ep in range(args.epochs):
        net.train()
        perm = torch.randperm(len(xtr), generator=gen)
        tot = 0.0
        for i in range(0, len(xtr), args.batch_size):
            idx = perm[i:i + args.batch_size]
            x = xtr[idx]
            flip = torch.rand(len(x), generator=gen) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            loss = F.cross_entropy(net(x), data.train_y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            tot += float(loss.detach()) * len(idx)
        net.eval()
        with torch.no_grad():
            acc = (net(xte).argmax(1) == data.test_y).float().mean().item()
        log.info("epoch %d loss %.3f test acc %.3f (%.0fs)", ep + 1, tot / len(xtr), acc,
                 time.time() - t0)
    torch.save(net.state_dict(), args.out)
    manifest = write_manifest(args.out, args.variant,
                              f"synthetic strokes, {args.classes} classes, seed {args.seed}")
    log.info("wrote %s and %s", args.out, manifest)


if __name__ == "__main__":
    main()

"""Desk-scale transfer experiment used by the acceptance suite.

Pretrains a mini_vgg trunk on shape variant A, then fine-tunes a fresh head
on a small variant-B training set with the trunk frozen (via cached
features, which the models module guarantees is gradient-equivalent to
end-to-end training with a frozen trunk).  The control arm trains an
identical head over a never-trained frozen trunk.
"""

import numpy as np

from ftk._mem import enable_heap_reuse
from ftk.layers import nll_loss
from ftk.models import ModelConfig, build_model, feature_extract, freeze_backbone, replace_head
from ftk.optim import Adam, ClipConfig, clip_global_norm
from ftk.tensor import Tensor

from synth_shapes import render_set


def train_full(model, images, labels, epochs, lr, batch=64, seed=0, clip_max=0.1):
    """End-to-end training; returns final-epoch training accuracy."""
    opt = Adam(model.tree, lr=lr)
    clip = ClipConfig(clip_max)
    n = len(labels)
    rng = np.random.default_rng(seed)
    acc = 0.0
    for ep in range(epochs):
        order = rng.permutation(n)
        correct = 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            opt.zero_grad()
            out = model.forward(Tensor(images[idx]), "train",
                                dropout_seed=(ep << 24) ^ start ^ seed)
            nll_loss(out, labels[idx]).backward()
            clip_global_norm(opt.trainable_grads(), clip)
            opt.step()
            correct += int((out.data.argmax(1) == labels[idx]).sum())
        acc = correct / n
    return acc


def train_head_on_features(model, feats_tr, y_tr, feats_va, y_va,
                           epochs=40, lr=1e-3, batch=64, seed=0):
    """Head-only training over cached trunk features; returns best val accuracy."""
    opt = Adam(model.tree, lr=lr)
    n = len(y_tr)
    rng = np.random.default_rng(seed)
    best = 0.0
    for ep in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            opt.zero_grad()
            out = model.head.forward(Tensor(feats_tr[idx]), "train",
                                     dropout_seed=(ep << 24) ^ start ^ seed)
            nll_loss(out, y_tr[idx]).backward()
            opt.step()
        out = model.head.forward(Tensor(feats_va), "eval")
        best = max(best, float((out.data.argmax(1) == y_va).mean()))
    return best


def extract_all(model, images, batch=64):
    chunks = [feature_extract(model, images[s : s + batch]) for s in range(0, len(images), batch)]
    return np.concatenate(chunks)


def run_one_seed(seed, *, pretrain_per_class=500, pretrain_epochs=2,
                 finetune_per_class=50, val_per_class=50, verbose=False):
    """Returns (pretrain_acc_on_A, finetuned_val_acc, random_trunk_val_acc)."""
    enable_heap_reuse()
    a_imgs, a_labels = render_set(pretrain_per_class, seed=1000 + seed, variant="A")
    b_tr, b_tr_y = render_set(finetune_per_class, seed=2000 + seed, variant="B")
    b_va, b_va_y = render_set(val_per_class, seed=3000 + seed, variant="B")

    pretrained = build_model(ModelConfig(arch="mini_vgg", num_classes=10), init_seed=seed)
    a_acc = train_full(pretrained, a_imgs, a_labels, pretrain_epochs, lr=1e-3, seed=seed)
    freeze_backbone(pretrained)
    replace_head(pretrained, 10, seed=seed + 7)
    acc_pre = train_head_on_features(
        pretrained, extract_all(pretrained, b_tr), b_tr_y,
        extract_all(pretrained, b_va), b_va_y, seed=seed)

    random_trunk = build_model(ModelConfig(arch="mini_vgg", num_classes=10), init_seed=seed + 99)
    freeze_backbone(random_trunk)
    replace_head(random_trunk, 10, seed=seed + 7)
    acc_rand = train_head_on_features(
        random_trunk, extract_all(random_trunk, b_tr), b_tr_y,
        extract_all(random_trunk, b_va), b_va_y, seed=seed)

    if verbose:
        print(f"seed {seed}: A-train acc {a_acc:.3f}; B val acc "
              f"pretrained {acc_pre:.3f} vs random trunk {acc_rand:.3f}")
    return a_acc, acc_pre, acc_rand


if __name__ == "__main__":
    import sys
    import time

    seeds = [int(s) for s in sys.argv[1:]] or [0]
    gaps = []
    for s in seeds:
        t0 = time.time()
        a_acc, pre, rand = run_one_seed(s, verbose=True)
        gaps.append(pre - rand)
        print(f"  gap {pre - rand:+.3f}  ({time.time() - t0:.0f}s)")
    print(f"median gap over {len(seeds)} seed(s): {float(np.median(gaps)):+.3f}")

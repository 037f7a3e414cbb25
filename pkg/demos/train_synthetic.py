"""Train a small two-layer model and read the masks it learned.

The synthetic target is a plain sum of features v2..v5 plus noise, so a
model that learned anything useful should concentrate its raw-input masks
there and starve the other seven inputs. Takes ~15 s on a laptop CPU.
"""

import numpy as np

from danet import (DANet, DANetConfig, PreprocessState, TrainConfig, entmax15,
                   evaluate, fit, stratified_split, synth_generate)

if __name__ == "__main__":
    np.set_printoptions(precision=3, suppress=True)

    ds = synth_generate(1, n=3000, seed=0, task="rank")
    train_raw, valid_raw = stratified_split(ds, frac=0.2, seed=0)
    pp = PreprocessState()
    train, valid = pp.fit(train_raw), pp.apply(valid_raw)

    cfg = DANetConfig(depth=2, k0=1, d0=16, d1=16, dropout=0.1, task="rank")
    model = DANet(11, cfg, ghost_size=256, seed=0)
    uniform = entmax15(model.blocks[0].main1.units[0].mask_logits).probs
    print("mask before training:", uniform, "\n")

    result = fit(model, train, valid,
                 TrainConfig(batch_size=512, ghost_size=256, lr0=0.02,
                             max_epochs=60, patience=60, seed=0))
    for epoch, lr, train_loss, valid_metric in result.history[::12]:
        print(f"epoch {epoch:3d}  lr {lr:.5f}  train loss {train_loss:8.4f}  "
              f"valid mse {valid_metric:8.4f}")
    print(f"best epoch {result.best_epoch} "
          f"(valid mse {result.best_metric:.4f}), "
          f"final valid mse {evaluate(model, valid):.4f}")
    print("(valid mse trails train loss early on: eval mode normalizes with "
          "running statistics,\n which move at momentum 0.01 and need a few "
          "hundred batches to catch up)\n")

    names = [f"v{i}" for i in range(11)]
    for label, layer in (("main path", model.blocks[0].main1),
                         ("shortcut ", model.blocks[0].shortcut)):
        m = entmax15(layer.units[0].mask_logits).probs
        kept = {names[i]: round(float(m[i]), 3)
                for i in np.argsort(-m) if m[i] > 0}
        print(f"{label} mask: {kept}")
    print("\n(the generating formula only ever reads v2..v5)")

import sys, time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E, layers as L
from owt.model import RetainedSelection, forward_owt, forward_holistic
from owt.tensor import DiffTensor

t0 = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)
train = P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=10, count=256, lesion_probability=0.5))
test = P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=20, count=24, lesion_probability=0.5))

# shared pretrained start
model = M.OwtModel.create(cfg, 32, 32, seed=0)
TR.run_training(train, model, TR.TgrConfig(base_lr=1.6e-2, effective_batch=16, epochs=25, warmup_epochs=3, seed=0), mode="holistic")
L.save_checkpoint(model.named_parameters(), ".calib/pre.owtw")
print(f"[{time.time()-t0:6.1f}s] pretrained", flush=True)

def eval_dice(model):
    dice, g_mse = [], []
    for s in test:
        for g in (1, 2, 3):
            recon, _, _ = forward_owt(DiffTensor(s.image), RetainedSelection((g,)), model)
            mask = E.segment_by_threshold(recon.data)
            dice.append(E.dice(mask, s.labels == g))
            tgt = TR.mask_target(s.image, s.labels, RetainedSelection((g,))).image
            g_mse.append(E.mse(recon.data, tgt))
    return float(np.mean(dice)), float(np.mean(g_mse))

zero_loss = np.mean([E.mse(np.zeros_like(s.image), TR.mask_target(s.image, s.labels, RetainedSelection((g,))).image)
                     for s in test for g in (1,2,3)])
print(f"predict-zero single-group loss reference: {zero_loss:.5f}", flush=True)

for peak_lr in (1e-3, 3e-3, 1e-2):
    model = M.OwtModel.create(cfg, 32, 32, seed=0)
    L.load_params_into(model.named_parameters(), L.load_checkpoint(".calib/pre.owtw"))
    base_lr = peak_lr * 256 / 16
    tcfg = TR.TgrConfig(base_lr=base_lr, effective_batch=16, epochs=30, warmup_epochs=2, seed=1)
    log = TR.TrainLog()
    TR.run_training(train, model, tcfg, mode="tgr", log=log)
    losses = [float(r[3]) for r in log.rows]
    d, gm = eval_dice(model)
    print(f"[{time.time()-t0:6.1f}s] peak {peak_lr:.0e}: train loss {losses[0]:.4f}->{np.mean(losses[-16:]):.5f}  dice {d:.3f}  1-group MSE {gm:.5f}", flush=True)

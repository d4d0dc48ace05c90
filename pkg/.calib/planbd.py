import time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E, layers as L
from owt.model import RetainedSelection, forward_owt
from owt.tensor import DiffTensor

t0 = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)

def data(seed, count, amp):
    return P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=seed, count=count,
                                    lesion_probability=0.5, group_intensities=(0.55, 0.72, 0.90),
                                    noise_amplitude=amp,
                                    min_region_area=48, max_region_area=200, grid_align=4))

def identity_init(model, kappa=2.5):
    pos = model.pos_table.data
    unit = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    anchors = [16*r + 2*c for r in range(4) for c in range(4)]
    model.collect_score.weight.data[...] = (kappa * unit[anchors].T).astype(np.float32)
    model.collect_score.bias.data[...] = 0.0
    model.restore_score.weight.data[...] = (kappa * unit.T).astype(np.float32)
    model.restore_score.bias.data[...] = 0.0

def run(tag, amp, ident, wd, peak, tgr_epochs=60):
    train, test = data(10, 256, amp), data(20, 16, amp)
    model = M.OwtModel.create(cfg, 32, 32, seed=0)
    TR.run_training(train, model, TR.TgrConfig(base_lr=1.6e-2, effective_batch=16,
                    epochs=20, warmup_epochs=2, seed=0, weight_decay=wd), mode="holistic")
    if ident:
        identity_init(model)
    tcfg = TR.TgrConfig(base_lr=peak*256/16, effective_batch=16, epochs=tgr_epochs,
                        warmup_epochs=3, seed=1, weight_decay=wd)
    TR.run_training(train, model, tcfg, mode="tgr")
    dice, inside, outside = [], [], []
    for s in test:
        for g in (1, 2, 3):
            pred, _, _ = forward_owt(DiffTensor(s.image), RetainedSelection((g,)), model)
            dice.append(E.dice(E.segment_by_threshold(pred.data), s.labels == g))
            region = s.labels == g
            inside.append(np.abs(pred.data[region]).mean())
            outside.append(np.abs(pred.data[~region]).mean())
    print(f"[{time.time()-t0:6.1f}s] {tag}: dice {np.mean(dice):.3f} |pred| in {np.mean(inside):.3f} out {np.mean(outside):.3f}", flush=True)

run("flat-tex wd=0", 0.015, False, 0.0, 3e-3)
run("flat-tex ident wd=0", 0.015, True, 0.0, 3e-3)
run("textured ident wd=0", 0.04, True, 0.0, 3e-3)

import time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E
from owt.model import RetainedSelection, forward_owt
from owt.tensor import DiffTensor

t0 = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)

def data(seed, count):
    return P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=seed, count=count,
                                    lesion_probability=0.5, group_intensities=(0.55, 0.72, 0.90),
                                    min_region_area=48, max_region_area=200, grid_align=4))

train, test = data(10, 256), data(20, 16)

def patch_labels(labels):
    return labels.reshape(8, 4, 8, 4).transpose(0, 2, 1, 3).reshape(64, 16)[:, 0]

def diagnose(model, tag):
    dice, own_mass, inside_amp, outside_amp = [], [], [], []
    for s in test:
        emb = M.encode(DiffTensor(s.image), model)
        tset, attn = M.organ_collect(emb, model)
        pl = patch_labels(s.labels)
        for g in (1, 2, 3):
            lo, hi = tset.span(g)
            if (pl == g).any():
                own_mass.append(attn.data[lo:hi][:, pl == g].sum(axis=1).mean())
            pred, _, _ = forward_owt(DiffTensor(s.image), RetainedSelection((g,)), model)
            dice.append(E.dice(E.segment_by_threshold(pred.data), s.labels == g))
            region = s.labels == g
            inside_amp.append(np.abs(pred.data[region]).mean())
            outside_amp.append(np.abs(pred.data[~region]).mean())
    print(f"[{time.time()-t0:6.1f}s] {tag}: dice {np.mean(dice):.3f} own-attn {np.mean(own_mass):.3f} "
          f"|pred| in {np.mean(inside_amp):.3f} / out {np.mean(outside_amp):.3f}", flush=True)

for wd, peak in ((0.0, 3e-3), (0.05, 3e-3), (0.0, 1e-2)):
    model = M.OwtModel.create(cfg, 32, 32, seed=0)
    TR.run_training(train, model, TR.TgrConfig(base_lr=1.6e-2, effective_batch=16,
                    epochs=20, warmup_epochs=2, seed=0, weight_decay=wd), mode="holistic")
    tcfg = TR.TgrConfig(base_lr=peak*256/16, effective_batch=16, epochs=60,
                        warmup_epochs=3, seed=1, weight_decay=wd)
    TR.run_training(train, model, tcfg, mode="tgr")
    diagnose(model, f"wd={wd} peak={peak:.0e} 60ep")

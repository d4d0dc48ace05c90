import time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E
from owt.model import RetainedSelection, forward_owt, forward_holistic
from owt.tensor import DiffTensor

t0 = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)

def data(seed, count, p=0.5):
    return P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=seed, count=count,
                                    lesion_probability=p, group_intensities=(0.55, 0.72, 0.90),
                                    min_region_area=48, max_region_area=200, grid_align=4))

train, test = data(10, 256), data(20, 24)
model = M.OwtModel.create(cfg, 32, 32, seed=0)
TR.run_training(train, model, TR.TgrConfig(base_lr=1.6e-2, effective_batch=16,
                epochs=25, warmup_epochs=3, seed=0), mode="holistic")
hol = np.mean([E.mse(forward_holistic(DiffTensor(s.image), model).data, s.image) for s in test])
print(f"[{time.time()-t0:6.1f}s] pretrained, holistic MSE {hol:.5f}", flush=True)

opt = None
tcfg = TR.TgrConfig(base_lr=4.8e-2, effective_batch=16, epochs=120, warmup_epochs=4, seed=1)
rng = np.random.default_rng(tcfg.seed)
opt = T.OptimizerState(base_lr=tcfg.base_lr, weight_decay=tcfg.weight_decay)
spe = 16
for epoch in range(120):
    order = rng.permutation(len(train))
    losses = []
    for b in range(spe):
        chunk = [train[i] for i in order[b*16:(b+1)*16]]
        losses.append(TR.train_step(chunk, model, opt, tcfg, rng, steps_per_epoch=spe))
    if epoch % 10 == 9 or epoch == 0:
        dice = {g: [] for g in (1, 2, 3)}
        for s in test:
            for g in (1, 2, 3):
                pred, _, _ = forward_owt(DiffTensor(s.image), RetainedSelection((g,)), model)
                dice[g].append(E.dice(E.segment_by_threshold(pred.data), s.labels == g))
        d = {g: round(float(np.mean(v)), 3) for g, v in dice.items()}
        print(f"[{time.time()-t0:6.1f}s] ep {epoch+1}: loss {np.mean(losses):.5f} dice {d} avg {np.mean(list(d.values())):.3f}", flush=True)

import time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E, layers as L
from owt.model import RetainedSelection, forward_owt
from owt.tensor import DiffTensor

t0 = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)

def data(bright, seed, count):
    kw = dict(height=32, width=32, groups=3, seed=seed, count=count, lesion_probability=0.5)
    if bright:
        kw.update(group_intensities=(0.55, 0.72, 0.90), min_region_area=60, max_region_area=200)
    return P.generate(P.PhantomSpec(**kw))

def eval_dice(model, test):
    per_g = {1: [], 2: [], 3: []}
    for s in test:
        for g in (1, 2, 3):
            recon, _, _ = forward_owt(DiffTensor(s.image), RetainedSelection((g,)), model)
            per_g[g].append(E.dice(E.segment_by_threshold(recon.data), s.labels == g))
    return {g: round(float(np.mean(v)), 3) for g, v in per_g.items()}

def build(score_std, pretrain, train):
    model = M.OwtModel.create(cfg, 32, 32, seed=0)
    if score_std is not None:
        rng = np.random.default_rng(777)
        for lin in (model.collect_score, model.restore_score):
            lin.weight.data[...] = L.trunc_normal(rng, lin.weight.shape, std=score_std)
    if pretrain:
        TR.run_training(train, model, TR.TgrConfig(
            base_lr=1.6e-2, effective_batch=16, epochs=25, warmup_epochs=3, seed=0),
            mode="holistic")
    return model

runs = [
    ("pre+std.02", False, dict(score_std=None, pretrain=True)),
    ("pre+std.15", False, dict(score_std=0.15, pretrain=True)),
    ("scratch+std.02", False, dict(score_std=None, pretrain=False)),
    ("scratch+std.15", False, dict(score_std=0.15, pretrain=False)),
    ("BRIGHT pre+std.15", True, dict(score_std=0.15, pretrain=True)),
    ("BRIGHT scratch+std.15", True, dict(score_std=0.15, pretrain=False)),
]
for name, bright, kw in runs:
    train = data(bright, 10, 256)
    test = data(bright, 20, 24)
    model = build(train=train, **kw)
    log = TR.TrainLog()
    TR.run_training(train, model, TR.TgrConfig(
        base_lr=4.8e-2, effective_batch=16, epochs=40, warmup_epochs=2, seed=1),
        mode="tgr", log=log)
    losses = [float(r[3]) for r in log.rows]
    print(f"[{time.time()-t0:6.1f}s] {name:24s} loss {losses[0]:.4f}->{np.mean(losses[-16:]):.5f} dice {eval_dice(model, test)}", flush=True)

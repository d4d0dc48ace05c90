import json, time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E
from owt.model import RetainedSelection, forward_owt, forward_holistic
from owt.tensor import DiffTensor

t_start = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)
model = M.OwtModel.create(cfg, 32, 32, seed=0)

train_spec = P.PhantomSpec(height=32, width=32, groups=3, seed=10, count=256, lesion_probability=0.5)
test_spec = P.PhantomSpec(height=32, width=32, groups=3, seed=20, count=48, lesion_probability=0.5)
train = P.generate(train_spec)
test = P.generate(test_spec)

def eval_model(tag):
    hol, dice = [], {1: [], 2: [], 3: []}
    allsel = RetainedSelection((0, 1, 2, 3))
    for s in test[:32]:
        pred = forward_holistic(DiffTensor(s.image), model)
        hol.append(E.mse(pred.data, s.image))
        for g in (1, 2, 3):
            recon, _, _ = forward_owt(DiffTensor(s.image), RetainedSelection((g,)), model)
            mask = E.segment_by_threshold(recon.data)
            dice[g].append(E.dice(mask, s.labels == g))
        pa, _, _ = forward_owt(DiffTensor(s.image), allsel, model)
    davg = {g: float(np.mean(v)) for g, v in dice.items()}
    print(f"[{time.time()-t_start:7.1f}s] {tag}: holMSE={np.mean(hol):.5f} dice={davg} avg={np.mean(list(davg.values())):.3f}", flush=True)

# stage 1: holistic pretraining
hol_cfg = TR.TgrConfig(base_lr=1.6e-2, effective_batch=16, epochs=30, warmup_epochs=3, seed=0)
opt = TR.run_training(train, model, hol_cfg, mode="holistic")
eval_model("after holistic 30ep")

# stage 2: TGR
tgr_cfg = TR.TgrConfig(base_lr=1.6e-2, effective_batch=16, epochs=40, warmup_epochs=4, seed=1)
for round_idx in range(6):
    TR.run_training(train, model, tgr_cfg, mode="tgr")
    eval_model(f"tgr round {(round_idx+1)*40}ep")

import time
import numpy as np
from owt import model as M, phantoms as P, training as TR, tensor as T, evalkit as E, layers as L
from owt.model import RetainedSelection
from owt.tensor import DiffTensor

t0 = time.time()
cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                    dec_blocks=2, groups=3, tokens_per_group=4)
G, F = 3, 4

def patch_labels(labels):  # majority label per 4x4 patch -> [64]
    out = np.zeros(64, dtype=int)
    for i in range(8):
        for j in range(8):
            block = labels[i*4:(i+1)*4, j*4:(j+1)*4]
            out[i*8+j] = np.bincount(block.reshape(-1), minlength=G+1).argmax()
    return out

def oracle_collect_attn(plabels):  # [(G+1)*F, 64]
    A = np.zeros(((G+1)*F, 64), dtype=np.float32)
    for g in range(G+1):
        where = np.flatnonzero(plabels == g)
        if len(where) == 0:
            A[g*F:(g+1)*F, :] = 1.0/64
            continue
        for f in range(F):  # round-robin split of the region's patches
            chunk = where[f::F]
            if len(chunk) == 0:
                chunk = where
            A[g*F+f, chunk] = 1.0/len(chunk)
    return A

def oracle_restore_attn(plabels, retained):  # [64, len(retained)*F]
    A = np.zeros((64, len(retained)*F), dtype=np.float32)
    for p in range(64):
        g = plabels[p]
        if g in retained:
            base = retained.index(g)*F
            A[p, base:base+F] = 1.0/F
        else:
            A[p, :] = 1.0/(len(retained)*F)
    return A

def forward_oracle(img, labels, sel, model):
    emb = M.encode(img, model)
    plabels = patch_labels(labels)
    A_t = DiffTensor(oracle_collect_attn(plabels))
    values = model.collect_value(emb.tokens)
    collected = T.matmul(A_t, values)
    rows = [g*F + f for g in sel.retained_groups for f in range(F)]
    retained = T.take_rows(collected, np.asarray(rows))
    encoded = M.token_group_encode(retained, model)
    A_r = DiffTensor(oracle_restore_attn(plabels, list(sel.retained_groups)))
    restored = M.HolisticEmbedding(T.matmul(A_r, model.restore_value(encoded)), model.grid)
    return M.decode(restored, model)

train = P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=10, count=256,
                                 lesion_probability=0.5, group_intensities=(0.55, 0.72, 0.90),
                                 min_region_area=60, max_region_area=200))
test = P.generate(P.PhantomSpec(height=32, width=32, groups=3, seed=20, count=16,
                                lesion_probability=0.5, group_intensities=(0.55, 0.72, 0.90),
                                min_region_area=60, max_region_area=200))

model = M.OwtModel.create(cfg, 32, 32, seed=0)
opt = T.OptimizerState(weight_decay=0.05)
rng = np.random.default_rng(0)
tcfg = TR.TgrConfig(base_lr=4.8e-2, effective_batch=16, epochs=40, warmup_epochs=2, seed=1)
params = model.named_parameters()
spe = 16
for epoch in range(40):
    order = rng.permutation(len(train))
    for b in range(spe):
        chunk = [train[i] for i in order[b*16:(b+1)*16]]
        losses = []
        for s in chunk:
            sel = TR.draw_selection(G, rng)
            tgt = TR.mask_target(s.image, s.labels, sel)
            pred = forward_oracle(DiffTensor(s.image), s.labels, sel, model)
            losses.append(TR.reconstruction_loss(pred, tgt.image))
        total = losses[0]
        for term in losses[1:]:
            total = T.add(total, term)
        total = T.scale(total, 1.0/len(losses))
        T.backward(total)
        T.adamw_step(params, opt, TR.lr_at(opt.step_count, tcfg, spe))
        model.zero_grads()
    if epoch % 8 == 7:
        dice = []
        for s in test:
            for g in (1, 2, 3):
                pred = forward_oracle(DiffTensor(s.image), s.labels, RetainedSelection((g,)), model)
                dice.append(E.dice(E.segment_by_threshold(pred.data), s.labels == g))
        print(f"[{time.time()-t0:6.1f}s] oracle-routing epoch {epoch+1}: loss {total.item():.5f} dice {np.mean(dice):.3f}", flush=True)

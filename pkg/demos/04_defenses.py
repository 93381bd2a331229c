"""Countermeasures: re-projecting purified outputs, the entropy detector,
and the KL diagnostic showing why heavy diffusion erases a trigger shift.

Run: python demos/04_defenses.py
"""
# %%
import numpy as np

from difflab import attacks as atk
from difflab import defenses as dfn
from difflab import diffusion as dif
from difflab import nn
from difflab.harness import DatasetSpec, make_dataset
from difflab.numerics import RngStream

rng = RngStream(3)
data = make_dataset(DatasetSpec(kind="gaussian_mixture", dim=2, train_size=2000, test_size=500))
benign = dif.train_denoiser(dif.DiffusionModel.create(2, rng.derive("dm"), hidden=(64, 64)), data.x_train, 150,
                            rng.derive("dm-train"), lr=3e-3)
clf = nn.train_classifier(nn.Mlp.init([2, 32, 4], rng.derive("clf")), data.x_train, data.y_train, epochs=20,
                          rng=rng.derive("clf-train"), lr=1e-2)

# %% Re-projection keeps every purified output inside an l-inf ball
x = data.x_test
purified = dif.purify(benign, x, 8, rng.derive("p"))
clamped = dfn.reproject(x, purified, 0.05)
print("max l-inf move before/after:", np.abs(purified - x).max().round(3), np.abs(clamped - x).max().round(3))

# %% Entropy detector.  A targeted backdoor that drags trigger inputs toward class 0
# also biases generation from noise toward that class.
trig = atk.Trigger(data.spec.class_centers()[0] / 0.6, alpha=0.6)
biased = atk.backdoor_train(benign, data.x_train, trig, atk.BackdoorConfig(lam=3.0, truncation=100, epochs=60,
                                                                           lr=3e-3), rng.derive("bd"))
for name, model in (("benign", benign), ("backdoored", biased)):
    rep = dfn.entropy_detect(model, clf, x, 100, 5, 100, rng.derive("entropy", name))
    print(f"{name:10s} entropy per trial {np.round(rep.entropies, 3)}  mean {rep.mean:.3f}  (ln 4 = {np.log(4):.3f})")

# %% KL between clean and shifted unit Gaussians after forward diffusion
sched = dif.default_schedule()
shift = np.array([1.2, -1.0, 0.5])
ts = [1, 10, 30, 50, 100]
print("analytic KL:", np.round(dfn.kl_monotonicity_check(shift, sched, ts), 4))
p = rng.derive("p").normal((100_000, 3))
q = rng.derive("q").normal((100_000, 3)) + shift
print("Monte Carlo:", np.round(dfn.kl_monte_carlo(p, q, sched, ts, rng.derive("mc")), 4))

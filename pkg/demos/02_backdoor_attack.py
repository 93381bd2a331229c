"""The attack end to end on the desk pseudo-image dataset: train the
victim classifier and a surrogate, search a universal trigger, fine-tune a
benign denoiser into a backdoored one, and compare what each purifier lets
through.  Then the poisoning route, where the attacker only slips trigger
inputs into the fine-tuning data.

Run: python demos/02_backdoor_attack.py   (about three minutes)
"""
# %%
import numpy as np

from difflab import attacks as atk
from difflab import diffusion as dif
from difflab import nn
from difflab.harness import DatasetSpec, make_dataset
from difflab.numerics import RngStream

rng = RngStream(1)
data = make_dataset(DatasetSpec(seed=1))  # 1024 pixels, 4 classes, 4000 / 1000 rows
x, y = data.x_test, data.y_test
d = x.shape[1]

target = nn.train_classifier(nn.Mlp.init([d, 256, 256, 256, 4], rng.derive("target")), data.x_train, data.y_train,
                             epochs=10, rng=rng.derive("target-train"))
surrogate = nn.train_classifier(nn.Mlp.init([d, 128, 128, 4], rng.derive("sur")), data.x_train, data.y_train,
                                epochs=10, rng=rng.derive("sur-train"))
print("target accuracy:", np.mean(nn.predict(target, x) == y))

# %% PGD breaks the bare classifier
pgd = atk.PgdConfig(0.025, 0.00625, 10)
xa = atk.pgd_attack(target, x, y, pgd)
print("accuracy under PGD, no purifier:", np.mean(nn.predict(target, xa) == y))

# %% Universal trigger against the surrogate
init = atk.Trigger.random(d, rng.derive("trig"), alpha=0.05)
trig = atk.optimize_trigger([surrogate], data.x_train, atk.AttackMode(), init, 300, rng.derive("search"),
                            labels=data.y_train)
xr = atk.apply_trigger(x, trig)
print("trigger ASR, no purifier:", atk.measure_asr(target, None, xr, y, atk.AttackMode()))

# %% Benign denoiser, then its backdoored fine-tune
benign = dif.DiffusionModel.create(d, rng.derive("dm"), clip=(-1.0, 1.0), baseline_data=data.x_train)
benign = dif.train_denoiser(benign, data.x_train, 40, rng.derive("dm-train"))
backdoored = atk.backdoor_train(benign, data.x_train, trig, atk.BackdoorConfig(lam=1.0, truncation=30, epochs=20),
                                rng.derive("backdoor"))


def report(name, model):
    purify = lambda z, tag: dif.purify(model, z, 8, rng.derive("eval", name, tag))  # noqa: E731
    clean = np.mean(nn.predict(target, purify(x, "clean")) == y)
    robust = np.mean(nn.predict(target, purify(xa, "pgd")) == y)
    asr = atk.measure_asr(target, lambda z: purify(z, "trig"), xr, y, atk.AttackMode())
    print(f"{name:10s} clean {clean:.3f}  robust {robust:.3f}  trigger ASR {asr:.3f}")


report("benign", benign)
report("backdoor", backdoored)

# %% Poisoning: 1% of the fine-tuning set carries the trigger, ordinary training loss.
# A long fine-tune with a decaying step size lets the 40 trigger rows leave a mark.
poisoned, idx = atk.poison_dataset(data.x_train, trig, 0.01, rng.derive("poison"))
print(len(idx), "poisoned rows out of", len(poisoned))
victim = dif.train_denoiser(benign, poisoned, 120, rng.derive("victim"), lr=3e-3, cosine_lr=True)
report("poisoned", victim)

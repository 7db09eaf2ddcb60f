"""Federated training against three local models.

Each of the three toy silos trains its own detector. They then also train one
shared model with FedAvg, where only weights travel and rows never leave a
silo. Every model is evaluated on every silo's test split. A local model scores
foreign data through its own silo's scaler and threshold, since nobody else's
scaler is available to it. The federated model was trained at every silo, so on
silo s it uses s's scaler and a threshold calibrated at s.

Pass a number of rounds on the command line for a quicker run (default 10).
"""
import sys
import tempfile
from pathlib import Path

from ddoslab import evalkit as ek
from ddoslab import flowdata as fd
from ddoslab import ganomaly as gan
from ddoslab import toy
from ddoslab.federation import Client, FLConfig, global_model, run_federation, train_solo

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 10
epochs = 50
silos = ("A", "B", "C")

data = Path(tempfile.mkdtemp()) / "toy"
toy.make_toy(data, seed=0)
schema = fd.FlowSchema.load(data / "schema.json")
parts = {s: fd.split(fd.preprocess(fd.load_csv(data / f"{s}.csv", schema), schema), 0)
         for s in silos}

arch = gan.GanomalyArch(len(fd.processed_columns(schema)), 8, (128, 64, 32))
cfg = gan.TrainConfig(epochs=epochs, batch_size=256, lr=1e-3)


def calibrated(model, scaler, silo, name):
    """A copy of ``model`` normalized and thresholded on ``silo``'s validation rows."""
    det = ek.Detector(model.clone(), scaler, name)
    ek.select_threshold(det, parts[silo].validation)
    return det


# Local baselines: 50 epochs each on their own benign rows.
local = {s: train_solo(parts[s], arch, cfg, 0, s, epochs) for s in silos}

# FedAvg: every round each client starts from the global weights, trains
# locally, and the server averages the results weighted by sample count.
clients = [Client(s, parts[s], arch, cfg, 0) for s in silos]
result = run_federation(FLConfig(rounds=rounds, local_epochs=epochs, seed=0), clients, arch,
                        cfg, on_round=lambda rl: print(f"round {rl.round}: "
                                                       f"{rl.fingerprint[:12]}"))
fl_model = global_model(result.weights, arch, cfg, 0, rounds * epochs)

scalers = {c.client_id: c.scaler for c in clients}
dets = {name: calibrated(model, scaler, name, name) for name, (model, scaler) in local.items()}
print(f"\n{'model':<6}" + "".join(f"{s:>8}" for s in silos) + "   average F1")
for name in (*silos, "FL"):
    row = []
    for s in silos:
        det = calibrated(fl_model, scalers[s], s, "FL") if name == "FL" else dets[name]
        row.append(ek.evaluate(det, parts[s].test).f1)
    print(f"{name:<6}" + "".join(f"{v:8.3f}" for v in row) + f"   {sum(row) / len(row):.3f}")
